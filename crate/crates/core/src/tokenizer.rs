//! Convolutional image tokenizer: conv stem, max-pool, flatten, projection,
//! positional embedding and class token.

use ecvit_tensor::{window_out_len, Conv2dSpec, Element, Tensor, Var};
use rand::Rng;

use crate::config::{Activation, ModelConfig, TokenizerVariant};
use crate::error::{Error, Result};
use crate::params::{BnIds, Ctx, Init, ParamId};

/// Token batch `[B, N+1, D]` with its patch grid; token 0 is the class token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl TokenSequence {
    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl ConvPlan {
    pub fn spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.stride, self.pad, self.groups)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn params(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel.0 * self.kernel.1
    }

    pub fn macs(&self) -> usize {
        self.params() * self.out_hw.0 * self.out_hw.1
    }
}

/// Convolutions followed by an optional batch norm and the activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemStage {
    pub name: String,
    pub convs: Vec<ConvPlan>,
    /// Channel count of the batch norm, if enabled.
    pub bn: Option<usize>,
    pub out_hw: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolPlan {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// Static layer geometry of the tokenizer for one config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerPlan {
    pub stages: Vec<StemStage>,
    pub pool: Option<PoolPlan>,
    pub channels: usize,
    pub grid: (usize, usize),
    pub dim: usize,
}

/// Output length of a window, rejecting geometry that silently drops input
/// pixels beyond the padding.
fn exact_window(
    what: &str,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    errors: &mut Vec<String>,
) -> usize {
    match window_out_len(len, kernel, stride, pad) {
        Some(out) if (len + 2 * pad - kernel) % stride <= pad => out,
        Some(out) => {
            errors.push(format!(
                "tokenizer {what}: length {len} with kernel {kernel}, stride {stride}, pad {pad} drops input pixels"
            ));
            out
        }
        None => {
            errors.push(format!(
                "tokenizer {what}: kernel {kernel} does not fit length {len} with pad {pad}"
            ));
            0
        }
    }
}

impl TokenizerPlan {
    pub fn new(cfg: &ModelConfig) -> std::result::Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let hw = (cfg.input_hw[0], cfg.input_hw[1]);
        let c = cfg.in_channels;
        let d0 = cfg.d0;
        let bn = |ch: usize| cfg.use_bn_tok.then_some(ch);

        let mut conv = |name: &str,
                        (cin, cout, groups): (usize, usize, usize),
                        kernel: (usize, usize),
                        stride: (usize, usize),
                        pad: (usize, usize),
                        in_hw: (usize, usize)| {
            let out_hw = (
                exact_window(name, in_hw.0, kernel.0, stride.0, pad.0, &mut errors),
                exact_window(name, in_hw.1, kernel.1, stride.1, pad.1, &mut errors),
            );
            ConvPlan {
                name: name.to_string(),
                cin,
                cout,
                groups,
                kernel,
                stride,
                pad,
                in_hw,
                out_hw,
            }
        };

        let stages = match cfg.tokenizer_variant {
            TokenizerVariant::Factorized7 => {
                let h_dw = conv("conv_h.dw", (c, c, c), (7, 1), (2, 1), (3, 0), hw);
                let h_pw = conv("conv_h.pw", (c, d0 / 2, 1), (1, 1), (1, 1), (0, 0), h_dw.out_hw);
                let mid = h_pw.out_hw;
                let v_dw = conv("conv_v.dw", (d0 / 2, d0 / 2, d0 / 2), (1, 7), (1, 2), (0, 3), mid);
                let v_pw = conv("conv_v.pw", (d0 / 2, d0, 1), (1, 1), (1, 1), (0, 0), v_dw.out_hw);
                let out = v_pw.out_hw;
                vec![
                    StemStage {
                        name: "h".into(),
                        convs: vec![h_dw, h_pw],
                        bn: bn(d0 / 2),
                        out_hw: mid,
                    },
                    StemStage {
                        name: "v".into(),
                        convs: vec![v_dw, v_pw],
                        bn: bn(d0),
                        out_hw: out,
                    },
                ]
            }
            TokenizerVariant::Full7 | TokenizerVariant::Full5 => {
                let k = if cfg.tokenizer_variant == TokenizerVariant::Full7 { 7 } else { 5 };
                let p = conv("conv", (c, d0, 1), (k, k), (2, 2), (k / 2, k / 2), hw);
                let out = p.out_hw;
                vec![StemStage {
                    name: "full".into(),
                    convs: vec![p],
                    bn: bn(d0),
                    out_hw: out,
                }]
            }
        };

        let stem_hw = stages.last().map(|s| s.out_hw).unwrap_or(hw);
        let pool = cfg.use_maxpool_tok.then(|| {
            let out_hw = (
                exact_window("maxpool", stem_hw.0, 3, 2, 1, &mut errors),
                exact_window("maxpool", stem_hw.1, 3, 2, 1, &mut errors),
            );
            PoolPlan {
                kernel: 3,
                stride: 2,
                pad: 1,
                in_hw: stem_hw,
                out_hw,
            }
        });
        let grid = pool.map(|p| p.out_hw).unwrap_or(stem_hw);
        if grid.0 == 0 || grid.1 == 0 {
            errors.push(format!("tokenizer produces an empty grid {}x{}", grid.0, grid.1));
        }
        if errors.is_empty() {
            Ok(TokenizerPlan {
                stages,
                pool,
                channels: d0,
                grid,
                dim: cfg.stage_dims[0],
            })
        } else {
            Err(errors)
        }
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerParams {
    pub plan: TokenizerPlan,
    pub activation: Activation,
    /// One weight per conv, grouped like `plan.stages`.
    pub convs: Vec<Vec<ParamId>>,
    pub bns: Vec<Option<BnIds>>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: ParamId,
    pub cls: ParamId,
}

impl TokenizerParams {
    pub(crate) fn init<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        plan: &TokenizerPlan,
        activation: Activation,
    ) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for stage in &plan.stages {
            convs.push(
                stage
                    .convs
                    .iter()
                    .map(|c| init.weight(format!("tokenizer.{}", c.name), c.weight_shape()))
                    .collect(),
            );
            bns.push(
                stage
                    .bn
                    .map(|ch| init.batch_norm(&format!("tokenizer.bn_{}", stage.name), ch)),
            );
        }
        let n = plan.patches();
        let proj_w = init.weight("tokenizer.proj.weight".into(), vec![plan.channels, plan.dim]);
        let proj_b = init.bias("tokenizer.proj.bias".into(), plan.dim);
        let pos = init.weight("tokenizer.pos".into(), vec![n, plan.dim]);
        let cls = init
            .store
            .add("tokenizer.cls", Tensor::zeros(vec![plan.dim]), false);
        TokenizerParams {
            plan: plan.clone(),
            activation,
            convs,
            bns,
            proj_w,
            proj_b,
            pos,
            cls,
        }
    }
}

pub(crate) fn activate<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => ctx.tape.gelu(x),
        Activation::Relu => ctx.tape.relu(x),
        Activation::None => x,
    }
}

/// Prepends the broadcast class token `cls: [D]` to `patches: [B, N, D]`.
pub(crate) fn prepend_cls<T: Element>(ctx: &mut Ctx<'_, T>, cls: Var, patches: Var) -> Result<Var> {
    let (b, d) = {
        let s = ctx.tape.shape(patches);
        (s[0], s[2])
    };
    let zeros = ctx.tape.constant(Tensor::zeros(vec![b, 1, d]));
    let cls = ctx.tape.add_bias(zeros, cls)?;
    Ok(ctx.tape.concat(&[cls, patches], 1)?)
}

/// Feature map `[B, C, H, W]` before flattening.
pub fn stem<T: Element>(ctx: &mut Ctx<'_, T>, p: &TokenizerParams, images: Var) -> Result<Var> {
    let s = ctx.tape.shape(images);
    let want = [p.plan.stages[0].convs[0].cin, p.plan.stages[0].convs[0].in_hw.0, p.plan.stages[0].convs[0].in_hw.1];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Contract(format!(
            "tokenizer expects images [B, {}, {}, {}], got {s:?}",
            want[0], want[1], want[2]
        )));
    }
    let mut x = images;
    for ((stage, convs), bn) in p.plan.stages.iter().zip(&p.convs).zip(&p.bns) {
        for (plan, &w) in stage.convs.iter().zip(convs) {
            let w = ctx.param(w);
            x = ctx.tape.conv2d(x, w, None, plan.spec())?;
        }
        if let Some(bn) = bn {
            x = ctx.batch_norm(x, *bn)?;
        }
        x = activate(ctx, x, p.activation);
    }
    if let Some(pool) = p.plan.pool {
        x = ctx.tape.maxpool2d(
            x,
            (pool.kernel, pool.kernel),
            (pool.stride, pool.stride),
            (pool.pad, pool.pad),
        )?;
    }
    Ok(x)
}

/// Images `[B, C, H, W]` to tokens `[B, N+1, D]`.
pub fn tokenize<T: Element>(
    ctx: &mut Ctx<'_, T>,
    p: &TokenizerParams,
    images: Var,
) -> Result<TokenSequence> {
    let x = stem(ctx, p, images)?;
    let b = ctx.tape.shape(x)[0];
    let (rows, cols) = p.plan.grid;
    let n = rows * cols;
    // [B, C, h, w] -> [B, h*w, C], row-major over the grid
    let x = ctx.tape.reshape(x, &[b, p.plan.channels, n])?;
    let x = ctx.tape.permute(x, &[0, 2, 1])?;
    let (w, bias, pos, cls) = (
        ctx.param(p.proj_w),
        ctx.param(p.proj_b),
        ctx.param(p.pos),
        ctx.param(p.cls),
    );
    let x = ctx.tape.linear(x, w, Some(bias))?;
    let x = ctx.tape.add_bias(x, pos)?;
    let tokens = prepend_cls(ctx, cls, x)?;
    Ok(TokenSequence {
        tokens,
        grid: p.plan.grid,
        dim: p.plan.dim,
    })
}
