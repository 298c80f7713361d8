//! Token merging and the assembled model.

use ecvit_tensor::{Element, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Geometry, ModelConfig};
use crate::encoder::{encode, AttentionSpec, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{BufferId, Ctx, Init, Mode, NormIds, ParamId, ParamStore};
use crate::tokenizer::{tokenize, TokenSequence, TokenizerParams};
use ecvit_tensor::BatchStats;

/// Projection between the two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergeParams {
    /// Pooling factor along the token axis; 1 disables pooling.
    pub k: usize,
    pub grid: (usize, usize),
    pub dim: usize,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub ln: NormIds,
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter handles for every layer, in forward order.
#[derive(Clone, Debug)]
pub struct Arch {
    pub tokenizer: TokenizerParams,
    pub stage2: Vec<EncoderParams>,
    pub merge: MergeParams,
    pub stage3: Vec<EncoderParams>,
    pub head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct Ecvit<T> {
    pub config: ModelConfig,
    pub geometry: Geometry,
    pub arch: Arch,
    pub store: ParamStore<T>,
}

/// Logits plus the token sequences leaving each stage.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    pub stage2: TokenSequence,
    pub merged: TokenSequence,
    pub stage3: TokenSequence,
}

/// Max-pools groups of `k` consecutive patch tokens (class token excluded),
/// then applies one linear map to every token.
pub fn merge<T: Element>(
    ctx: &mut Ctx<'_, T>,
    x: TokenSequence,
    p: &MergeParams,
) -> Result<TokenSequence> {
    let n = x.patches();
    let mut tokens = x.tokens;
    if p.k > 1 {
        let cls = ctx.tape.slice(tokens, 1, 0, 1)?;
        let patches = ctx.tape.slice(tokens, 1, 1, n)?;
        let pooled = ctx.tape.maxpool1d_seq(patches, p.k, p.k)?;
        tokens = ctx.tape.concat(&[cls, pooled], 1)?;
    }
    let (w, b) = (ctx.param(p.w), ctx.param(p.b));
    Ok(TokenSequence {
        tokens: ctx.tape.linear(tokens, w, Some(b))?,
        grid: p.grid,
        dim: p.dim,
    })
}

impl Arch {
    fn build<T: Element>(cfg: &ModelConfig, geo: &Geometry, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store, rng: &mut rng };
        let tokenizer = TokenizerParams::init(&mut init, &geo.tokenizer, cfg.activation);
        let stage = |init: &mut Init<'_, T, ChaCha8Rng>, s: usize| -> Vec<EncoderParams> {
            let attn = AttentionSpec {
                heads: cfg.heads(s),
                partition: cfg.partition(s),
                append_cls: cfg.append_cls,
            };
            (0..cfg.depths[s])
                .map(|i| {
                    EncoderParams::init(
                        init,
                        &format!("stage{}.{i}", s + 2),
                        cfg.stage_dims[s],
                        cfg.ffn_kernel,
                        attn,
                    )
                })
                .collect()
        };
        let stage2 = stage(&mut init, 0);
        let [d2, d3] = cfg.stage_dims;
        let merge = MergeParams {
            k: if cfg.use_merging { cfg.merge_k } else { 1 },
            grid: geo.stages[1].grid,
            dim: d3,
            w: init.weight("merge.weight".into(), vec![d2, d3]),
            b: init.bias("merge.bias".into(), d3),
        };
        let stage3 = stage(&mut init, 1);
        let head = HeadParams {
            ln: init.norm("head.ln", d3),
            w: init.weight("head.weight".into(), vec![d3, cfg.num_classes]),
            b: init.bias("head.bias".into(), cfg.num_classes),
        };
        Arch {
            tokenizer,
            stage2,
            merge,
            stage3,
            head,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<ForwardOut> {
        let mut x = tokenize(ctx, &self.tokenizer, images)?;
        for p in &self.stage2 {
            x = encode(ctx, x, p)?;
        }
        let stage2 = x;
        x = merge(ctx, x, &self.merge)?;
        let merged = x;
        for p in &self.stage3 {
            x = encode(ctx, x, p)?;
        }
        let cls = ctx.tape.slice(x.tokens, 1, 0, 1)?;
        let b = ctx.tape.shape(cls)[0];
        let cls = ctx.tape.reshape(cls, &[b, x.dim])?;
        let cls = ctx.layer_norm(cls, self.head.ln)?;
        let (w, bias) = (ctx.param(self.head.w), ctx.param(self.head.b));
        let logits = ctx.tape.linear(cls, w, Some(bias))?;
        Ok(ForwardOut {
            logits,
            stage2,
            merged,
            stage3: x,
        })
    }
}

/// Loss, logits and gradients from one training-mode pass.
pub struct StepOutput<T> {
    pub loss: f64,
    pub logits: Tensor<T>,
    pub grads: Vec<Tensor<T>>,
    pub bn_updates: Vec<(BufferId, BatchStats<T>)>,
}

/// Validated config, freshly initialised from `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Ecvit<T>> {
    let geometry = config.geometry()?;
    let mut store = ParamStore::new();
    let arch = Arch::build(config, &geometry, &mut store, seed);
    Ok(Ecvit {
        config: config.clone(),
        geometry,
        arch,
        store,
    })
}

impl<T: Element> Ecvit<T> {
    pub fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let [h, w] = self.config.input_hw;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [self.config.in_channels, h, w] {
            return Err(Error::Contract(format!(
                "images must be [B, {}, {h}, {w}], got {s:?}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Eval-mode logits `[B, classes]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let x = ctx.tape.constant(images.clone());
        let out = self.arch.forward(&mut ctx, x)?;
        Ok(ctx.tape.value(out.logits).clone())
    }

    /// Mean cross-entropy without building gradients.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<f64> {
        self.check_images(images)?;
        let mut ctx = Ctx::new(&self.store, mode);
        let x = ctx.tape.constant(images.clone());
        let out = self.arch.forward(&mut ctx, x)?;
        let loss = ctx.tape.cross_entropy(out.logits, labels)?;
        Ok(ctx.tape.value(loss).item().as_f64())
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(&self, images: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<StepOutput<T>> {
        self.check_images(images)?;
        if labels.len() != images.shape()[0] {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                images.shape()[0]
            )));
        }
        let mut ctx = Ctx::new(&self.store, mode);
        let x = ctx.tape.constant(images.clone());
        let out = self.arch.forward(&mut ctx, x)?;
        let loss = ctx.tape.cross_entropy(out.logits, labels)?;
        ctx.tape.backward(loss)?;
        let grads = ctx.gradients()?;
        let loss_value = ctx.tape.value(loss).item().as_f64();
        let logits = ctx.tape.value(out.logits).clone();
        Ok(StepOutput {
            loss: loss_value,
            logits,
            grads,
            bn_updates: ctx.into_updates(),
        })
    }

    pub fn cast<U: Element>(&self) -> Ecvit<U> {
        Ecvit {
            config: self.config.clone(),
            geometry: self.geometry.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }
}
