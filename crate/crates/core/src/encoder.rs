//! Encoder layer: partitioned multi-head self-attention and the
//! convolutional feed-forward network, each pre-normalised with a residual.

use ecvit_tensor::{Conv2dSpec, Element, Tensor, TensorError, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BnIds, Ctx, Init, NormIds, ParamId};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Patch tokens per block; `None` attends over the whole sequence.
    pub partition: Option<usize>,
    /// Copy the class token into every block.
    pub append_cls: bool,
}

impl AttentionSpec {
    /// Block size actually used for `n` patch tokens.
    pub fn block_size(&self, n: usize) -> usize {
        match self.partition {
            Some(m) if m < n => m,
            _ => n,
        }
    }

    pub fn blocks(&self, n: usize) -> usize {
        n / self.block_size(n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub dim: usize,
    pub kernel: usize,
    pub attn: AttentionSpec,
    pub ln1: NormIds,
    /// `[D, 3D]`, columns ordered q | k | v, heads contiguous within each.
    pub qkv: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln2: NormIds,
    /// Depthwise `(k,1)` and `(1,k)` kernels; the batch norm that follows
    /// supplies the offset, so neither carries a bias.
    pub dw_row: ParamId,
    pub dw_col: ParamId,
    pub bn: BnIds,
}

impl EncoderParams {
    pub(crate) fn init<T: Element, R: Rng>(
        init: &mut Init<'_, T, R>,
        prefix: &str,
        dim: usize,
        kernel: usize,
        attn: AttentionSpec,
    ) -> Self {
        EncoderParams {
            dim,
            kernel,
            attn,
            ln1: init.norm(&format!("{prefix}.ln1"), dim),
            qkv: init.weight(format!("{prefix}.attn.qkv"), vec![dim, 3 * dim]),
            out_w: init.weight(format!("{prefix}.attn.out.weight"), vec![dim, dim]),
            out_b: init.bias(format!("{prefix}.attn.out.bias"), dim),
            ln2: init.norm(&format!("{prefix}.ln2"), dim),
            dw_row: init.weight(format!("{prefix}.ffn.dw_row"), vec![dim, 1, kernel, 1]),
            dw_col: init.weight(format!("{prefix}.ffn.dw_col"), vec![dim, 1, 1, kernel]),
            bn: init.batch_norm(&format!("{prefix}.ffn.bn"), dim),
        }
    }
}

fn dims<T: Element>(ctx: &Ctx<'_, T>, x: Var) -> Result<(usize, usize, usize)> {
    match *ctx.tape.shape(x) {
        [b, t, d] if t >= 2 => Ok((b, t - 1, d)),
        ref s => Err(Error::Contract(format!(
            "expected tokens [B, N+1, D] with N >= 1, got {s:?}"
        ))),
    }
}

/// Splits `[B, N+1, D]` into blocks `[B, M+1, D]`, each holding a copy of the
/// class token followed by `M` consecutive patch tokens.
pub fn partition<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, m: usize) -> Result<Vec<Var>> {
    let (_, n, _) = dims(ctx, x)?;
    if m == 0 || n % m != 0 {
        return Err(TensorError::Divisibility {
            op: "partition",
            len: n,
            by: m,
        }
        .into());
    }
    let cls = ctx.tape.slice(x, 1, 0, 1)?;
    (0..n / m)
        .map(|i| {
            let patches = ctx.tape.slice(x, 1, 1 + i * m, m)?;
            Ok(ctx.tape.concat(&[cls, patches], 1)?)
        })
        .collect()
}

/// Per-head q, k, v, each `[B, H, N+1, hd]`.
fn project_qkv<T: Element>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    qkv: ParamId,
    heads: usize,
) -> Result<[Var; 3]> {
    let (b, n, d) = dims(ctx, x)?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("dim {d} not divisible into {heads} heads")));
    }
    let w = ctx.param(qkv);
    let mut out = [w; 3];
    for (i, o) in out.iter_mut().enumerate() {
        // one column block of the fused weight per projection
        let wi = ctx.tape.slice(w, 1, i * d, d)?;
        let y = ctx.tape.matmul(x, wi)?;
        let y = ctx.tape.reshape(y, &[b, n + 1, heads, d / heads])?;
        *o = ctx.tape.permute(y, &[0, 2, 1, 3])?;
    }
    Ok(out)
}

/// softmax(q kᵀ / √hd) v over the last two axes.
fn attend<T: Element>(ctx: &mut Ctx<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let rank = ctx.tape.shape(k).len();
    let hd = ctx.tape.shape(q)[rank - 1];
    let kt = ctx.tape.transpose(k, rank - 2, rank - 1)?;
    let s = ctx.tape.matmul(q, kt)?;
    let s = ctx.tape.scale(s, T::from_f64_lossy(1.0 / (hd as f64).sqrt()));
    let p = ctx.tape.softmax(s, rank - 1)?;
    Ok(ctx.tape.matmul(p, v)?)
}

/// `[B, H, N+1, hd]` back to `[B, N+1, D]`, then the output projection.
fn merge_heads<T: Element>(ctx: &mut Ctx<'_, T>, o: Var, p: &EncoderParams) -> Result<Var> {
    let s = ctx.tape.shape(o).to_vec();
    let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
    let o = ctx.tape.reshape(o, &[s[0], s[2], s[1] * s[3]])?;
    let (w, b) = (ctx.param(p.out_w), ctx.param(p.out_b));
    Ok(ctx.tape.linear(o, w, Some(b))?)
}

/// Plain multi-head attention over all `N+1` tokens.
pub fn global_msa<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, p: &EncoderParams) -> Result<Var> {
    let [q, k, v] = project_qkv(ctx, x, p.qkv, p.attn.heads)?;
    let o = attend(ctx, q, k, v)?;
    merge_heads(ctx, o, p)
}

/// Partitioned attention on `[B, N+1, D]`; per-block class outputs are
/// averaged into one class token.
pub fn pmsa<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, p: &EncoderParams) -> Result<Var> {
    let (b, n, _) = dims(ctx, x)?;
    let m = p.attn.block_size(n);
    if n % m != 0 {
        return Err(TensorError::Divisibility {
            op: "pmsa",
            len: n,
            by: m,
        }
        .into());
    }
    let nb = n / m;
    let h = p.attn.heads;
    let qkv = project_qkv(ctx, x, p.qkv, h)?;
    let hd = ctx.tape.shape(qkv[0])[3];

    let mut cls = [qkv[0]; 3];
    let mut blocks = [qkv[0]; 3];
    for i in 0..3 {
        cls[i] = ctx.tape.slice(qkv[i], 2, 0, 1)?;
        let patches = ctx.tape.slice(qkv[i], 2, 1, n)?;
        blocks[i] = ctx.tape.reshape(patches, &[b, h, nb, m, hd])?;
        if p.attn.append_cls {
            let c = ctx.tape.reshape(cls[i], &[b, h, 1, 1, hd])?;
            let c = ctx.tape.concat(&vec![c; nb], 2)?;
            blocks[i] = ctx.tape.concat(&[c, blocks[i]], 3)?;
        }
    }
    let o = attend(ctx, blocks[0], blocks[1], blocks[2])?;

    let (cls_out, patch_out) = if p.attn.append_cls {
        let c = ctx.tape.slice(o, 3, 0, 1)?;
        let c = ctx.tape.mean_axis(c, 2)?;
        let c = ctx.tape.reshape(c, &[b, h, 1, hd])?;
        (c, ctx.tape.slice(o, 3, 1, m)?)
    } else {
        // the class query still reads every token
        (attend(ctx, cls[0], qkv[1], qkv[2])?, o)
    };
    let patch_out = ctx.tape.reshape(patch_out, &[b, h, n, hd])?;
    let o = ctx.tape.concat(&[cls_out, patch_out], 2)?;
    merge_heads(ctx, o, p)
}

/// Convolutional feed-forward on the patch grid; the class token is
/// returned unchanged in slot 0.
pub fn iffn<T: Element>(ctx: &mut Ctx<'_, T>, x: TokenSequence, p: &EncoderParams) -> Result<Var> {
    let cls = ctx.tape.slice(x.tokens, 1, 0, 1)?;
    let y = iffn_patches(ctx, x, p)?;
    Ok(ctx.tape.concat(&[cls, y], 1)?)
}

/// Feed-forward output for the patch tokens only, `[B, N, D]`.
fn iffn_patches<T: Element>(ctx: &mut Ctx<'_, T>, x: TokenSequence, p: &EncoderParams) -> Result<Var> {
    let (b, n, d) = dims(ctx, x.tokens)?;
    let (rows, cols) = x.grid;
    if rows * cols != n || d != p.dim {
        return Err(Error::Contract(format!(
            "grid {rows}x{cols} / dim {} does not match tokens [B, {}, {d}]",
            p.dim,
            n + 1
        )));
    }
    let patches = ctx.tape.slice(x.tokens, 1, 1, n)?;
    let y = ctx.tape.permute(patches, &[0, 2, 1])?;
    let y = ctx.tape.reshape(y, &[b, d, rows, cols])?;
    let half = (p.kernel - 1) / 2;
    let w = ctx.param(p.dw_row);
    let y = ctx.tape.conv2d(y, w, None, Conv2dSpec::new((1, 1), (half, 0), d))?;
    let w = ctx.param(p.dw_col);
    let y = ctx.tape.conv2d(y, w, None, Conv2dSpec::new((1, 1), (0, half), d))?;
    let y = ctx.batch_norm(y, p.bn)?;
    let y = ctx.tape.gelu(y);
    let y = ctx.tape.reshape(y, &[b, d, n])?;
    Ok(ctx.tape.permute(y, &[0, 2, 1])?)
}

/// One encoder layer. The class token receives only the attention residual.
pub fn encode<T: Element>(
    ctx: &mut Ctx<'_, T>,
    x: TokenSequence,
    p: &EncoderParams,
) -> Result<TokenSequence> {
    let h = ctx.layer_norm(x.tokens, p.ln1)?;
    let a = pmsa(ctx, h, p)?;
    let y = ctx.tape.add(x.tokens, a)?;

    let h = ctx.layer_norm(y, p.ln2)?;
    let f = iffn_patches(ctx, TokenSequence { tokens: h, ..x }, p)?;
    // zero residual in the class slot
    let (b, d) = (ctx.tape.shape(f)[0], ctx.tape.shape(f)[2]);
    let zero = ctx.tape.constant(Tensor::zeros(vec![b, 1, d]));
    let f = ctx.tape.concat(&[zero, f], 1)?;
    Ok(TokenSequence {
        tokens: ctx.tape.add(y, f)?,
        ..x
    })
}
