use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffers<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> BnBuffers<T> {
    /// Mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        BnBuffers {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }

    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, stats: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(stats.unbiased_var.data()) {
            *r = keep * *r + m * b;
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub unbiased_var: Tensor<T>,
}

pub enum BnMode<'a, T> {
    /// Normalise with batch statistics (biased variance).
    Train,
    /// Normalise with stored running statistics.
    Eval(&'a BnBuffers<T>),
}

pub(crate) struct BnSaved<T> {
    xhat: Vec<T>,
    /// Per-channel `1/sqrt(var + eps)`.
    inv_std: Vec<T>,
    /// Batch statistics took part in the normalisation.
    batch_stats: bool,
    channels: usize,
    plane: usize,
}

pub(crate) struct NormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub(crate) fn batch_norm_backward<T: Element>(
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    saved: &BnSaved<T>,
) -> NormGrads<T> {
    let (c, plane) = (saved.channels, saved.plane);
    let batch = g.len() / (c * plane);
    let count = T::from_usize(batch * plane).unwrap();
    let gv = g.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..batch {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] = dgamma[ch] + gv[i] * saved.xhat[i];
                dbeta[ch] = dbeta[ch] + gv[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for bi in 0..batch {
        for ch in 0..c {
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if saved.batch_stats {
                    scale / count * (count * gv[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch])
                } else {
                    scale * gv[i]
                };
            }
        }
    }
    NormGrads {
        dx: Tensor::from_parts(g.shape().to_vec(), dx),
        dgamma: Tensor::from_parts(vec![c], dgamma),
        dbeta: Tensor::from_parts(vec![c], dbeta),
    }
}

pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> NormGrads<T> {
    let d = gamma.len();
    let dn = T::from_usize(d).unwrap();
    let gv = g.data();
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = vec![T::zero(); g.len()];
    let mut xr = vec![T::zero(); d];
    for (row, &istd) in inv_std.iter().enumerate() {
        let gr = &gv[row * d..(row + 1) * d];
        for (h, &v) in xr.iter_mut().zip(&x.data()[row * d..(row + 1) * d]) {
            *h = (v - mean[row]) * istd;
        }
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma[j] = dgamma[j] + gr[j] * xr[j];
            dbeta[j] = dbeta[j] + gr[j];
            let dxhat = gr[j] * gamma.data()[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xr[j];
        }
        for j in 0..d {
            let dxhat = gr[j] * gamma.data()[j];
            dx[row * d + j] = istd / dn * (dn * dxhat - sum_dxhat - xr[j] * sum_dxhat_xhat);
        }
    }
    NormGrads {
        dx: Tensor::from_parts(g.shape().to_vec(), dx),
        dgamma: Tensor::from_parts(vec![d], dgamma),
        dbeta: Tensor::from_parts(vec![d], dbeta),
    }
}

impl<T: Element> Tape<T> {
    /// Batch normalisation of `[B,C,H,W]` over `(B,H,W)` per channel.
    ///
    /// In train mode the returned [`BatchStats`] are what the caller should
    /// fold into its running buffers; the tape itself never mutates them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("batch_norm", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: vec![c],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let xv = self.value(x).data();
        let count = batch * plane;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..batch {
                        let off = (bi * c + ch) * plane;
                        acc = acc + xv[off..off + plane].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / n;
                    let mut sq = T::zero();
                    for bi in 0..batch {
                        let off = (bi * c + ch) * plane;
                        for &v in &xv[off..off + plane] {
                            let d = v - mean[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / n;
                }
                let unbiased: Vec<T> = if count > 1 {
                    let factor = n / (n - T::one());
                    var.iter().map(|&v| v * factor).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: Tensor::from_parts(vec![c], mean.clone()),
                    unbiased_var: Tensor::from_parts(vec![c], unbiased),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval(buffers) => {
                if buffers.mean.len() != c || buffers.var.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm buffers",
                        lhs: vec![c],
                        rhs: buffers.mean.shape().to_vec(),
                    });
                }
                (buffers.mean.data().to_vec(), buffers.var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let saved = BnSaved {
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
            channels: c,
            plane,
        };
        let value = Tensor::from_parts(s, out);
        let y = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            &[x, gamma, beta],
        );
        Ok((y, stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![d],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let istd = T::one() / (var + eps).sqrt();
            means.push(mean);
            inv_std.push(istd);
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor::from_parts(s, out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }
}
