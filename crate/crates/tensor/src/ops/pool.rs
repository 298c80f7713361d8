use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::ops::conv::window_out_len;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Routes each output gradient to the input element that won its window.
pub(crate) fn scatter_argmax<T: Element>(
    g: &Tensor<T>,
    input_shape: &[usize],
    argmax: &[usize],
) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(input_shape)];
    for (&src, &gv) in argmax.iter().zip(g.data()) {
        out[src] = out[src] + gv;
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// Windowed maximum over `[B,C,H,W]`. Padding never wins; ties go to the
/// first element in row-major window order.
pub(crate) fn maxpool2d_values<T: Element>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(invalid("maxpool2d", format!("expected [B,C,H,W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let config = |msg: String| TensorError::Configuration { op: "maxpool2d", msg };
    if pad.0 >= kernel.0 || pad.1 >= kernel.1 {
        return Err(config(format!("padding {pad:?} must be smaller than kernel {kernel:?}")));
    }
    let (Some(oh), Some(ow)) = (
        window_out_len(h, kernel.0, stride.0, pad.0),
        window_out_len(w, kernel.1, stride.1, pad.1),
    ) else {
        return Err(config(format!(
            "window {kernel:?} larger than padded input {}x{}",
            h + 2 * pad.0,
            w + 2 * pad.1
        )));
    };
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let src = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(usize, T)> = None;
                for ky in 0..kernel.0 {
                    let Some(iy) = (oy * stride.0 + ky).checked_sub(pad.0).filter(|&y| y < h) else {
                        continue;
                    };
                    for kx in 0..kernel.1 {
                        let Some(ix) = (ox * stride.1 + kx).checked_sub(pad.1).filter(|&v| v < w)
                        else {
                            continue;
                        };
                        let idx = base + iy * w + ix;
                        let v = src[idx];
                        match best {
                            Some((_, bv)) if !(v > bv) => {}
                            _ => best = Some((idx, v)),
                        }
                    }
                }
                let (idx, v) = best.expect("every window overlaps the input");
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, c, oh, ow], out), argmax))
}

/// Non-overlapping maximum over groups of `k` consecutive tokens of `[B,N,D]`.
pub(crate) fn maxpool_seq_values<T: Element>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(invalid("maxpool1d_seq", format!("expected [B,N,D], got {s:?}")));
    }
    if k == 0 || k != stride {
        return Err(invalid(
            "maxpool1d_seq",
            format!("kernel {k} and stride {stride} must be equal and positive"),
        ));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if n % k != 0 {
        return Err(TensorError::Divisibility {
            op: "maxpool1d_seq",
            len: n,
            by: k,
        });
    }
    let groups = n / k;
    let src = x.data();
    let mut out = Vec::with_capacity(b * groups * d);
    let mut argmax = Vec::with_capacity(b * groups * d);
    for bi in 0..b {
        for gi in 0..groups {
            for f in 0..d {
                let mut best_idx = (bi * n + gi * k) * d + f;
                for t in 1..k {
                    let idx = (bi * n + gi * k + t) * d + f;
                    if src[idx] > src[best_idx] {
                        best_idx = idx;
                    }
                }
                out.push(src[best_idx]);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, groups, d], out), argmax))
}

impl<T: Element> Tape<T> {
    pub fn maxpool2d(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (value, argmax) = maxpool2d_values(self.value(x), kernel, stride, pad)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Max-pool along the token axis of `[B,N,D]`, `N -> N/k`.
    pub fn maxpool1d_seq(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = maxpool_seq_values(self.value(x), k, stride)?;
        Ok(self.push(value, Op::MaxPoolSeq { x, argmax }, &[x]))
    }
}
