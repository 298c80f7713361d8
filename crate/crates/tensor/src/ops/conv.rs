//! Grouped 2-D cross-correlation.
//!
//! Dense groups go through im2col + GEMM, single-channel groups (depthwise)
//! use a direct loop.

use crate::element::{gemm, Element, Layout};
use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), pad: (usize, usize), groups: usize) -> Self {
        Conv2dSpec { stride, pad, groups }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new((1, 1), (0, 0), 1)
    }
}

/// Floor-divided output length of a strided window, or `None` if the window
/// does not fit the padded input.
pub fn window_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    spec: Conv2dSpec,
}

fn config_err(msg: String) -> TensorError {
    TensorError::Configuration { op: "conv2d", msg }
}

fn geometry(xs: &[usize], ws: &[usize], spec: &Conv2dSpec) -> Result<Geometry> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(config_err(format!(
            "groups {g} must divide input channels {cin} and output channels {cout}"
        )));
    }
    if cin_g != cin / g {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let oh = window_out_len(h, kh, spec.stride.0, spec.pad.0);
    let ow = window_out_len(w, kw, spec.stride.1, spec.pad.1);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(config_err(format!(
            "kernel {kh}x{kw} with stride {:?} and padding {:?} does not fit input {h}x{w}",
            spec.stride, spec.pad
        )));
    };
    Ok(Geometry {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        groups: g,
        cin_g,
        cout_g: cout / g,
        spec: *spec,
    })
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == (1, 1)
            && self.spec.pad == (0, 0)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.spec.stride.0 + ky).checked_sub(self.spec.pad.0).filter(|&y| y < self.h)
    }

    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.spec.stride.1 + kx).checked_sub(self.spec.pad.1).filter(|&x| x < self.w)
    }

    /// Unfolds one group of one image into `[cin_g*kh*kw, oh*ow]`.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.oh * self.ow;
        for c in 0..self.cin_g {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = self.in_row(oy, ky);
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match (iy, self.in_col(ox, kx)) {
                                (Some(iy), Some(ix)) => src[iy * self.w + ix],
                                _ => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for c in 0..self.cin_g {
            let dst = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.in_col(ox, kx) {
                                dst[iy * self.w + ix] = dst[iy * self.w + ix] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_values<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: &Geometry,
) -> Tensor<T> {
    let plane_in = geo.h * geo.w;
    let plane_out = geo.oh * geo.ow;
    let ksize = geo.cin_g * geo.kh * geo.kw;
    let mut out = vec![T::zero(); geo.batch * geo.cout * plane_out];
    let mut cols = if geo.cin_g > 1 && !geo.is_pointwise() {
        vec![T::zero(); ksize * plane_out]
    } else {
        Vec::new()
    };
    for b in 0..geo.batch {
        for g in 0..geo.groups {
            let xg = &x.data()[(b * geo.cin + g * geo.cin_g) * plane_in..][..geo.cin_g * plane_in];
            let wg = &w.data()[g * geo.cout_g * ksize..(g + 1) * geo.cout_g * ksize];
            let og = &mut out[(b * geo.cout + g * geo.cout_g) * plane_out..][..geo.cout_g * plane_out];
            if geo.cin_g == 1 {
                depthwise_forward(geo, xg, wg, og);
            } else {
                let rhs: &[T] = if geo.is_pointwise() {
                    xg
                } else {
                    geo.im2col(xg, &mut cols);
                    &cols
                };
                gemm(
                    geo.cout_g,
                    ksize,
                    plane_out,
                    wg,
                    Layout::row_major(ksize),
                    rhs,
                    Layout::row_major(plane_out),
                    T::zero(),
                    og,
                    plane_out,
                );
            }
        }
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(plane_out).enumerate() {
            let bv = bias.data()[i % geo.cout];
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
    Tensor::from_parts(vec![geo.batch, geo.cout, geo.oh, geo.ow], out)
}

fn depthwise_forward<T: Element>(geo: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let k = geo.kh * geo.kw;
    for m in 0..geo.cout_g {
        let wk = &w[m * k..(m + 1) * k];
        let o = &mut out[m * geo.oh * geo.ow..(m + 1) * geo.oh * geo.ow];
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let mut acc = T::zero();
                for ky in 0..geo.kh {
                    let Some(iy) = geo.in_row(oy, ky) else { continue };
                    for kx in 0..geo.kw {
                        if let Some(ix) = geo.in_col(ox, kx) {
                            acc = acc + wk[ky * geo.kw + kx] * x[iy * geo.w + ix];
                        }
                    }
                }
                o[oy * geo.ow + ox] = acc;
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    geo: &Geometry,
    x: &[T],
    w: &[T],
    g: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let k = geo.kh * geo.kw;
    let mut dx = dx;
    let mut dw = dw;
    for m in 0..geo.cout_g {
        let wk = &w[m * k..(m + 1) * k];
        let gm = &g[m * geo.oh * geo.ow..(m + 1) * geo.oh * geo.ow];
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let gv = gm[oy * geo.ow + ox];
                for ky in 0..geo.kh {
                    let Some(iy) = geo.in_row(oy, ky) else { continue };
                    for kx in 0..geo.kw {
                        if let Some(ix) = geo.in_col(ox, kx) {
                            let xi = iy * geo.w + ix;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + wk[ky * geo.kw + kx] * gv;
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let wi = m * k + ky * geo.kw + kx;
                                dw[wi] = dw[wi] + x[xi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    spec: &Conv2dSpec,
    want_x: bool,
    want_w: bool,
) -> ConvGrads<T> {
    let geo = geometry(x.shape(), w.shape(), spec).expect("validated in forward");
    let plane_in = geo.h * geo.w;
    let plane_out = geo.oh * geo.ow;
    let ksize = geo.cin_g * geo.kh * geo.kw;
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
    let dense_cols = geo.cin_g > 1 && !geo.is_pointwise();
    let mut cols = if dense_cols { vec![T::zero(); ksize * plane_out] } else { Vec::new() };
    let mut dcols = if dense_cols && want_x { vec![T::zero(); ksize * plane_out] } else { Vec::new() };
    for b in 0..geo.batch {
        for gi in 0..geo.groups {
            let x_off = (b * geo.cin + gi * geo.cin_g) * plane_in;
            let xg = &x.data()[x_off..x_off + geo.cin_g * plane_in];
            let w_range = gi * geo.cout_g * ksize..(gi + 1) * geo.cout_g * ksize;
            let wg = &w.data()[w_range.clone()];
            let g_off = (b * geo.cout + gi * geo.cout_g) * plane_out;
            let gg = &g.data()[g_off..g_off + geo.cout_g * plane_out];
            if geo.cin_g == 1 {
                depthwise_backward(
                    &geo,
                    xg,
                    wg,
                    gg,
                    dx.as_mut().map(|d| &mut d[x_off..x_off + plane_in]),
                    dw.as_mut().map(|d| &mut d[w_range.clone()]),
                );
                continue;
            }
            if let Some(dw) = dw.as_mut() {
                let rhs: &[T] = if dense_cols {
                    geo.im2col(xg, &mut cols);
                    &cols
                } else {
                    xg
                };
                // dW_g += dOut_g · colsᵀ
                gemm(
                    geo.cout_g,
                    plane_out,
                    ksize,
                    gg,
                    Layout::row_major(plane_out),
                    rhs,
                    Layout::transposed(plane_out),
                    T::one(),
                    &mut dw[w_range.clone()],
                    ksize,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxg = &mut dx[x_off..x_off + geo.cin_g * plane_in];
                if dense_cols {
                    gemm(
                        ksize,
                        geo.cout_g,
                        plane_out,
                        wg,
                        Layout::transposed(ksize),
                        gg,
                        Layout::row_major(plane_out),
                        T::zero(),
                        &mut dcols,
                        plane_out,
                    );
                    geo.col2im(&dcols, dxg);
                } else {
                    gemm(
                        ksize,
                        geo.cout_g,
                        plane_out,
                        wg,
                        Layout::transposed(ksize),
                        gg,
                        Layout::row_major(plane_out),
                        T::one(),
                        dxg,
                        plane_out,
                    );
                }
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw: dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    }
}

pub(crate) fn bias_backward<T: Element>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (cout, plane) = (s[1], s[2] * s[3]);
    let mut out = vec![T::zero(); cout];
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        let acc: T = chunk.iter().copied().sum();
        out[i % cout] = out[i % cout] + acc;
    }
    Tensor::from_parts(vec![cout], out)
}

/// Output spatial size of a convolution without building it.
pub fn conv2d_output_hw(
    input_hw: (usize, usize),
    kernel: (usize, usize),
    spec: &Conv2dSpec,
) -> Option<(usize, usize)> {
    Some((
        window_out_len(input_hw.0, kernel.0, spec.stride.0, spec.pad.0)?,
        window_out_len(input_hw.1, kernel.1, spec.stride.1, spec.pad.1)?,
    ))
}

impl<T: Element> Tape<T> {
    /// Grouped cross-correlation of `x: [B,C,H,W]` with `w: [Co,C/g,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geo = geometry(self.shape(x), self.shape(w), &spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geo.cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let value = conv2d_values(self.value(x), self.value(w), bias.map(|b| self.value(b)), &geo);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { x, w, bias, spec }, &inputs))
    }
}
