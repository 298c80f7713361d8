use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn c<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Standard normal CDF through erf.
fn phi_cdf<T: Element>(x: T) -> T {
    c::<T>(0.5) * (T::one() + (x * c::<T>(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn phi_pdf<T: Element>(x: T) -> T {
    c::<T>(0.398_942_280_401_432_7) * (-(x * x) * c::<T>(0.5)).exp()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    x * phi_cdf(x)
}

pub(crate) fn gelu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &g)| g * (phi_cdf(x) + x * phi_pdf(x)))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_values<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, size, inner) = lanes(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |s: usize| (o * size + s) * inner + i;
            let mut max = src[at(0)];
            for s in 1..size {
                max = max.max(src[at(s)]);
            }
            let mut total = T::zero();
            for s in 0..size {
                let e = (src[at(s)] - max).exp();
                out[at(s)] = e;
                total = total + e;
            }
            for s in 0..size {
                out[at(s)] = out[at(s)] / total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, size, inner) = lanes(y.shape(), axis);
    let (yv, gv) = (y.data(), g.data());
    let mut out = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |s: usize| (o * size + s) * inner + i;
            let mut dot = T::zero();
            for s in 0..size {
                dot = dot + yv[at(s)] * gv[at(s)];
            }
            for s in 0..size {
                out[at(s)] = yv[at(s)] * (gv[at(s)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

impl<T: Element> Tape<T> {
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Softmax along `axis`, shifted by the lane maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(a).len() {
            return Err(invalid("softmax", format!("axis {axis} out of range")));
        }
        let value = softmax_values(self.value(a), axis);
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }
}
