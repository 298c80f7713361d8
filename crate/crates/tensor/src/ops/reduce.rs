use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel, Tensor};

pub(crate) fn mean_axis_backward<T: Element>(
    g: &Tensor<T>,
    input_shape: &[usize],
    axis: usize,
) -> Tensor<T> {
    let outer: usize = input_shape[..axis].iter().product();
    let size = input_shape[axis];
    let inner: usize = input_shape[axis + 1..].iter().product();
    let inv = T::one() / T::from_usize(size).unwrap();
    let mut out = vec![T::zero(); numel(input_shape)];
    for o in 0..outer {
        let gsrc = &g.data()[o * inner..(o + 1) * inner];
        for s in 0..size {
            let dst = &mut out[(o * size + s) * inner..(o * size + s + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(gsrc) {
                *d = v * inv;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

impl<T: Element> Tape<T> {
    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Mean along `axis`; the axis is kept with size 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let size = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for s in 0..size {
                let src = &x[(o * size + s) * inner..(o * size + s + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        let denom = T::from_usize(size).unwrap();
        for v in &mut out {
            *v = *v / denom;
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::MeanAxis(a, axis), &[a]))
    }
}
