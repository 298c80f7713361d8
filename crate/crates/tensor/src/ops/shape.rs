use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute_values<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_perm(perm, x.rank())?;
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // stride in the input for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&src[offset..offset + inner]);
        } else {
            out.extend((0..inner).map(|j| src[offset + j * inner_stride]));
        }
        // advance all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn permute_backward<T: Element>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    permute_values(g, &inverse).expect("inverse of a valid permutation")
}

/// `[outer, axis, inner]` factorisation of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn slice_values<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Tensor<T> {
    let (outer, size, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

pub(crate) fn slice_backward<T: Element>(
    g: &Tensor<T>,
    input_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let (outer, size, inner) = split_axis(input_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); numel(input_shape)];
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = permute_values(self.value(a), perm)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(invalid("transpose", format!("axes ({d0},{d1}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let value = slice_values(self.value(a), axis, start, len);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(invalid(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transpose_2d() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = permute_values(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64([2, 1, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::from_f64([2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 3]);
        let parts = tape.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
    }

    #[test]
    fn rejects_bad_permutation() {
        let x = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(permute_values(&x, &[0, 0]).is_err());
        assert!(permute_values(&x, &[0]).is_err());
    }

    fn shape_and_perm() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
            let rank = shape.len();
            (Just(shape), Just((0..rank).collect::<Vec<_>>()).prop_shuffle())
        })
    }

    proptest! {
        #[test]
        fn permute_round_trip_is_bit_exact((shape, perm) in shape_and_perm(), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 * 0.37 - 11.0).collect();
            let x = Tensor::new(shape.clone(), data).unwrap();
            let y = permute_values(&x, &perm).unwrap();
            let back = permute_backward(&y, &perm);
            prop_assert_eq!(back.data(), x.data());
            prop_assert_eq!(back.shape(), x.shape());
            let r = x.reshape(vec![n]).unwrap().reshape(shape).unwrap();
            prop_assert_eq!(r, x);
        }
    }
}
