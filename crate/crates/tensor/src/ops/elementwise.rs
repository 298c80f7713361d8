use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn mul_values<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sums `g` over its leading axes down to the trailing `suffix` shape.
pub(crate) fn reduce_to_suffix<T: Element>(g: &Tensor<T>, suffix: &[usize]) -> Tensor<T> {
    let inner: usize = suffix.iter().product();
    let mut out = vec![T::zero(); inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::from_parts(suffix.to_vec(), out)
}

fn same_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn zip_values<T: Element>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let (va, vb) = (tape.value(a), tape.value(b));
    let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(va.shape().to_vec(), data)
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let value = zip_values(self, a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let value = zip_values(self, a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let value = zip_values(self, a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s, broadcast
    /// over the leading axes.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let vb = self.value(b).data();
        let inner = vb.len();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(vb) {
                *x = *x + y;
            }
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::AddBias(a, b), &[a, b]))
    }
}
