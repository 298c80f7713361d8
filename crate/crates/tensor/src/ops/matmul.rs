use crate::element::{gemm, Element, Layout};
use crate::error::{Result, TensorError};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Batch bookkeeping for a broadcast matrix product.
struct Plan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    /// (matrix index into a, matrix index into b) per output matrix.
    pairs: Vec<(usize, usize)>,
    /// `b` is a single matrix shared by every batch entry of a contiguous `a`.
    flat: bool,
}

fn broadcast_index(out_idx: &[usize], dims: &[usize]) -> usize {
    // dims is right-aligned against out_idx
    let offset = out_idx.len() - dims.len();
    let mut flat = 0;
    for (i, &d) in dims.iter().enumerate() {
        let coord = if d == 1 { 0 } else { out_idx[offset + i] };
        flat = flat * d + coord;
    }
    flat
}

fn plan(sa: &[usize], sb: &[usize]) -> Result<Plan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let rank = ba.len().max(bb.len());
    let mut batch = vec![1; rank];
    for i in 0..rank {
        let da = if i + ba.len() >= rank { ba[i + ba.len() - rank] } else { 1 };
        let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
        batch[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch()),
        };
    }
    let count = numel(&batch);
    let mut pairs = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        pairs.push((broadcast_index(&idx, ba), broadcast_index(&idx, bb)));
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < batch[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    let flat = numel(bb) == 1 && numel(ba) == count;
    Ok(Plan {
        m,
        k,
        n,
        batch,
        pairs,
        flat,
    })
}

pub(crate) fn matmul_values<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut shape = p.batch.clone();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); numel(&shape)];
    if p.flat {
        let rows = p.pairs.len() * m;
        gemm(
            rows,
            k,
            n,
            a.data(),
            Layout::row_major(k),
            b.data(),
            Layout::row_major(n),
            T::zero(),
            &mut out,
            n,
        );
    } else {
        for (i, &(ia, ib)) in p.pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                Layout::row_major(k),
                &b.data()[ib * k * n..(ib + 1) * k * n],
                Layout::row_major(n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients `g·bᵀ` and `aᵀ·g`, summed over broadcast batch entries.
pub(crate) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let p = plan(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut da = want_a.then(|| vec![T::zero(); a.len()]);
    let mut db = want_b.then(|| vec![T::zero(); b.len()]);
    if p.flat {
        let rows = p.pairs.len() * m;
        if let Some(da) = da.as_mut() {
            gemm(
                rows,
                n,
                k,
                g.data(),
                Layout::row_major(n),
                b.data(),
                Layout::transposed(n),
                T::zero(),
                da,
                k,
            );
        }
        if let Some(db) = db.as_mut() {
            gemm(
                k,
                rows,
                n,
                a.data(),
                Layout::transposed(k),
                g.data(),
                Layout::row_major(n),
                T::zero(),
                db,
                n,
            );
        }
    } else {
        for (i, &(ia, ib)) in p.pairs.iter().enumerate() {
            let gi = &g.data()[i * m * n..(i + 1) * m * n];
            if let Some(da) = da.as_mut() {
                gemm(
                    m,
                    n,
                    k,
                    gi,
                    Layout::row_major(n),
                    &b.data()[ib * k * n..(ib + 1) * k * n],
                    Layout::transposed(n),
                    T::one(),
                    &mut da[ia * m * k..(ia + 1) * m * k],
                    k,
                );
            }
            if let Some(db) = db.as_mut() {
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[ia * m * k..(ia + 1) * m * k],
                    Layout::transposed(k),
                    gi,
                    Layout::row_major(n),
                    T::one(),
                    &mut db[ib * k * n..(ib + 1) * k * n],
                    n,
                );
            }
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

impl<T: Element> Tape<T> {
    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_values(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + bias` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}
