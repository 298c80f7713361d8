//! Central finite differences, used as the oracle for analytic gradients.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step for float64 checks.
pub const FD_STEP: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in analytic.data().iter().zip(numeric.data()) {
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let denom = na.sqrt() + nb.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Checks every input of a graph against finite differences.
///
/// The graph output is reduced to a scalar through a fixed pseudo-random
/// projection so that gradients with structural zeros under a plain sum
/// (softmax, normalisations) are still exercised. Returns one relative error
/// per input.
pub fn check_graph<F>(inputs: &[Tensor<f64>], build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let mut rng = StdRng::seed_from_u64(0x9e37_79b9);
        Tensor::<f64>::uniform(tape.shape(out).to_vec(), -1.0, 1.0, &mut rng)
    };
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let p = tape.constant(projection.clone());
        let weighted = tape.mul(out, p)?;
        let loss = tape.sum_all(weighted);
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let p = tape.constant(projection.clone());
    let weighted = tape.mul(out, p)?;
    let loss = tape.sum_all(weighted);
    tape.backward(loss)?;

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut failure = None;
        let numeric = finite_diff_grad(
            |probe| {
                let mut values = inputs.to_vec();
                values[i] = probe.clone();
                eval(&values).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            input,
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_self_test() {
        let x = Tensor::from_f64([4], &[0.3, -1.2, 2.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, FD_STEP);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-7);
        }
    }

    #[test]
    fn relative_error_is_scale_free() {
        let a = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
        assert_eq!(relative_error(&a, &a), 0.0);
        let z = Tensor::zeros(vec![2]);
        assert_eq!(relative_error(&z, &z), 0.0);
        assert!((relative_error(&a, &z) - 1.0).abs() < 1e-15);
    }
}
