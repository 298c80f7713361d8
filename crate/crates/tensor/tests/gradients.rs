//! Analytic gradients of every differentiable primitive against central
//! finite differences in float64, on random inputs in [-2, 2].

use ecvit_tensor::gradcheck::check_graph;
use ecvit_tensor::{BnBuffers, BnMode, Conv2dSpec, Tape, Tensor, Var, LN_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -2.0, 2.0, rng)
}

fn assert_passes(name: &str, errors: &[f64]) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

fn check(
    name: &str,
    shapes: &[&[usize]],
    seeds: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> ecvit_tensor::Result<Var>,
) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let inputs: Vec<_> = shapes.iter().map(|s| rand(s, &mut rng)).collect();
        let errors = check_graph(&inputs, &build).unwrap();
        assert_passes(name, &errors);
    }
}

#[test]
fn elementwise_and_bias() {
    check("add", &[&[3, 4], &[3, 4]], 3, |t, v| t.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], 3, |t, v| t.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], 3, |t, v| t.mul(v[0], v[1]));
    check("scale", &[&[5]], 3, |t, v| Ok(t.scale(v[0], -1.7)));
    check("add_bias", &[&[2, 3, 4], &[4]], 3, |t, v| t.add_bias(v[0], v[1]));
}

#[test]
fn matmul_variants() {
    check("matmul", &[&[3, 4], &[4, 2]], 3, |t, v| t.matmul(v[0], v[1]));
    check("matmul shared rhs", &[&[2, 3, 4], &[4, 5]], 3, |t, v| t.matmul(v[0], v[1]));
    check("matmul batched", &[&[2, 3, 4], &[2, 4, 5]], 3, |t, v| t.matmul(v[0], v[1]));
    check("matmul broadcast", &[&[2, 1, 3, 4], &[3, 4, 2]], 2, |t, v| t.matmul(v[0], v[1]));
    // large enough to take the blocked kernel path
    check("matmul large", &[&[20, 24], &[24, 18]], 1, |t, v| t.matmul(v[0], v[1]));
    check("linear", &[&[2, 3, 4], &[4, 5], &[5]], 2, |t, v| t.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn shape_ops() {
    check("reshape", &[&[2, 6]], 2, |t, v| t.reshape(v[0], &[3, 4]));
    check("permute", &[&[2, 3, 4]], 2, |t, v| t.permute(v[0], &[2, 0, 1]));
    check("concat", &[&[2, 1, 3], &[2, 2, 3]], 2, |t, v| t.concat(&[v[0], v[1]], 1));
    check("slice", &[&[2, 5, 3]], 2, |t, v| t.slice(v[0], 1, 1, 3));
    check("mean_axis", &[&[2, 5, 3]], 2, |t, v| t.mean_axis(v[0], 1));
    check("sum_all", &[&[2, 3]], 2, |t, v| Ok(t.sum_all(v[0])));
}

#[test]
fn activations() {
    check("gelu", &[&[4, 5]], 3, |t, v| Ok(t.gelu(v[0])));
    check("relu", &[&[4, 5]], 3, |t, v| Ok(t.relu(v[0])));
    check("softmax last", &[&[3, 6]], 3, |t, v| t.softmax(v[0], 1));
    check("softmax first", &[&[3, 6]], 3, |t, v| t.softmax(v[0], 0));
}

#[test]
fn convolutions() {
    check("conv dense", &[&[2, 3, 6, 5], &[4, 3, 3, 2]], 2, |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::new((2, 1), (1, 1), 1))
    });
    check("conv grouped", &[&[1, 4, 5, 5], &[6, 2, 3, 3], &[6]], 2, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new((1, 1), (1, 1), 2))
    });
    check("conv depthwise", &[&[2, 3, 7, 6], &[3, 1, 7, 1]], 2, |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::new((2, 1), (3, 0), 3))
    });
    check("conv pointwise", &[&[2, 3, 4, 4], &[5, 3, 1, 1]], 2, |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::default())
    });
}

#[test]
fn pooling() {
    check("maxpool2d", &[&[2, 2, 6, 6]], 3, |t, v| t.maxpool2d(v[0], (3, 3), (2, 2), (1, 1)));
    check("maxpool1d_seq", &[&[2, 8, 3]], 3, |t, v| t.maxpool1d_seq(v[0], 4, 4));
}

#[test]
fn normalisations() {
    check("batch_norm train", &[&[3, 2, 3, 3], &[2], &[2]], 3, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)
    });
    let buffers = BnBuffers {
        mean: Tensor::from_f64([2], &[0.3, -0.2]).unwrap(),
        var: Tensor::from_f64([2], &[1.5, 0.4]).unwrap(),
    };
    check("batch_norm eval", &[&[3, 2, 3, 3], &[2], &[2]], 2, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&buffers))?.0)
    });
    check("layer_norm", &[&[3, 4, 6], &[6], &[6]], 3, |t, v| {
        t.layer_norm(v[0], v[1], v[2], LN_EPS)
    });
}

#[test]
fn cross_entropy_loss() {
    check("cross_entropy", &[&[4, 5]], 3, |t, v| t.cross_entropy(v[0], &[0, 3, 4, 3]));
}

#[test]
fn fan_out_sums_both_paths() {
    // x feeds a gelu and a matmul; both contributions must arrive.
    check("fan-out", &[&[3, 3], &[3, 3]], 3, |t, v| {
        let a = t.gelu(v[0]);
        let b = t.matmul(v[0], v[1])?;
        let c = t.mul(a, b)?;
        t.add(c, v[0])
    });
}

fn forward_backward(seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut rng));
    let w = tape.param(Tensor::randn(vec![4, 3, 3, 3], 0.2, &mut rng));
    let g = tape.param(Tensor::ones(vec![4]));
    let b = tape.param(Tensor::zeros(vec![4]));
    let y = tape.conv2d(x, w, None, Conv2dSpec::new((1, 1), (1, 1), 1)).unwrap();
    let (y, _) = tape.batch_norm(y, g, b, BnMode::Train).unwrap();
    let y = tape.gelu(y);
    let y = tape.maxpool2d(y, (2, 2), (2, 2), (0, 0)).unwrap();
    let y = tape.reshape(y, &[2, 64]).unwrap();
    let wl = tape.param(Tensor::randn(vec![64, 3], 0.1, &mut rng));
    let logits = tape.matmul(y, wl).unwrap();
    let loss = tape.cross_entropy(logits, &[1, 2]).unwrap();
    tape.backward(loss).unwrap();
    (
        tape.value(logits).data().to_vec(),
        tape.grad(w).unwrap().data().to_vec(),
    )
}

#[test]
fn forward_backward_is_bitwise_reproducible() {
    let a = forward_backward(42);
    let b = forward_backward(42);
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
