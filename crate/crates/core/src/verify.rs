//! Runtime verification suites behind `ecvit gradcheck` and `ecvit selftest`.

use ecvit_tensor::gradcheck::{check_graph, finite_diff_grad, relative_error, FD_STEP};
use ecvit_tensor::{BnBuffers, BnMode, Conv2dSpec, Tape, Tensor, Var, LN_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::cost::count_costs;
use crate::encoder::{global_msa, iffn, pmsa, EncoderParams};
use crate::error::Result;
use crate::params::{Ctx, Mode, ParamStore};
use crate::pyramid::build_model;
use crate::tokenizer::TokenSequence;

/// Relative-error bound for float64 gradient checks.
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Observed discrepancy; its meaning depends on the check.
    pub error: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tol
    }
}

fn primitive(
    out: &mut Vec<Check>,
    name: &str,
    shapes: &[&[usize]],
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> ecvit_tensor::Result<Var>,
) -> Result<()> {
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::uniform(s.to_vec(), -2.0, 2.0, rng))
        .collect();
    let errors = check_graph(&inputs, build)?;
    out.push(Check {
        name: format!("grad {name}"),
        error: errors.into_iter().fold(0.0, f64::max),
        tol: GRAD_TOL,
    });
    Ok(())
}

/// Every differentiable primitive against central differences.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut c = Vec::new();
    primitive(&mut c, "add", &[&[3, 4], &[3, 4]], r, |t, v| t.add(v[0], v[1]))?;
    primitive(&mut c, "sub", &[&[3, 4], &[3, 4]], r, |t, v| t.sub(v[0], v[1]))?;
    primitive(&mut c, "mul", &[&[3, 4], &[3, 4]], r, |t, v| t.mul(v[0], v[1]))?;
    primitive(&mut c, "scale", &[&[5]], r, |t, v| Ok(t.scale(v[0], 0.7)))?;
    primitive(&mut c, "matmul", &[&[2, 3, 4], &[4, 5]], r, |t, v| t.matmul(v[0], v[1]))?;
    primitive(&mut c, "linear", &[&[2, 3, 4], &[4, 5], &[5]], r, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    })?;
    primitive(&mut c, "permute", &[&[2, 3, 4]], r, |t, v| t.permute(v[0], &[2, 0, 1]))?;
    primitive(&mut c, "concat", &[&[2, 1, 3], &[2, 2, 3]], r, |t, v| t.concat(&[v[0], v[1]], 1))?;
    primitive(&mut c, "slice", &[&[2, 5, 3]], r, |t, v| t.slice(v[0], 1, 1, 3))?;
    primitive(&mut c, "mean_axis", &[&[2, 5, 3]], r, |t, v| t.mean_axis(v[0], 1))?;
    primitive(&mut c, "gelu", &[&[4, 5]], r, |t, v| Ok(t.gelu(v[0])))?;
    primitive(&mut c, "relu", &[&[4, 5]], r, |t, v| Ok(t.relu(v[0])))?;
    primitive(&mut c, "softmax", &[&[3, 6]], r, |t, v| t.softmax(v[0], 1))?;
    primitive(&mut c, "conv2d", &[&[2, 3, 6, 5], &[4, 3, 3, 2]], r, |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::new((2, 1), (1, 1), 1))
    })?;
    primitive(&mut c, "conv2d depthwise", &[&[2, 3, 7, 6], &[3, 1, 7, 1], &[3]], r, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new((2, 1), (3, 0), 3))
    })?;
    primitive(&mut c, "maxpool2d", &[&[2, 2, 6, 6]], r, |t, v| {
        t.maxpool2d(v[0], (3, 3), (2, 2), (1, 1))
    })?;
    primitive(&mut c, "maxpool1d_seq", &[&[2, 8, 3]], r, |t, v| t.maxpool1d_seq(v[0], 4, 4))?;
    primitive(&mut c, "batch_norm train", &[&[3, 2, 3, 3], &[2], &[2]], r, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)
    })?;
    let buffers = BnBuffers {
        mean: Tensor::from_f64([2], &[0.3, -0.2])?,
        var: Tensor::from_f64([2], &[1.5, 0.4])?,
    };
    primitive(&mut c, "batch_norm eval", &[&[3, 2, 3, 3], &[2], &[2]], r, |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Eval(&buffers))?.0)
    })?;
    primitive(&mut c, "layer_norm", &[&[3, 4, 6], &[6], &[6]], r, |t, v| {
        t.layer_norm(v[0], v[1], v[2], LN_EPS)
    })?;
    primitive(&mut c, "cross_entropy", &[&[4, 5]], r, |t, v| t.cross_entropy(v[0], &[0, 3, 4, 3]))?;
    Ok(c)
}

/// Loss gradient of the whole model with respect to every parameter tensor,
/// in float64, with train-mode batch norm.
pub fn model_gradchecks(cfg: &ModelConfig, seed: u64) -> Result<Vec<Check>> {
    let mut model = build_model::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // spread parameters out so every gradient is well above rounding noise
    for p in model.store.params_mut() {
        let noise = Tensor::<f64>::uniform(p.value.shape().to_vec(), -0.5, 0.5, &mut rng);
        p.value.add_assign(&noise);
    }
    let [h, w] = cfg.input_hw;
    let batch = 3;
    let images = Tensor::<f64>::uniform(vec![batch, cfg.in_channels, h, w], -2.0, 2.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let analytic = model.loss_and_grads(&images, &labels, Mode::Train)?.grads;

    let mut checks = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let name = model.store.params()[i].name.clone();
        let start = model.store.params()[i].value.clone();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |probe| {
                model.store.params_mut()[i].value = probe.clone();
                model
                    .loss(&images, &labels, Mode::Train)
                    .unwrap_or_else(|e| {
                        failure = Some(e);
                        f64::NAN
                    })
            },
            &start,
            FD_STEP,
        );
        model.store.params_mut()[i].value = start;
        if let Some(e) = failure {
            return Err(e);
        }
        checks.push(Check {
            name: format!("grad model {name}"),
            error: relative_error(grad, &numeric),
            tol: GRAD_TOL,
        });
    }
    Ok(checks)
}

/// The full gradient suite: primitives, the micro model, and a deeper micro
/// variant. The last layer's feed-forward never reaches the class token, so
/// its gradients are identically zero; the variant (16x16 input, a second
/// stage-3 layer) checks them through a live path on a 2x2 grid.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<Check>> {
    let mut c = primitive_gradchecks(seed)?;
    c.extend(model_gradchecks(&ModelConfig::micro(), seed)?);
    let deeper = ModelConfig {
        input_hw: [16, 16],
        depths: [1, 2],
        ..ModelConfig::micro()
    };
    for mut check in model_gradchecks(&deeper, seed)? {
        check.name = check.name.replacen("grad model", "grad model depth 1+2", 1);
        c.push(check);
    }
    Ok(c)
}

/// Dense per-block attention written with plain loops; `x` is `[B, N+1, D]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    x: &[f64],
    (batch, n, d): (usize, usize, usize),
    wqkv: &[f64],
    wo: &[f64],
    bo: &[f64],
    heads: usize,
    m: usize,
) -> Vec<f64> {
    let t = n + 1;
    let hd = d / heads;
    let nb = n / m;
    let mut out = vec![0.0; batch * t * d];
    for b in 0..batch {
        let row = |i: usize| &x[(b * t + i) * d..(b * t + i + 1) * d];
        let proj = |i: usize, col: usize| (0..d).map(|k| row(i)[k] * wqkv[k * 3 * d + col]).sum::<f64>();
        let mut mixed = vec![0.0; t * d];
        for blk in 0..nb {
            let members: Vec<usize> = std::iter::once(0).chain(1 + blk * m..1 + (blk + 1) * m).collect();
            for h in 0..heads {
                for &qi in &members {
                    let scores: Vec<f64> = members
                        .iter()
                        .map(|&ki| {
                            (0..hd)
                                .map(|j| proj(qi, h * hd + j) * proj(ki, d + h * hd + j))
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..hd {
                        let v: f64 = members
                            .iter()
                            .zip(&e)
                            .map(|(&ki, &w)| w / z * proj(ki, 2 * d + h * hd + j))
                            .sum();
                        if qi == 0 {
                            mixed[h * hd + j] += v / nb as f64;
                        } else {
                            mixed[qi * d + h * hd + j] = v;
                        }
                    }
                }
            }
        }
        for i in 0..t {
            for o in 0..d {
                out[(b * t + i) * d + o] =
                    bo[o] + (0..d).map(|k| mixed[i * d + k] * wo[k * d + o]).sum::<f64>();
            }
        }
    }
    out
}

fn micro_encoder_case(
    n_grid: (usize, usize),
    dim: usize,
    head_dim: usize,
    m: usize,
    seed: u64,
) -> Result<(ModelConfig, ParamStore<f32>, EncoderParams, Tensor<f32>)> {
    let cfg = ModelConfig {
        input_hw: [4 * n_grid.0, 4 * n_grid.1],
        stage_dims: [dim, dim],
        head_dim,
        partition_size: m,
        use_merging: false,
        ..ModelConfig::micro()
    };
    let mut model = build_model::<f32>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store.params_mut() {
        p.value = Tensor::uniform(p.value.shape().to_vec(), -0.5, 0.5, &mut rng);
    }
    let n = n_grid.0 * n_grid.1;
    let x = Tensor::uniform(vec![2, n + 1, dim], -1.0, 1.0, &mut rng);
    let enc = model.arch.stage2[0];
    Ok((cfg, model.store, enc, x))
}

fn run<T>(store: &ParamStore<f32>, x: &Tensor<f32>, f: impl FnOnce(&mut Ctx<'_, f32>, Var) -> Result<T>) -> Result<T> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let v = ctx.tape.constant(x.clone());
    f(&mut ctx, v)
}

fn run_value(
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    f: impl FnOnce(&mut Ctx<'_, f32>, Var) -> Result<Var>,
) -> Result<Tensor<f32>> {
    run(store, x, |ctx, v| {
        let y = f(ctx, v)?;
        Ok(ctx.tape.value(y).clone())
    })
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Oracle-equivalence and invariant checks on small random cases.
pub fn selftest_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut push = |name: &str, error: f64, tol: f64| {
        checks.push(Check {
            name: name.to_string(),
            error,
            tol,
        })
    };

    // partitioned attention against the loop oracle
    for (grid, dim, hdim, m) in [((2, 2), 4, 4, 2), ((4, 4), 8, 4, 4), ((2, 4), 8, 2, 8)] {
        let (_, store, enc, x) = micro_encoder_case(grid, dim, hdim, m, seed)?;
        let y = run_value(&store, &x, |ctx, v| pmsa(ctx, v, &enc))?;
        let get = |id| store.get(id).to_f64_vec();
        let n = grid.0 * grid.1;
        let oracle = attention_oracle(
            &x.to_f64_vec(),
            (2, n, dim),
            &get(enc.qkv),
            &get(enc.out_w),
            &get(enc.out_b),
            dim / hdim,
            m.min(n),
        );
        push(&format!("pmsa oracle N={n} M={m} D={dim}"), max_diff(y.data(), &oracle), 1e-6);
    }

    // one block degenerates to global attention, bit for bit
    let (_, store, enc, x) = micro_encoder_case((2, 2), 8, 4, 4, seed)?;
    let (a, b) = run(&store, &x, |ctx, v| {
        let a = pmsa(ctx, v, &enc)?;
        let b = global_msa(ctx, v, &enc)?;
        Ok((ctx.tape.value(a).clone(), ctx.tape.value(b).clone()))
    })?;
    let mismatched = a.data().iter().zip(b.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    push("pmsa with M=N equals global attention bitwise", mismatched as f64, 0.0);

    // the class token passes the feed-forward untouched
    let (_, store, enc, x) = micro_encoder_case((4, 4), 8, 4, 4, seed)?;
    let y = run_value(&store, &x, |ctx, v| {
        let s = TokenSequence {
            tokens: v,
            grid: (4, 4),
            dim: 8,
        };
        iffn(ctx, s, &enc)
    })?;
    let mut changed = 0;
    for b in 0..2 {
        for k in 0..8 {
            let i = b * 17 * 8 + k;
            changed += usize::from(x.data()[i].to_bits() != y.data()[i].to_bits());
        }
    }
    push("iffn keeps the class token bitwise", changed as f64, 0.0);

    // locality: one perturbed patch moves only its block and the class token
    let leak = locality_leak(seed)?;
    push("pmsa locality (max change outside block)", leak, 0.0);

    // closed-form costs agree with the allocated parameters
    for cfg in [ModelConfig::micro(), ModelConfig::default()] {
        let allocated = build_model::<f32>(&cfg, 0)?.store.num_scalars();
        let counted = count_costs(&cfg)?.params_total;
        push(
            &format!("params_total matches allocation ({} params)", allocated),
            counted.abs_diff(allocated) as f64,
            0.0,
        );
    }
    Ok(checks)
}

/// Largest change outside the perturbed block after one partitioned attention.
pub fn locality_leak(seed: u64) -> Result<f64> {
    let (_, store, enc, x) = micro_encoder_case((4, 4), 8, 4, 4, seed)?;
    let mut bumped = x.clone();
    // token 6 is the second patch of block 1
    for k in 0..8 {
        bumped.data_mut()[6 * 8 + k] += 0.5;
    }
    let f = |t: &Tensor<f32>| run_value(&store, t, |ctx, v| pmsa(ctx, v, &enc));
    let (y0, y1) = (f(&x)?, f(&bumped)?);
    let mut leak = 0.0f64;
    let mut moved_block = 0.0f64;
    for t in 0..17 {
        let own = t == 0 || (5..9).contains(&t);
        for k in 0..8 {
            let d = (y0.data()[t * 8 + k] - y1.data()[t * 8 + k]).abs() as f64;
            if own {
                moved_block = moved_block.max(d);
            } else {
                leak = leak.max(d);
            }
        }
    }
    if moved_block == 0.0 {
        // a perturbation that changes nothing proves nothing
        return Ok(f64::INFINITY);
    }
    Ok(leak)
}
