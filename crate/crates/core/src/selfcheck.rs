//! Built-in correctness checks behind the `check` command.
//!
//! Each check is named after what it exercises (`gradient/conv2d.kernel`,
//! `conv-oracle`, ...), so a failing report points at the broken piece.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{decode, encode, CheckpointMeta};
use crate::fusion::{build_fused, propose_pairing, Side, TapPoint};
use crate::geometry::{conv_output_dim, pool_output_dim, ConvGeometry, FeatureShape, PoolGeometry};
use crate::gradcheck::{finite_diff_check, relative_error};
use crate::model::Model;
use crate::nn::{all_trainable, zoo, Mode, NetworkGraph};
use crate::reference;
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorError};

/// Tolerance for ops that are smooth everywhere.
pub const SMOOTH_TOLERANCE: f64 = 1e-5;
/// Tolerance for ops with kinks (ReLU, max pooling) and whole graphs.
pub const KINKED_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
/// Smaller step through deep graphs keeps kink crossings rare.
const GRAPH_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckLevel {
    /// Seconds: laws, oracles, per-primitive gradients, isolation, round trip.
    Quick,
    /// Adds the whole-graph custom16 gradient check and more oracle cases.
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub level: CheckLevel,
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

type Outcome = Result<String, String>;

fn timed(name: &str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult { name: name.to_string(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn run_checks(level: CheckLevel) -> CheckReport {
    let full = level == CheckLevel::Full;
    let mut results = vec![
        timed("dimension-laws", || dimension_laws(500, 1)),
        timed("conv-oracle", || conv_oracle(if full { 200 } else { 40 }, 2)),
    ];
    for (name, check) in primitive_gradient_checks() {
        results.push(timed(&format!("gradient/{name}"), || {
            check().map_err(|e| e.to_string()).and_then(|(err, tol)| {
                let msg = format!("max relative error {err:.2e} (tolerance {tol:.0e})");
                if err <= tol {
                    Ok(msg)
                } else {
                    Err(msg)
                }
            })
        }));
    }
    if full {
        results.push(timed("gradient/custom16", || custom16_gradients(8)));
    }
    results.push(timed("isolation", fusion_isolation));
    results.push(timed("checkpoint-round-trip", checkpoint_round_trip));
    CheckReport { level, results }
}

/// Output sizes from the closed forms against window enumeration.
pub fn dimension_laws(cases: usize, seed: u64) -> Outcome {
    let mut rng = SeededRng::derive(seed, "dimension-laws");
    for _ in 0..cases {
        let n = 1 + rng.below(64);
        let f = 1 + rng.below(7);
        let p = rng.below(4);
        let s = 1 + rng.below(4);
        let enumerated = reference::count_placements(n, f, p, s);
        match conv_output_dim(n, f, p, s) {
            Ok(d) if d == enumerated => {}
            Err(_) if enumerated == 0 => {}
            other => return Err(format!("conv n={n} F={f} P={p} S={s}: law {other:?}, enumeration {enumerated}")),
        }
        let enumerated = reference::count_placements(n, f, 0, s);
        match pool_output_dim(n, f, s) {
            Ok(d) if d == enumerated => {}
            Err(_) if enumerated == 0 => {}
            other => return Err(format!("pool n={n} F={f} S={s}: law {other:?}, enumeration {enumerated}")),
        }
    }
    Ok(format!("{cases} geometries"))
}

fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).expect("non-empty shape")
}

/// Tape convolution (im2col + GEMM, f32) against direct convolution.
pub fn conv_oracle(cases: usize, seed: u64) -> Outcome {
    let mut rng = SeededRng::derive(seed, "conv-oracle");
    let mut worst = 0.0f64;
    for case in 0..cases {
        let g = ConvGeometry::new(1 + rng.below(5), rng.below(3), 1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(5))
            .map_err(|e| e.to_string())?;
        let h = g.kernel_size + rng.below(9);
        let w = g.kernel_size + rng.below(9);
        let batch = 1 + rng.below(3);
        let x = random_tensor(&[batch, h, w, g.in_channels], &mut rng).cast::<f32>();
        let k = random_tensor(&g.kernel_shape(), &mut rng).cast::<f32>();
        let b = random_tensor(&[g.out_channels], &mut rng).cast::<f32>();
        let expected = reference::conv2d(&x, &k, &b, &g).map_err(|e| e.to_string())?;
        let mut tape = Tape::<f32>::inference();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let out = tape.conv2d(xv, kv, bv, g).map_err(|e| e.to_string())?;
        let got = tape.value(out).map_err(|e| e.to_string())?;
        if got.shape() != expected.shape() {
            return Err(format!("case {case}: shape {:?} vs {:?}", got.shape(), expected.shape()));
        }
        let diff = got.max_abs_diff(&expected);
        worst = worst.max(diff);
        if diff > 1e-5 {
            return Err(format!("case {case} ({g:?}, input {h}×{w}): max abs diff {diff:.2e}"));
        }
    }
    Ok(format!("{cases} cases, max abs diff {worst:.2e}"))
}

/// Values spaced at least `gap` apart in random order: no pooling ties and
/// no ReLU input within `gap/2` of zero.
fn spaced_tensor(shape: &[usize], gap: f64, rng: &mut SeededRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    rng.shuffle(&mut values);
    Tensor::new(shape.to_vec(), values).expect("non-empty shape")
}

/// `Σ op(x) ⊙ r` for a fixed random `r`, so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(y)?.shape().to_vec();
    let r = random_tensor(&shape, &mut SeededRng::derive(seed, "readout"));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type GradCheckFn = Box<dyn Fn() -> Result<(f64, f64), crate::gradcheck::GradCheckError>>;

fn fd_check<F>(point: Tensor<f64>, tol: f64, f: F) -> GradCheckFn
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError> + 'static,
{
    let g = move |t: &mut Tape<f64>, x: Var| {
        let y = f(t, x)?;
        weighted_sum(t, y, 11)
    };
    Box::new(move || Ok((finite_diff_check(&g, &point, FD_STEP)?.max_rel_error, tol)))
}

/// One central-difference check per primitive and differentiable argument.
/// Each returns `(max relative error, tolerance)`.
pub fn primitive_gradient_checks() -> Vec<(&'static str, GradCheckFn)> {
    let mut rng = SeededRng::derive(7, "primitive-gradients");
    let geom = ConvGeometry { kernel_size: 3, padding: 1, stride: 2, in_channels: 2, out_channels: 3 };
    let conv = [
        random_tensor(&[2, 5, 5, 2], &mut rng),
        random_tensor(&geom.kernel_shape(), &mut rng),
        random_tensor(&[3], &mut rng),
    ];
    let dense = [random_tensor(&[3, 4], &mut rng), random_tensor(&[4, 5], &mut rng), random_tensor(&[5], &mut rng)];
    let bn = [random_tensor(&[4, 2, 2, 3], &mut rng), random_tensor(&[3], &mut rng), random_tensor(&[3], &mut rng)];
    let spaced = spaced_tensor(&[2, 4, 4, 2], 0.05, &mut rng);
    let other = random_tensor(&[2, 4, 4, 2], &mut rng);

    let mut checks: Vec<(&'static str, GradCheckFn)> = Vec::new();
    // The three-argument ops are checked once per argument: the probed one
    // is the leaf, the other two are constants.
    for (slot, name) in ["conv2d.input", "conv2d.kernel", "conv2d.bias"].into_iter().enumerate() {
        let args = conv.clone();
        checks.push((
            name,
            fd_check(conv[slot].clone(), SMOOTH_TOLERANCE, move |t, v| {
                let [x, k, b] = with_leaf(t, &args, slot, v);
                t.conv2d(x, k, b, geom)
            }),
        ));
    }
    for (slot, name) in ["dense.input", "dense.weight", "dense.bias"].into_iter().enumerate() {
        let args = dense.clone();
        checks.push((
            name,
            fd_check(dense[slot].clone(), SMOOTH_TOLERANCE, move |t, v| {
                let [x, w, b] = with_leaf(t, &args, slot, v);
                t.dense(x, w, b)
            }),
        ));
    }
    for (slot, name) in
        ["batchnorm.train.input", "batchnorm.train.gamma", "batchnorm.train.beta"].into_iter().enumerate()
    {
        let args = bn.clone();
        checks.push((
            name,
            fd_check(bn[slot].clone(), SMOOTH_TOLERANCE, move |t, v| {
                let [x, g, b] = with_leaf(t, &args, slot, v);
                Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
            }),
        ));
    }
    let args = bn.clone();
    checks.push((
        "batchnorm.eval.input",
        fd_check(bn[0].clone(), SMOOTH_TOLERANCE, move |t, v| {
            let [x, g, b] = with_leaf(t, &args, 0, v);
            t.batchnorm_eval(x, g, b, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
        }),
    ));
    checks.push(("relu", fd_check(spaced.clone(), KINKED_TOLERANCE, |t, x| t.relu(x))));
    checks.push((
        "maxpool2d",
        fd_check(spaced.clone(), KINKED_TOLERANCE, |t, x| t.maxpool2d(x, PoolGeometry { window: 2, stride: 2 })),
    ));
    checks.push((
        "maxpool2d.overlapping",
        fd_check(spaced.clone(), KINKED_TOLERANCE, |t, x| t.maxpool2d(x, PoolGeometry { window: 3, stride: 1 })),
    ));
    let o = other.clone();
    checks.push((
        "add",
        fd_check(spaced.clone(), SMOOTH_TOLERANCE, move |t, x| {
            let c = t.constant(o.clone());
            t.add(x, c)
        }),
    ));
    let o = other.clone();
    checks.push((
        "mul",
        fd_check(spaced.clone(), SMOOTH_TOLERANCE, move |t, x| {
            let c = t.constant(o.clone());
            t.mul(x, c)
        }),
    ));
    checks.push(("scale", fd_check(spaced.clone(), SMOOTH_TOLERANCE, |t, x| t.scale(x, -1.7))));
    checks.push(("flatten", fd_check(spaced, SMOOTH_TOLERANCE, |t, x| t.flatten(x))));
    let o = random_tensor(&[3, 6], &mut rng);
    checks.push((
        "concat",
        fd_check(dense[0].clone(), SMOOTH_TOLERANCE, move |t, x| {
            let c = t.constant(o.clone());
            t.concat(x, c)
        }),
    ));
    checks.push((
        "softmax_cross_entropy",
        fd_check(dense[1].clone(), SMOOTH_TOLERANCE, |t, x| t.softmax_cross_entropy(x, &[2, 0, 4, 1])),
    ));
    checks
}

/// Records `args` as constants except `args[slot]`, which is the probe `v`.
fn with_leaf(t: &mut Tape<f64>, args: &[Tensor<f64>; 3], slot: usize, v: Var) -> [Var; 3] {
    std::array::from_fn(|i| if i == slot { v } else { t.constant(args[i].clone()) })
}

fn custom16_loss(
    net: &NetworkGraph<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    leaf: bool,
) -> Result<(Tape<f64>, Var, Var), String> {
    let mut tape = Tape::new();
    let input = if leaf { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
    let out =
        net.forward_on_tape(&mut tape, input, Mode::Train, false, "", &all_trainable).map_err(|e| e.to_string())?;
    let loss = tape.softmax_cross_entropy(out.output, labels).map_err(|e| e.to_string())?;
    Ok((tape, input, loss))
}

/// Central differences through the whole custom16 graph in f64 (train-mode
/// batchnorm, residual adds, pooling) on sampled input coordinates and
/// parameter entries. Probes whose ±step evaluations land in a different
/// ReLU/pooling branch pattern sit on a kink and are resampled.
pub fn custom16_gradients(samples_per_tensor: usize) -> Outcome {
    let shape = FeatureShape::new(32, 32, 1);
    let arch = zoo::custom16(shape, 3).map_err(|e| e.to_string())?;
    let mut net = NetworkGraph::<f64>::build(arch).map_err(|e| e.to_string())?;
    net.init_weights(5);
    let mut rng = SeededRng::derive(5, "custom16-gradients");
    let x = random_tensor(&shape.with_batch(2), &mut rng);
    let labels = [0usize, 2];

    let (tape, input, loss) = custom16_loss(&net, &x, &labels, true)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let loss_at = |net: &NetworkGraph<f64>, x: &Tensor<f64>| -> Result<(f64, u64), String> {
        let (tape, _, loss) = custom16_loss(net, x, &labels, true)?;
        Ok((tape.value(loss).map_err(|e| e.to_string())?.data()[0], tape.branch_signature()))
    };

    let mut targets: Vec<Option<String>> = vec![None];
    for name in [
        "g1.b1.conv.weight",
        "g2.b3.bn.gamma",
        "g3.b4.conv.weight",
        "g4.b2.bn.beta",
        "head.fc0.weight",
        "head.logits.bias",
    ] {
        net.param(name).ok_or_else(|| format!("custom16 has no parameter {name}"))?;
        targets.push(Some(name.to_string()));
    }
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for target in &targets {
        let analytic = match target {
            None => grads.wrt(input).cloned().ok_or("no input gradient")?,
            Some(name) => grads.param(name).cloned().ok_or_else(|| format!("no gradient for {name}"))?,
        };
        let len = analytic.len();
        let mut got = 0;
        let mut attempts = 0;
        while got < samples_per_tensor && attempts < 20 * samples_per_tensor {
            attempts += 1;
            let i = rng.below(len);
            let probe = |delta: f64| -> Result<(f64, u64), String> {
                match target {
                    None => {
                        let mut xp = x.clone();
                        xp.data_mut()[i] += delta;
                        loss_at(&net, &xp)
                    }
                    Some(name) => {
                        let mut np = net.clone();
                        np.param_mut(name).expect("listed").data_mut()[i] += delta;
                        loss_at(&np, &x)
                    }
                }
            };
            let (plus, sp) = probe(GRAPH_FD_STEP)?;
            let (minus, sm) = probe(-GRAPH_FD_STEP)?;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * GRAPH_FD_STEP);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            worst = worst.max(err);
            got += 1;
            checked += 1;
            if err > KINKED_TOLERANCE {
                let what = target.as_deref().unwrap_or("input");
                return Err(format!("{what}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}, relative error {err:.2e}"));
            }
        }
    }
    Ok(format!("{checked} probes, {skipped} kink crossings resampled, max relative error {worst:.2e}"))
}

fn seeded_batch(batch: usize, shape: FeatureShape, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..batch * shape.numel()).map(|_| rng.uniform() as f32).collect();
    Tensor::new(shape.with_batch(batch).to_vec(), data).expect("non-empty batch")
}

fn pretrained_tiny_pair(shape: FeatureShape) -> Result<(NetworkGraph, NetworkGraph), String> {
    let mut a = NetworkGraph::build(zoo::tiny_a(shape, 10)).map_err(|e| e.to_string())?;
    let mut b = NetworkGraph::build(zoo::tiny_b(shape, 10)).map_err(|e| e.to_string())?;
    a.init_weights(1);
    b.init_weights(2);
    a.forward(&seeded_batch(8, shape, 3), Mode::Train, false).map_err(|e| e.to_string())?;
    b.forward(&seeded_batch(8, shape, 4), Mode::Train, false).map_err(|e| e.to_string())?;
    Ok((a, b))
}

/// Zero adapters leave both backbones' features bit-identical.
pub fn fusion_isolation() -> Outcome {
    let shape = FeatureShape::new(28, 28, 1);
    let (a, b) = pretrained_tiny_pair(shape)?;
    let plan = propose_pairing(&TapPoint::ladder(Side::A, &a), &TapPoint::ladder(Side::B, &b), 4)
        .map_err(|e| e.to_string())?;
    let fused = build_fused(&a, &b, &plan, 10, &[32], 5).map_err(|e| e.to_string())?;
    for i in 0..5 {
        let x = seeded_batch(4, shape, 100 + i);
        let (fa, fb) = fused.eval_features(&x).map_err(|e| e.to_string())?;
        let sa = a.eval_features(&x).map_err(|e| e.to_string())?;
        let sb = b.eval_features(&x).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&fa) != bits(&sa) || bits(&fb) != bits(&sb) {
            return Err(format!("batch {i}: fused features differ from standalone features"));
        }
    }
    Ok(format!("{} links, 5 batches bit-identical", plan.links.len()))
}

pub fn checkpoint_round_trip() -> Outcome {
    let shape = FeatureShape::new(28, 28, 1);
    let (a, _) = pretrained_tiny_pair(shape)?;
    let model = Model::Single(a);
    let ck = decode(&encode(&model, &CheckpointMeta::default())).map_err(|e| e.to_string())?;
    let x = seeded_batch(4, shape, 9);
    let before = model.eval_logits(&x).map_err(|e| e.to_string())?;
    let after = ck.model.eval_logits(&x).map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&before) != bits(&after) || model.param_hash() != ck.model.param_hash() {
        return Err("restored model differs".into());
    }
    Ok("bit-identical logits".into())
}
