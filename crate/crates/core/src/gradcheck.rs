//! Finite-difference gradient oracle and the operator check suites.
//!
//! Each check builds a tiny random instance of an operator, reduces its output
//! to a scalar through a fixed random projection, and compares the reverse-mode
//! gradient of every differentiable input against central differences.
//!
//! Error metric: for each tensor, `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-3·s)`
//! where `s` is the largest magnitude in either gradient. The floor keeps
//! entries that are numerically zero from dominating the ratio. The whole-network
//! check replaces the fixed step by [`stable_central_difference`], since the
//! edge loss has sharp curvature where the prediction is nearly flat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ConvOptions, Graph, Padding, Reduction, Var};
use crate::error::{Error, Result};
use crate::loss::{edge_bce, laplace_edge, total_loss, weighted_bce, LossConfig};
use crate::model::{build_model, pfa_forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// Central differences `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    masked_relative_error(analytic, numeric, &vec![true; analytic.len()])
}

/// [`relative_error`] restricted to elements whose `keep` flag is set.
pub fn masked_relative_error(analytic: &Tensor, numeric: &Tensor, keep: &[bool]) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    assert_eq!(analytic.len(), keep.len());
    let pairs = || {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(p, _)| p)
    };
    let scale = pairs().fold(0.0f64, |m, (a, n)| m.max(a.abs()).max(n.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = 1e-3 * scale;
    pairs()
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    /// Which inputs are differentiated; the rest enter the graph as constants.
    differentiable: Vec<bool>,
    build: Builder,
}

fn evaluate(
    case: &Case,
    inputs: &[Tensor],
    projection: Option<&Tensor>,
) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.differentiable)
        .map(|(t, &d)| {
            if d {
                g.input(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = match projection {
        Some(p) => {
            let pv = g.constant(p.clone());
            let prod = g.mul(out, pv)?;
            g.sum(prod)
        }
        None => out,
    };
    Ok((g, vars, loss))
}

fn run_case(case: &Case, seed: u64) -> Result<f64> {
    let (g0, _, out0) = evaluate(case, &case.inputs, None)?;
    let out_shape = g0.value(out0).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_9a1d);
    let projection = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let (g, vars, loss) = evaluate(case, &case.inputs, Some(&projection))?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &var) in vars.iter().enumerate() {
        if !case.differentiable[i] {
            continue;
        }
        let analytic = grads.get(var).expect("differentiable input").clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut inputs = case.inputs.clone();
                inputs[i] = x.clone();
                let (g, _, l) = evaluate(case, &inputs, Some(&projection)).expect("forward");
                g.value(l).item()
            },
            &case.inputs[i],
            DEFAULT_EPS,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1.5)` so kinked operators are probed away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn conv_case(rng: &mut ChaCha8Rng, x: &[usize], w: &[usize], opts: ConvOptions) -> Case {
    let cout = w[0];
    Case {
        inputs: vec![normal(rng, x), normal(rng, w), normal(rng, &[cout])],
        differentiable: vec![true, true, true],
        build: Box::new(move |g, v| Ok(g.conv2d(v[0], v[1], Some(v[2]), opts)?)),
    }
}

/// Every operator name accepted by [`check_operator`].
pub const OPERATORS: &[&str] = &[
    "conv2d",
    "conv2d_dilation3",
    "conv2d_dilation5",
    "conv2d_dilation7",
    "conv2d_strided_valid",
    "conv2d_separable",
    "relu",
    "sigmoid",
    "tanh",
    "abs",
    "max_pool2d",
    "global_avg_pool",
    "dense",
    "concat_channels",
    "bilinear_upsample",
    "broadcast_mul_channel",
    "broadcast_mul_spatial",
    "add",
    "mul",
    "scale",
    "reduce_sum",
    "reduce_mean",
    "laplace_edge",
    "weighted_bce",
    "weighted_bce_mean",
    "edge_bce",
    "total_loss",
];

fn make_case(op: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let pointwise = |kind: fn(&mut Graph, Var) -> Var, x: Tensor| Case {
        inputs: vec![x],
        differentiable: vec![true],
        build: Box::new(move |g, v| Ok(kind(g, v[0]))),
    };
    let case = match op {
        "conv2d" => conv_case(r, &[1, 2, 8, 8], &[3, 2, 3, 3], ConvOptions::same()),
        "conv2d_dilation3" => conv_case(r, &[1, 2, 12, 12], &[2, 2, 3, 3], ConvOptions::dilated(3)),
        "conv2d_dilation5" => conv_case(r, &[1, 2, 12, 12], &[2, 2, 3, 3], ConvOptions::dilated(5)),
        "conv2d_dilation7" => conv_case(r, &[1, 2, 16, 16], &[2, 2, 3, 3], ConvOptions::dilated(7)),
        "conv2d_strided_valid" => conv_case(
            r,
            &[2, 2, 9, 9],
            &[2, 2, 3, 3],
            ConvOptions {
                stride: 2,
                dilation: 2,
                padding: Padding::Valid,
            },
        ),
        "conv2d_separable" => conv_case(r, &[1, 3, 6, 7], &[2, 3, 1, 5], ConvOptions::same()),
        "relu" => pointwise(Graph::relu, away_from_zero(r, &[2, 3, 4])),
        "abs" => pointwise(Graph::abs, away_from_zero(r, &[2, 3, 4])),
        "sigmoid" => pointwise(Graph::sigmoid, normal(r, &[2, 3, 4])),
        "tanh" => pointwise(Graph::tanh, normal(r, &[2, 3, 4])),
        "max_pool2d" => Case {
            inputs: vec![normal(r, &[2, 2, 4, 6])],
            differentiable: vec![true],
            build: Box::new(|g, v| Ok(g.max_pool2d(v[0])?)),
        },
        "global_avg_pool" => Case {
            inputs: vec![normal(r, &[2, 3, 3, 4])],
            differentiable: vec![true],
            build: Box::new(|g, v| Ok(g.global_avg_pool(v[0])?)),
        },
        "dense" => Case {
            inputs: vec![normal(r, &[2, 5]), normal(r, &[3, 5]), normal(r, &[3])],
            differentiable: vec![true, true, true],
            build: Box::new(|g, v| Ok(g.dense(v[0], v[1], Some(v[2]))?)),
        },
        "concat_channels" => Case {
            inputs: vec![
                normal(r, &[2, 1, 3, 3]),
                normal(r, &[2, 2, 3, 3]),
                normal(r, &[2, 3, 3, 3]),
            ],
            differentiable: vec![true, true, true],
            build: Box::new(|g, v| Ok(g.concat_channels(v)?)),
        },
        "bilinear_upsample" => {
            let factor = [2, 3, 4][(seed % 3) as usize];
            Case {
                inputs: vec![normal(r, &[1, 2, 3, 4])],
                differentiable: vec![true],
                build: Box::new(move |g, v| Ok(g.bilinear_upsample(v[0], factor)?)),
            }
        }
        "broadcast_mul_channel" => Case {
            inputs: vec![normal(r, &[2, 3, 4, 4]), normal(r, &[2, 3])],
            differentiable: vec![true, true],
            build: Box::new(|g, v| Ok(g.broadcast_mul(v[0], v[1])?)),
        },
        "broadcast_mul_spatial" => Case {
            inputs: vec![normal(r, &[2, 3, 4, 4]), normal(r, &[2, 1, 4, 4])],
            differentiable: vec![true, true],
            build: Box::new(|g, v| Ok(g.broadcast_mul(v[0], v[1])?)),
        },
        "add" => Case {
            inputs: vec![normal(r, &[2, 3]), normal(r, &[2, 3])],
            differentiable: vec![true, true],
            build: Box::new(|g, v| Ok(g.add(v[0], v[1])?)),
        },
        "mul" => Case {
            inputs: vec![normal(r, &[2, 3]), normal(r, &[2, 3])],
            differentiable: vec![true, true],
            build: Box::new(|g, v| Ok(g.mul(v[0], v[1])?)),
        },
        "scale" => Case {
            inputs: vec![normal(r, &[2, 3])],
            differentiable: vec![true],
            build: Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        },
        "reduce_sum" => Case {
            inputs: vec![normal(r, &[2, 3, 2])],
            differentiable: vec![true],
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        "reduce_mean" => Case {
            inputs: vec![normal(r, &[2, 3, 2])],
            differentiable: vec![true],
            build: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
        "laplace_edge" => Case {
            inputs: vec![uniform(r, &[1, 1, 8, 8], 0.0, 1.0)],
            differentiable: vec![true],
            build: Box::new(|g, v| Ok(laplace_edge(g, v[0])?)),
        },
        "weighted_bce" | "weighted_bce_mean" => {
            let target = binary(r, &[1, 1, 6, 6]);
            let reduction = if op.ends_with("mean") {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            Case {
                inputs: vec![uniform(r, &[1, 1, 6, 6], 0.05, 0.95)],
                differentiable: vec![true],
                build: Box::new(move |g, v| {
                    Ok(weighted_bce(g, v[0], &target, 0.528, 1e-7, reduction)?)
                }),
            }
        }
        "edge_bce" => {
            let target = binary(r, &[1, 1, 8, 8]);
            Case {
                inputs: vec![uniform(r, &[1, 1, 8, 8], 0.05, 0.95)],
                differentiable: vec![true],
                build: Box::new(move |g, v| Ok(edge_bce(g, v[0], &target, 1e-7, Reduction::Sum)?)),
            }
        }
        "total_loss" => {
            let target = binary(r, &[2, 1, 8, 8]);
            let cfg = LossConfig {
                alpha: 0.7,
                reduction: Reduction::Sum,
                ..LossConfig::default()
            };
            Case {
                inputs: vec![uniform(r, &[2, 1, 8, 8], 0.05, 0.95)],
                differentiable: vec![true],
                build: Box::new(move |g, v| Ok(total_loss(g, v[0], &target, &cfg)?.total)),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown operator {other:?}; expected one of {}",
                OPERATORS.join(", ")
            )))
        }
    };
    Ok(case)
}

/// Worst relative error of one operator instance drawn from `seed`.
pub fn check_operator(op: &str, seed: u64) -> Result<f64> {
    run_case(&make_case(op, seed)?, seed)
}

/// Gradient check of one parameter tensor of the tiny network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements with fewer than two admissible steps, i.e. sitting on a ReLU,
    /// abs, max-pool or clamp switch.
    pub skipped: usize,
}

/// Worst relative error over every parameter of the tiny network,
/// differentiating the full forward pass plus the mixed loss.
pub fn check_end_to_end(seed: u64) -> Result<CheckReport> {
    let params = end_to_end_errors(seed)?;
    Ok(CheckReport {
        name: "end_to_end".into(),
        seeds: 1,
        max_rel_error: params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max),
        tolerance: END_TO_END_TOLERANCE,
        checked: params.iter().map(|p| p.checked).sum(),
        skipped: params.iter().map(|p| p.skipped).sum(),
    })
}

pub fn end_to_end_errors(seed: u64) -> Result<Vec<ParamCheck>> {
    let cfg = ModelConfig::tiny();
    let mut params = build_model(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    // Zero biases put many ReLU inputs exactly on the kink. Random biases give a generic point.
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            *t = normal(&mut rng, t.shape()).map(|v| 0.1 * v);
        }
    }
    let (h, w) = cfg.backbone.input_size;
    let image = uniform(&mut rng, &[1, 3, h, w], 0.0, 1.0);
    let mut target = Tensor::zeros(&[1, 1, h, w]);
    let (y0, x0) = (rng.random_range(2..h / 2), rng.random_range(2..w / 2));
    for y in y0..y0 + h / 3 {
        for x in x0..x0 + w / 3 {
            target.data_mut()[y * w + x] = 1.0;
        }
    }
    let loss_cfg = LossConfig {
        alpha: 0.7,
        reduction: Reduction::Sum,
        ..LossConfig::default()
    };
    let eval = |p: &ModelParams| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let pv = p.bind(&mut g);
        let x = g.constant(image.clone());
        let out = pfa_forward(&mut g, &cfg, &pv, x)?;
        let terms = total_loss(&mut g, out.saliency, &target, &loss_cfg)?;
        Ok((g, terms.total))
    };
    let probe = |p: &ModelParams| -> Result<(f64, u64)> {
        let (g, l) = eval(p)?;
        Ok((g.value(l).item(), g.kink_fingerprint()))
    };

    let (g, loss) = eval(&params)?;
    let base_fingerprint = g.kink_fingerprint();
    let grads = g.backward(loss)?.named();
    let mut numerics = Vec::with_capacity(grads.len());
    let mut p = params.clone();
    for name in grads.keys() {
        let original = params.get(name).expect("parameter");
        let mut numeric = Tensor::zeros(original.shape());
        let mut keep = vec![true; original.len()];
        #[allow(clippy::needless_range_loop)]
        for i in 0..original.len() {
            let x0 = original.data()[i];
            let mut failure = None;
            let d = stable_central_difference(
                |x| {
                    p.get_mut(name).expect("parameter").data_mut()[i] = x;
                    match probe(&p) {
                        Ok((v, fp)) => (fp == base_fingerprint).then_some(v),
                        Err(e) => {
                            failure = Some(e);
                            None
                        }
                    }
                },
                x0,
            );
            p.get_mut(name).expect("parameter").data_mut()[i] = x0;
            if let Some(e) = failure {
                return Err(e);
            }
            match d {
                Some(d) => numeric.data_mut()[i] = d,
                None => keep[i] = false,
            }
        }
        numerics.push((numeric, keep));
    }
    Ok(grads
        .iter()
        .zip(numerics)
        .map(|((name, analytic), (numeric, keep))| {
            let skipped = keep.iter().filter(|k| !**k).count();
            ParamCheck {
                name: name.clone(),
                max_rel_error: masked_relative_error(analytic, &numeric, &keep),
                checked: keep.len() - skipped,
                skipped,
            }
        })
        .collect())
}

/// Outcome of a multi-seed check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central difference at the step where the estimate is most stable.
///
/// Steps run over half decades from 1e-2 down to 1e-8. Large steps suffer
/// truncation error and small ones rounding error; the plateau between them is
/// found as the adjacent pair of estimates that agree best, whose mean is
/// returned. A step whose two probes are bitwise equal is below the resolution
/// of `f` and is dropped, unless every step agrees on zero. `f` returns `None` when an evaluation lands on a different smooth
/// piece than `x0` (see [`crate::Graph::kink_fingerprint`]); such steps are
/// dropped. Returns `None` when fewer than two steps are admissible.
pub fn stable_central_difference(mut f: impl FnMut(f64) -> Option<f64>, x0: f64) -> Option<f64> {
    let estimates: Vec<Option<f64>> = (0..=12)
        .map(|k| {
            let h = 10f64.powf(-2.0 - 0.5 * k as f64);
            Some((f(x0 + h)? - f(x0 - h)?) / (2.0 * h))
        })
        .collect();
    let admissible = || estimates.iter().flatten();
    if admissible().count() >= 2 && admissible().all(|d| *d == 0.0) {
        return Some(0.0);
    }
    estimates
        .iter()
        .map(|d| d.filter(|d| *d != 0.0))
        .collect::<Vec<_>>()
        .windows(2)
        .filter_map(|w| Some((w[0]?, w[1]?)))
        .min_by(|a, b| (a.0 - a.1).abs().total_cmp(&(b.0 - b.1).abs()))
        .map(|(a, b)| 0.5 * (a + b))
}

/// Largest share of elements that may be skipped as kink crossings.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

impl CheckReport {
    pub fn passed(&self) -> bool {
        let total = (self.checked + self.skipped).max(1) as f64;
        self.max_rel_error <= self.tolerance
            && (self.skipped as f64) <= MAX_SKIPPED_FRACTION * total
    }
}

pub fn check_operator_seeds(op: &str, first_seed: u64, seeds: usize) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for s in 0..seeds as u64 {
        let case = make_case(op, first_seed + s)?;
        checked += case
            .inputs
            .iter()
            .zip(&case.differentiable)
            .filter(|(_, d)| **d)
            .map(|(t, _)| t.len())
            .sum::<usize>();
        worst = worst.max(run_case(&case, first_seed + s)?);
    }
    Ok(CheckReport {
        name: op.to_string(),
        seeds,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
        checked,
        skipped: 0,
    })
}

pub fn check_end_to_end_seeds(first_seed: u64, seeds: usize) -> Result<CheckReport> {
    let mut total = CheckReport {
        name: "end_to_end".into(),
        seeds,
        max_rel_error: 0.0,
        tolerance: END_TO_END_TOLERANCE,
        checked: 0,
        skipped: 0,
    };
    for s in 0..seeds as u64 {
        let r = check_end_to_end(first_seed + s)?;
        total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
        total.checked += r.checked;
        total.skipped += r.skipped;
    }
    Ok(total)
}
