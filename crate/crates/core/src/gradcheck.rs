//! Central finite-difference verification of backward rules.
//!
//! Every check runs in `f64`. Non-scalar outputs are reduced with a fixed
//! random projection `sum(r * f(x))`; the analytic side is the matching
//! vector-Jacobian product from [`Graph::backward_from`], so the reduction
//! itself never goes through the tape and a broken rule is attributed to
//! the op that owns it.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{window_merge, window_partition, WindowLayout};
use crate::error::{Error, Result};
use crate::fft::{irfft2_op, rfft2_op};
use crate::graph::{Graph, OpKind, Var};
use crate::kernels::ConvSpec;
use crate::loss::l1_loss;
use crate::net::{DpcNet, ModelConfig};
use crate::params::Bindings;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true derivative is numerically zero are judged by absolute error.
    pub floor: f64,
    /// Coordinates probed per input tensor; smaller tensors are probed fully.
    pub samples_per_tensor: usize,
    /// Random inputs tried per op variant.
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            samples_per_tensor: 24,
            trials: 3,
            seed: 42,
        }
    }
}

/// Outcome of checking one function or op class.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared against central differences.
    pub coordinates: usize,
    /// Coordinates left out because a probe crossed a kink of `relu`, `abs`
    /// or `channel_max`.
    pub straddling: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates > 0 && self.max_rel_error < self.tolerance
    }

    fn merge(&mut self, other: &CheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.coordinates += other.coordinates;
        self.straddling += other.straddling;
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} max_rel_error={:.3e} coords={} skipped={} {}",
            self.name,
            self.max_rel_error,
            self.coordinates,
            self.straddling,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds the function under test on a fresh graph from variables standing
/// for its inputs.
pub type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn projection(shape: Shape, seed: u64) -> Tensor<f64> {
    if shape == [1, 1, 1, 1] {
        return Tensor::ones(shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

/// Which piece of every piecewise-smooth op each element landed on: the
/// input sign for `relu` and `abs`, the winning channel for `channel_max`.
/// Central differences are only an oracle when both probes stay on the same
/// pieces as the base point.
fn branch_pattern(g: &Graph<f64>) -> Vec<u32> {
    let mut out = Vec::new();
    for v in g.vars() {
        match g.kind(v) {
            OpKind::Relu | OpKind::Abs => {
                let x = g.value(g.inputs(v)[0]);
                out.extend(x.data().iter().map(|&e| (e > 0.0) as u32 + (e == 0.0) as u32 * 2));
            }
            OpKind::ChannelMax => {
                let x = g.value(g.inputs(v)[0]);
                let [n, c, h, w] = x.shape();
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let arg = (0..c)
                                .max_by(|&i, &j| x.at(b, i, y, xx).total_cmp(&x.at(b, j, y, xx)))
                                .unwrap_or(0);
                            out.push(arg as u32);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn evaluate(f: &BuildFn<'_>, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<(f64, Vec<u32>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    let value = v.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
    Ok((value, branch_pattern(&g)))
}

/// Compares the analytic gradient of `f` with respect to every input against
/// central differences on sampled coordinates of each input.
pub fn finite_difference_check(
    name: &str,
    inputs: &[Tensor<f64>],
    f: &BuildFn<'_>,
    cfg: &GradCheckConfig,
) -> Result<CheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let proj = projection(g.shape(out), cfg.seed);
    let grads = g.backward_from(out, proj.clone())?;
    let base_pattern = branch_pattern(&g);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = inputs.to_vec();
    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        coordinates: 0,
        straddling: 0,
        tolerance: cfg.tolerance,
    };
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_tensor).into_vec()
        };
        for k in coords {
            let analytic = grads.get(*var).map_or(0.0, |t| t.data()[k]);
            let x0 = inputs[i].data()[k];
            probe[i].data_mut()[k] = x0 + cfg.step;
            let (plus, plus_pattern) = evaluate(f, &probe, &proj)?;
            probe[i].data_mut()[k] = x0 - cfg.step;
            let (minus, minus_pattern) = evaluate(f, &probe, &proj)?;
            probe[i].data_mut()[k] = x0;
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                report.straddling += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic, numeric, cfg.floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// How to draw one random input so that the probe stays away from
/// non-differentiable points.
#[derive(Clone, Copy, Debug)]
enum Draw {
    Uniform(Shape),
    /// Magnitudes in `[0.2, 1]` with random sign.
    AwayFromZero(Shape),
    /// Channel values at least 0.2 apart at every pixel.
    ChannelSeparated(Shape),
}

impl Draw {
    fn sample<R: Rng>(self, rng: &mut R) -> Tensor<f64> {
        match self {
            Draw::Uniform(s) => Tensor::rand_uniform(s, -1.0, 1.0, rng),
            Draw::AwayFromZero(s) => Tensor::from_fn(s, |_, _, _, _| {
                let m = rng.gen_range(0.2..1.0);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            }),
            Draw::ChannelSeparated(s) => {
                let [n, c, h, w] = s;
                let mut t = Tensor::zeros(s);
                for b in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let order = sample(rng, c, c).into_vec();
                            for (ch, rank) in order.into_iter().enumerate() {
                                let v = 0.3 * rank as f64 + rng.gen_range(-0.05..0.05);
                                t.set(b, ch, y, x, v);
                            }
                        }
                    }
                }
                t
            }
        }
    }
}

struct Variant {
    label: &'static str,
    inputs: Vec<Draw>,
    build: Box<BuildFn<'static>>,
}

fn variant(
    label: &'static str,
    inputs: Vec<Draw>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Variant {
    Variant {
        label,
        inputs,
        build: Box::new(build),
    }
}

use Draw::{AwayFromZero as Az, ChannelSeparated as Cs, Uniform as U};

fn conv_variant(label: &'static str, x: Shape, w: Shape, bias: bool, spec: ConvSpec) -> Variant {
    let mut inputs = vec![U(x), U(w)];
    if bias {
        inputs.push(U([1, w[0], 1, 1]));
    }
    variant(label, inputs, move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), spec))
}

/// Test inputs for one op class; every class in [`OpKind::DIFFERENTIABLE`]
/// has at least one.
fn variants(kind: OpKind) -> Vec<Variant> {
    let s = [2, 3, 4, 5];
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let apply = move |g: &mut Graph<f64>, a: Var, b: Var| match kind {
                OpKind::Add => g.add(a, b),
                OpKind::Sub => g.sub(a, b),
                _ => g.mul(a, b),
            };
            vec![
                variant("same", vec![U(s), U(s)], move |g, v| apply(g, v[0], v[1])),
                variant("bcast_c", vec![U(s), U([1, 3, 1, 1])], move |g, v| apply(g, v[0], v[1])),
                variant("bcast_both", vec![U([2, 1, 4, 1]), U([1, 3, 1, 5])], move |g, v| {
                    apply(g, v[0], v[1])
                }),
            ]
        }
        OpKind::Scale => vec![variant("x0.7", vec![U(s)], |g, v| Ok(g.scale(v[0], 0.7)))],
        OpKind::Matmul => {
            let mut out = Vec::new();
            for (label, ta, tb) in [
                ("nn", false, false),
                ("tn", true, false),
                ("nt", false, true),
                ("tt", true, true),
            ] {
                let a = if ta { [2, 2, 4, 3] } else { [2, 2, 3, 4] };
                let b = if tb { [2, 2, 5, 4] } else { [2, 2, 4, 5] };
                out.push(variant(label, vec![U(a), U(b)], move |g, v| {
                    g.matmul(v[0], v[1], ta, tb)
                }));
            }
            // Large enough to take the blocked GEMM path.
            out.push(variant("large", vec![U([1, 1, 20, 24]), U([1, 1, 24, 20])], |g, v| {
                g.matmul(v[0], v[1], false, false)
            }));
            out
        }
        OpKind::Conv2d => vec![
            conv_variant("3x3", [2, 3, 6, 6], [4, 3, 3, 3], true, ConvSpec::same(3)),
            conv_variant("stride2", [1, 2, 7, 6], [3, 2, 3, 3], true, ConvSpec::new(2, 1)),
            conv_variant("pointwise", [2, 4, 3, 5], [3, 4, 1, 1], true, ConvSpec::same(1)),
            conv_variant(
                "depthwise",
                [1, 4, 5, 5],
                [4, 1, 3, 3],
                false,
                ConvSpec::depthwise(3, 4),
            ),
            conv_variant("7x7", [1, 2, 8, 8], [1, 2, 7, 7], false, ConvSpec::same(7)),
            conv_variant(
                "groups2",
                [1, 4, 5, 5],
                [4, 2, 3, 3],
                true,
                ConvSpec {
                    groups: 2,
                    ..ConvSpec::same(3)
                },
            ),
        ],
        OpKind::Softmax => (1..4)
            .map(|axis| {
                let label = ["", "axis1", "axis2", "axis3"][axis];
                variant(label, vec![U(s)], move |g, v| {
                    let x = g.scale(v[0], 3.0);
                    g.softmax(x, axis)
                })
            })
            .collect(),
        OpKind::LayerNorm => vec![variant("", vec![U(s), U([1, 3, 1, 1]), U([1, 3, 1, 1])], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        })],
        OpKind::Gelu => vec![variant("", vec![U(s)], |g, v| {
            let x = g.scale(v[0], 3.0);
            Ok(g.gelu(x))
        })],
        OpKind::Relu => vec![variant("", vec![Az(s)], |g, v| Ok(g.relu(v[0])))],
        OpKind::Sigmoid => vec![variant("", vec![U(s)], |g, v| {
            let x = g.scale(v[0], 3.0);
            Ok(g.sigmoid(x))
        })],
        OpKind::Abs => vec![variant("", vec![Az(s)], |g, v| Ok(g.abs(v[0])))],
        OpKind::Sum => vec![variant("", vec![U(s)], |g, v| Ok(g.sum(v[0])))],
        OpKind::Mean => vec![variant("", vec![U(s)], |g, v| Ok(g.mean(v[0])))],
        OpKind::Concat => vec![variant(
            "",
            vec![U([2, 2, 3, 4]), U([2, 3, 3, 4]), U([2, 1, 3, 4])],
            |g, v| g.concat_channels(v),
        )],
        OpKind::Slice => vec![variant("", vec![U([2, 5, 3, 4])], |g, v| g.slice_channels(v[0], 1, 3))],
        OpKind::Reshape => vec![variant("", vec![U([2, 4, 3, 2])], |g, v| g.reshape(v[0], [2, 2, 6, 2]))],
        OpKind::Upsample => vec![variant("", vec![U([2, 3, 3, 2])], |g, v| {
            Ok(g.upsample_nearest(v[0], 2))
        })],
        OpKind::AvgPool => vec![variant("", vec![U([2, 3, 4, 6])], |g, v| g.avg_pool(v[0], 2))],
        OpKind::ChannelMean => vec![variant("", vec![U(s)], |g, v| Ok(g.channel_mean(v[0])))],
        OpKind::ChannelMax => vec![variant("", vec![Cs(s)], |g, v| Ok(g.channel_max(v[0])))],
        OpKind::GlobalAvgPool => vec![variant("", vec![U(s)], |g, v| Ok(g.global_avg_pool(v[0])))],
        OpKind::L2Normalize => vec![variant("", vec![Az(s)], |g, v| Ok(g.l2_normalize(v[0])))],
        OpKind::WindowPartition => vec![variant("", vec![U([2, 3, 6, 4])], |g, v| {
            Ok(window_partition(g, v[0], 2)?.0)
        })],
        OpKind::WindowMerge => {
            let layout = WindowLayout::new([2, 3, 6, 4], 2).expect("valid layout");
            vec![variant("", vec![U(layout.windows_shape())], move |g, v| {
                window_merge(g, v[0], &layout)
            })]
        }
        OpKind::Rfft2 => vec![variant("", vec![U([2, 2, 4, 8])], |g, v| rfft2_op(g, v[0]))],
        OpKind::Irfft2 => vec![variant("", vec![U([2, 4, 4, 5])], |g, v| irfft2_op(g, v[0], 8))],
        OpKind::Leaf => Vec::new(),
    }
}

/// Checks every differentiable op class, `cfg.trials` random inputs per
/// variant. Returns one report per class, in [`OpKind::DIFFERENTIABLE`] order.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::with_capacity(OpKind::DIFFERENTIABLE.len());
    for (k, &kind) in OpKind::DIFFERENTIABLE.iter().enumerate() {
        let cases = variants(kind);
        if cases.is_empty() {
            return Err(Error::contract(format!("no gradient check defined for {kind}")));
        }
        let mut total = CheckReport {
            name: kind.name().to_string(),
            max_rel_error: 0.0,
            coordinates: 0,
            straddling: 0,
            tolerance: cfg.tolerance,
        };
        for (vi, case) in cases.iter().enumerate() {
            for trial in 0..cfg.trials {
                let seed = cfg.seed ^ ((k as u64) << 32 | (vi as u64) << 16 | trial as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor<f64>> = case.inputs.iter().map(|d| d.sample(&mut rng)).collect();
                let sub = GradCheckConfig { seed, ..*cfg };
                let name = format!("{kind}[{}]", case.label);
                total.merge(&finite_difference_check(&name, &inputs, &case.build, &sub)?);
            }
        }
        reports.push(total);
    }
    Ok(reports)
}

/// Side of the square input used by the whole-network check.
pub const NETWORK_CHECK_SIZE: usize = 16;

/// Checks `L1(net(x), y)` against every parameter tensor (and the input
/// image) of a freshly initialized network.
pub fn network_check(model: &ModelConfig, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let (net, store) = DpcNet::init::<f64>(model, cfg.seed)?;
    let hw = NETWORK_CHECK_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xface);
    let rainy = Tensor::rand_uniform([1, 3, hw, hw], 0.0, 1.0, &mut rng);
    let clean = Tensor::rand_uniform([1, 3, hw, hw], 0.0, 1.0, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
    inputs.push(rainy);
    let nparams = store.len();
    let build = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let p = Bindings::from_vars(v[..nparams].to_vec());
        let pred = net.forward(g, &p, v[nparams])?;
        let gt = g.input(clean.clone());
        l1_loss(g, pred, gt)
    };
    finite_difference_check("network", &inputs, &build, cfg)
}

/// The full suite: every op class, then the whole network.
pub fn run_suite(model: &ModelConfig, cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let mut reports = op_suite(cfg)?;
    reports.push(network_check(model, cfg)?);
    Ok(reports)
}
