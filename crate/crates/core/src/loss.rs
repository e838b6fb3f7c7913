//! Training objective: L1, a frozen-feature perceptual term and an L1
//! distance between spectra.

use crate::error::{Error, Result};
use crate::fft::rfft2_op;
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::layers::Conv;
use crate::params::{Bindings, ParamStore};
use crate::scalar::Scalar;

/// Seed of the frozen perceptual feature extractor.
pub const EXTRACTOR_SEED: u64 = 7;

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub fft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            perceptual: 0.2,
            fft: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("perceptual", self.perceptual), ("fft", self.fft)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, pred: Var, gt: Var, op: &'static str) -> Result<()> {
    let (a, b) = (g.shape(pred), g.shape(gt));
    if a != b {
        return Err(Error::Shape { op, lhs: a, rhs: b });
    }
    Ok(())
}

fn mean_abs_diff<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt, "l1_loss")?;
    mean_abs_diff(g, pred, gt)
}

/// Mean absolute difference of the half spectra, real and imaginary parts
/// counted as separate coordinates.
pub fn fft_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt, "fft_loss")?;
    let sp = rfft2_op(g, pred)?;
    let sg = rfft2_op(g, gt)?;
    mean_abs_diff(g, sp, sg)
}

/// Two stages of `conv3x3 -> ReLU -> 2x2 average pool` with frozen random
/// weights (3 -> 8 -> 16 channels).
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    store: ParamStore<T>,
    stages: [Conv; 2],
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let stages = [
            Conv::new(&mut store, "stage0", 3, 8, 3, ConvSpec::same(3), true)?,
            Conv::new(&mut store, "stage1", 8, 16, 3, ConvSpec::same(3), true)?,
        ];
        Ok(FeatureExtractor { store, stages })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Binds the frozen weights into `g` as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        self.store.bind_frozen(g)
    }

    /// Feature maps after each stage.
    pub fn features(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<[Var; 2]> {
        let mut out = [x; 2];
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(g, p, h)?;
            h = g.relu(h);
            h = g.avg_pool(h, 2)?;
            out[i] = h;
        }
        Ok(out)
    }
}

/// Average over both stages of the mean absolute feature difference.
pub fn perceptual_proxy_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    extractor: &FeatureExtractor<T>,
) -> Result<Var> {
    check_pair(g, pred, gt, "perceptual_proxy_loss")?;
    let p = extractor.bind(g);
    let fp = extractor.features(g, &p, pred)?;
    let fg = extractor.features(g, &p, gt)?;
    let a = mean_abs_diff(g, fp[0], fg[0])?;
    let b = mean_abs_diff(g, fp[1], fg[1])?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, 0.5))
}

/// Weighted sum of the three terms. Terms with zero weight are skipped.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    weights: &LossWeights,
    extractor: &FeatureExtractor<T>,
) -> Result<Var> {
    check_pair(g, pred, gt, "total_loss")?;
    let mut terms = Vec::with_capacity(3);
    if weights.l1 != 0.0 {
        let t = l1_loss(g, pred, gt)?;
        terms.push(g.scale(t, weights.l1));
    }
    if weights.perceptual != 0.0 {
        let t = perceptual_proxy_loss(g, pred, gt, extractor)?;
        terms.push(g.scale(t, weights.perceptual));
    }
    if weights.fft != 0.0 {
        let t = fft_loss(g, pred, gt)?;
        terms.push(g.scale(t, weights.fft));
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => {
            let zero = g.scale(pred, 0.0);
            return Ok(g.sum(zero));
        }
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
