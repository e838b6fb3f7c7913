//! Adam, cosine learning-rate annealing, progressive patch stages and the
//! training loop.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{patch_sample, Corpus};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, FeatureExtractor, LossWeights, EXTRACTOR_SEED};
use crate::metrics::psnr_y;
use crate::net::{DpcNet, ModelConfig};
use crate::params::{ParamStore, DEFAULT_SEED};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        OptimState {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update. Every parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (nb1, nb2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (inv_c1, inv_c2) = (T::of(1.0 / c1), T::of(1.0 / c2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.as_ref().expect("checked above").data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + nb1 * g[i];
                vd[i] = b2 * vd[i] + nb2 * g[i] * g[i];
                let mh = md[i] * inv_c1;
                let vh = vd[i] * inv_c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Patch and batch size in effect from `start_step` on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub start_step: u64,
    pub patch: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub stages: Vec<Stage>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr_max: 3e-4,
            lr_min: 1e-6,
            total_steps: 300,
            stages: vec![
                Stage {
                    start_step: 0,
                    patch: 32,
                    batch: 4,
                },
                Stage {
                    start_step: 150,
                    patch: 64,
                    batch: 2,
                },
            ],
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        match self.stages.first() {
            Some(s) if s.start_step == 0 => {}
            _ => return Err(Error::config("the first training stage must start at step 0")),
        }
        for pair in self.stages.windows(2) {
            if pair[1].start_step <= pair[0].start_step {
                return Err(Error::config("training stages must have increasing start steps"));
            }
        }
        for s in &self.stages {
            if s.batch == 0 || !s.patch.is_power_of_two() {
                return Err(Error::config(format!(
                    "stage at step {} needs a positive batch and a power-of-two patch",
                    s.start_step
                )));
            }
        }
        Ok(())
    }

    /// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`,
    /// constant afterwards.
    pub fn lr(&self, step: u64) -> f64 {
        cosine_lr(step, self.total_steps, self.lr_max, self.lr_min)
    }

    pub fn stage(&self, step: u64) -> Stage {
        *self
            .stages
            .iter()
            .rev()
            .find(|s| s.start_step <= step)
            .unwrap_or(&self.stages[0])
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`, clamped at
/// `lr_min` for `step >= total`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Log batch PSNR every this many steps (and on the last); 0 disables.
    pub eval_every: u64,
    /// Emit a checkpoint every this many steps; 0 means only at the end.
    pub checkpoint_every: u64,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: DEFAULT_SEED,
            clip_norm: Some(1.0),
            eval_every: 25,
            checkpoint_every: 0,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("gradient clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub patch: usize,
    pub batch: usize,
    pub psnr: Option<f64>,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lr={:e} loss={}", self.step, self.lr, self.loss)?;
        if let Some(p) = self.psnr {
            write!(f, " psnr={}", crate::metrics::format_db(p))?;
        }
        Ok(())
    }
}

/// Receives log lines and checkpoints as training proceeds.
pub trait TrainSink {
    fn record(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _step: u64, _store: &ParamStore<f32>) -> Result<()> {
        Ok(())
    }
}

/// Sink that ignores everything.
pub struct NullSink;

impl TrainSink for NullSink {}

pub struct TrainOutcome {
    pub net: DpcNet,
    pub store: ParamStore<f32>,
    pub records: Vec<StepRecord>,
}

fn sample_batch<R: Rng>(corpus: &Corpus, stage: Stage, flip: bool, rng: &mut R) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut rainy = Vec::with_capacity(stage.batch);
    let mut clean = Vec::with_capacity(stage.batch);
    for _ in 0..stage.batch {
        let idx = rng.gen_range(0..corpus.len());
        let p = patch_sample(&corpus.pairs[idx], stage.patch, flip, rng)?;
        rainy.push(p.rainy);
        clean.push(p.clean);
    }
    Ok((Tensor::concat_batch(&rainy)?, Tensor::concat_batch(&clean)?))
}

/// Scales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.scale_in_place(s);
            }
        }
    }
    norm
}

/// Runs `cfg.schedule.total_steps` optimization steps on random patches of
/// `corpus`. Fully determined by `cfg` (including the seed) and the corpus.
pub fn train_loop(cfg: &TrainConfig, corpus: &Corpus, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("training needs a non-empty corpus"));
    }
    let (net, mut store) = DpcNet::init::<f32>(&cfg.model, cfg.seed)?;
    let extractor = FeatureExtractor::<f32>::new(EXTRACTOR_SEED)?;
    let mut opt = OptimState::new(&store, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut records = Vec::with_capacity(cfg.schedule.total_steps as usize);
    let total = cfg.schedule.total_steps;
    for step in 0..total {
        let stage = cfg.schedule.stage(step);
        let lr = cfg.schedule.lr(step);
        let (rainy, clean) = sample_batch(corpus, stage, cfg.flip, &mut rng)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(rainy);
        let y = g.input(clean.clone());
        let pred = net.forward(&mut g, &p, x)?;
        let loss = total_loss(&mut g, pred, y, &cfg.weights, &extractor)?;
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: loss_value,
            });
        }
        let eval = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step + 1 == total);
        let psnr = if eval {
            let out = g.value(pred).clamp(0.0, 1.0);
            Some(batch_psnr(&out, &clean)?)
        } else {
            None
        };
        let grads = g.backward_leaves(loss)?;
        store.accumulate_grads(&p, &grads);
        drop(grads);
        drop(g);
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut store, c);
        }
        opt.step(&mut store, lr)?;
        store.zero_grads();
        let rec = StepRecord {
            step,
            lr,
            loss: loss_value,
            patch: stage.patch,
            batch: stage.batch,
            psnr,
        };
        sink.record(&rec)?;
        records.push(rec);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total {
            sink.checkpoint(step + 1, &store)?;
        }
    }
    sink.checkpoint(total, &store)?;
    Ok(TrainOutcome { net, store, records })
}

/// Mean luma PSNR over the images of a batch.
pub fn batch_psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let n = pred.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        total += psnr_y(&pred.slice_batch(i, 1)?, &gt.slice_batch(i, 1)?)?;
    }
    Ok(total / n as f64)
}
