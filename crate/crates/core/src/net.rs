//! The three-level dual-path encoder-decoder.
//!
//! Each level is a stack of [`DdBlock`]s. A block runs a spatial path
//! ([`SfeBlock`]: transformer branch plus convolutional branch) and a
//! frequency path ([`FfeBlock`]) side by side and fuses them with an
//! [`Afm`]. The network predicts a correction that is added to the rainy
//! input.

use crate::attention::{SaOrder, Sctb, SctbConfig};
use crate::error::{Error, Result};
use crate::fft::{irfft2_op, rfft2_op};
use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::layers::Conv;
use crate::params::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of resolution levels (the last one is the bottleneck).
pub const LEVELS: usize = 3;

/// GDFN expansion factor.
pub const FFN_EXPANSION: f64 = 2.66;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Cross-reweighting by spatial and channel attention maps.
    Afm,
    /// Concatenation followed by a 1x1 convolution.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub window: usize,
    pub ffn_expansion: f64,
    pub frequency_branch: bool,
    pub fusion: Fusion,
    pub spatial_sa: bool,
    pub channel_sa: bool,
    pub sa_order: SaOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            blocks: [2, 3, 4],
            heads: [2, 4, 8],
            window: 8,
            ffn_expansion: FFN_EXPANSION,
            frequency_branch: true,
            fusion: Fusion::Afm,
            spatial_sa: true,
            channel_sa: true,
            sa_order: SaOrder::SpatialFirst,
        }
    }
}

impl ModelConfig {
    /// Full-width variant (48 base channels).
    pub fn full() -> Self {
        ModelConfig {
            base_channels: 48,
            ..Self::default()
        }
    }

    /// Small model used for CPU training runs.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 8,
            blocks: [1, 1, 1],
            heads: [1, 2, 2],
            window: 4,
            ..Self::default()
        }
    }

    /// Smallest model that still exercises every path; used for gradient checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            window: 2,
            ..Self::toy()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("model.base_channels must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::config("model.window must be at least 1"));
        }
        if !(self.ffn_expansion > 0.0 && self.ffn_expansion.is_finite()) {
            return Err(Error::config("model.ffn_expansion must be positive"));
        }
        if !self.spatial_sa && !self.channel_sa {
            return Err(Error::config(
                "model.spatial_sa and model.channel_sa cannot both be off",
            ));
        }
        for level in 0..LEVELS {
            let c = self.channels(level);
            let h = self.heads[level];
            if h == 0 || !c.is_multiple_of(h) {
                return Err(Error::config(format!(
                    "level {level} has {c} channels, not divisible by {h} heads"
                )));
            }
        }
        Ok(())
    }

    fn sctb(&self, level: usize) -> SctbConfig {
        SctbConfig {
            channels: self.channels(level),
            heads: self.heads[level],
            window: self.window,
            ffn_expansion: self.ffn_expansion,
            spatial: self.spatial_sa,
            channel: self.channel_sa,
            order: self.sa_order,
        }
    }
}

/// Adaptive fusion of two same-shape feature maps.
#[derive(Clone, Debug)]
pub struct Afm {
    pub spatial_conv: Conv,
    pub channel_reduce: Conv,
    pub channel_expand: Conv,
    pub first: Conv,
    pub second: Conv,
    pub out: Conv,
}

/// The two reweighted sums that feed the first and second fusion convs.
#[derive(Clone, Copy, Debug)]
pub struct AfmSums {
    pub first: Var,
    pub second: Var,
}

impl Afm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let reduced = (channels / 4).max(1);
        Ok(Afm {
            spatial_conv: Conv::same(store, &format!("{name}.spatial"), 2, 1, 7)?,
            channel_reduce: Conv::pointwise(store, &format!("{name}.channel_reduce"), channels, reduced)?,
            channel_expand: Conv::pointwise(store, &format!("{name}.channel_expand"), reduced, channels)?,
            first: Conv::pointwise(store, &format!("{name}.first"), channels, channels)?,
            second: Conv::pointwise(store, &format!("{name}.second"), channels, channels)?,
            out: Conv::pointwise(store, &format!("{name}.out"), 2 * channels, channels)?,
        })
    }

    /// `N x 1 x H x W` map in (0, 1) from channel-pooled mean and max.
    pub fn spatial_map<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let mean = g.channel_mean(x);
        let max = g.channel_max(x);
        let pooled = g.concat_channels(&[mean, max])?;
        let logits = self.spatial_conv.forward(g, p, pooled)?;
        Ok(g.sigmoid(logits))
    }

    /// `N x C x 1 x 1` map in (0, 1) from global average pooling.
    pub fn channel_map<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x);
        let hidden = self.channel_reduce.forward(g, p, pooled)?;
        let hidden = g.relu(hidden);
        let logits = self.channel_expand.forward(g, p, hidden)?;
        Ok(g.sigmoid(logits))
    }

    /// `b1 * SA(b2) + b2 * CA(b1)` and `b1 * CA(b2) + b2 * SA(b1)`.
    pub fn sums<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, b1: Var, b2: Var) -> Result<AfmSums> {
        let (s1, s2) = (g.shape(b1), g.shape(b2));
        if s1 != s2 {
            return Err(Error::contract(format!(
                "fusion inputs differ in shape: {s1:?} vs {s2:?}"
            )));
        }
        let sa1 = self.spatial_map(g, p, b1)?;
        let sa2 = self.spatial_map(g, p, b2)?;
        let ca1 = self.channel_map(g, p, b1)?;
        let ca2 = self.channel_map(g, p, b2)?;
        let a = g.mul(b1, sa2)?;
        let b = g.mul(b2, ca1)?;
        let first = g.add(a, b)?;
        let a = g.mul(b1, ca2)?;
        let b = g.mul(b2, sa1)?;
        let second = g.add(a, b)?;
        Ok(AfmSums { first, second })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, b1: Var, b2: Var) -> Result<Var> {
        let sums = self.sums(g, p, b1, b2)?;
        let f1 = self.first.forward(g, p, sums.first)?;
        let f2 = self.second.forward(g, p, sums.second)?;
        let both = g.concat_channels(&[f1, f2])?;
        self.out.forward(g, p, both)
    }
}

/// Either fusion variant.
#[derive(Clone, Debug)]
pub enum Fuse {
    Afm(Box<Afm>),
    Concat(Conv),
}

impl Fuse {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: Fusion) -> Result<Self> {
        Ok(match kind {
            Fusion::Afm => Fuse::Afm(Box::new(Afm::new(store, name, channels)?)),
            Fusion::Concat => Fuse::Concat(Conv::pointwise(
                store,
                &format!("{name}.concat"),
                2 * channels,
                channels,
            )?),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, b1: Var, b2: Var) -> Result<Var> {
        match self {
            Fuse::Afm(afm) => afm.forward(g, p, b1, b2),
            Fuse::Concat(conv) => {
                let (s1, s2) = (g.shape(b1), g.shape(b2));
                if s1 != s2 {
                    return Err(Error::contract(format!(
                        "fusion inputs differ in shape: {s1:?} vs {s2:?}"
                    )));
                }
                let both = g.concat_channels(&[b1, b2])?;
                conv.forward(g, p, both)
            }
        }
    }
}

/// Spatial feature extraction: transformer branch and convolutional branch.
#[derive(Clone, Debug)]
pub struct SfeBlock {
    pub transformer: Sctb,
    pub local_first: Conv,
    pub local_second: Conv,
    pub fuse: Fuse,
}

impl SfeBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, level: usize) -> Result<Self> {
        let c = cfg.channels(level);
        Ok(SfeBlock {
            transformer: Sctb::new(store, &format!("{name}.sctb"), cfg.sctb(level))?,
            local_first: Conv::same(store, &format!("{name}.local1"), c, c, 3)?,
            local_second: Conv::same(store, &format!("{name}.local2"), c, c, 3)?,
            fuse: Fuse::new(store, &format!("{name}.fuse"), c, cfg.fusion)?,
        })
    }

    /// The convolutional locality branch alone.
    pub fn local<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.local_first.forward(g, p, x)?;
        let y = g.gelu(y);
        let y = self.local_second.forward(g, p, y)?;
        Ok(g.gelu(y))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let a = self.transformer.forward(g, p, x)?;
        let b = self.local(g, p, x)?;
        self.fuse.forward(g, p, a, b)
    }
}

/// Frequency feature extraction: a residual spectral MLP.
#[derive(Clone, Debug)]
pub struct FfeBlock {
    pub conv_in: Conv,
    pub spectral_first: Conv,
    pub spectral_second: Conv,
    pub conv_out: Conv,
}

impl FfeBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c2 = 2 * channels;
        Ok(FfeBlock {
            conv_in: Conv::pointwise(store, &format!("{name}.conv_in"), channels, channels)?,
            spectral_first: Conv::pointwise(store, &format!("{name}.spectral1"), c2, c2)?,
            spectral_second: Conv::pointwise(store, &format!("{name}.spectral2"), c2, c2)?,
            conv_out: Conv::pointwise(store, &format!("{name}.conv_out"), channels, channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let width = g.shape(x)[3];
        let y = self.conv_in.forward(g, p, x)?;
        let s = rfft2_op(g, y)?;
        let s = self.spectral_first.forward(g, p, s)?;
        let s = g.relu(s);
        let s = self.spectral_second.forward(g, p, s)?;
        let y = irfft2_op(g, s, width)?;
        let y = self.conv_out.forward(g, p, y)?;
        g.add(x, y)
    }
}

/// Dual-domain block.
#[derive(Clone, Debug)]
pub struct DdBlock {
    pub spatial: SfeBlock,
    pub frequency: Option<(FfeBlock, Fuse)>,
}

impl DdBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, level: usize) -> Result<Self> {
        let c = cfg.channels(level);
        let spatial = SfeBlock::new(store, &format!("{name}.sfe"), cfg, level)?;
        let frequency = if cfg.frequency_branch {
            Some((
                FfeBlock::new(store, &format!("{name}.ffe"), c)?,
                Fuse::new(store, &format!("{name}.fuse"), c, cfg.fusion)?,
            ))
        } else {
            None
        };
        Ok(DdBlock { spatial, frequency })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let s = self.spatial.forward(g, p, x)?;
        let y = match &self.frequency {
            Some((ffe, fuse)) => {
                let f = ffe.forward(g, p, x)?;
                fuse.forward(g, p, s, f)?
            }
            None => s,
        };
        g.add(y, x)
    }
}

#[derive(Clone, Debug)]
pub struct DpcNet {
    pub cfg: ModelConfig,
    pub stem: Conv,
    /// Blocks per level; the last level is the bottleneck.
    pub encoder: Vec<Vec<DdBlock>>,
    /// Stride-2 downsampling after encoder levels `0..LEVELS-1`.
    pub down: Vec<Conv>,
    /// Upsampling conv into decoder level `l` (indexed by `l`).
    pub up: Vec<Conv>,
    /// Skip merge into decoder level `l`.
    pub skip: Vec<Conv>,
    pub decoder: Vec<Vec<DdBlock>>,
    pub head: Conv,
}

fn blocks<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    level: usize,
    count: usize,
) -> Result<Vec<DdBlock>> {
    (0..count)
        .map(|i| DdBlock::new(store, &format!("{prefix}.block{i}"), cfg, level))
        .collect()
}

fn run_blocks<T: Scalar>(bs: &[DdBlock], g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
    bs.iter().try_fold(x, |x, b| b.forward(g, p, x))
}

impl DpcNet {
    /// Registers every parameter in `store` in a fixed order.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let stem = Conv::same(store, "stem", 3, c0, 3)?;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for level in 0..LEVELS {
            encoder.push(blocks(store, &format!("enc{level}"), cfg, level, cfg.blocks[level])?);
            if level + 1 < LEVELS {
                let c = cfg.channels(level);
                down.push(Conv::new(
                    store,
                    &format!("down{level}"),
                    c,
                    2 * c,
                    3,
                    ConvSpec::new(2, 1),
                    true,
                )?);
            }
        }
        let mut up = Vec::new();
        let mut skip = Vec::new();
        let mut decoder = Vec::new();
        for level in 0..LEVELS - 1 {
            let c = cfg.channels(level);
            up.push(Conv::same(store, &format!("up{level}"), 2 * c, c, 3)?);
            skip.push(Conv::pointwise(store, &format!("skip{level}"), 2 * c, c)?);
            decoder.push(blocks(store, &format!("dec{level}"), cfg, level, cfg.blocks[level])?);
        }
        let head = Conv::same(store, "head", c0, 3, 3)?;
        Ok(DpcNet {
            cfg: cfg.clone(),
            stem,
            encoder,
            down,
            up,
            skip,
            decoder,
            head,
        })
    }

    /// Builds the model and a fresh parameter store seeded with `seed`.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(seed);
        let net = Self::new(&mut store, cfg)?;
        Ok((net, store))
    }

    /// Checks that an input shape is usable at every level.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != 3 {
            return Err(Error::config(format!("expected 3 input channels, got {c}")));
        }
        let min = 1 << (LEVELS - 1);
        for (axis, extent) in [("height", h), ("width", w)] {
            if extent < min || !extent.is_power_of_two() {
                return Err(Error::config(format!(
                    "input {axis} {extent} must be a power of two and at least {min}"
                )));
            }
        }
        Ok(())
    }

    /// Unclamped prediction `rainy + head(...)`; used for training.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, rainy: Var) -> Result<Var> {
        self.check_input(g.shape(rainy))?;
        let mut x = self.stem.forward(g, p, rainy)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS {
            x = run_blocks(&self.encoder[level], g, p, x)?;
            if level + 1 < LEVELS {
                skips.push(x);
                x = self.down[level].forward(g, p, x)?;
            }
        }
        for level in (0..LEVELS - 1).rev() {
            let up = g.upsample_nearest(x, 2);
            let up = self.up[level].forward(g, p, up)?;
            let merged = g.concat_channels(&[up, skips[level]])?;
            x = self.skip[level].forward(g, p, merged)?;
            x = run_blocks(&self.decoder[level], g, p, x)?;
        }
        let correction = self.head.forward(g, p, x)?;
        g.add(rainy, correction)
    }

    /// Inference on a batch with power-of-two extents; output clamped to [0, 1].
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, rainy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.input(rainy.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clamp(T::zero(), T::one()))
    }

    /// Inference on any extent: reflect-pads up to the next valid size and
    /// crops the result back.
    pub fn infer_any_size<T: Scalar>(&self, store: &ParamStore<T>, rainy: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = rainy.shape();
        let min = 1 << (LEVELS - 1);
        let th = h.next_power_of_two().max(min);
        let tw = w.next_power_of_two().max(min);
        if (th, tw) == (h, w) {
            return self.infer(store, rainy);
        }
        let padded = reflect_pad(rainy, th, tw);
        let out = self.infer(store, &padded)?;
        Ok(crop(&out, h, w))
    }
}

/// Index into `0..n` reflecting at both borders without repeating the edge.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends `x` to `h x w` by mirroring at the bottom and right edges.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, xh, xw] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| {
        x.at(b, ch, reflect_index(y, xh), reflect_index(xx, xw))
    })
}

/// Top-left `h x w` crop.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| x.at(b, ch, y, xx))
}
