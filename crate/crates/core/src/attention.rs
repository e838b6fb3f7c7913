//! Spatial-channel transformer block and its parts.
//!
//! Spatial attention runs inside non-overlapping `ws x ws` windows with a
//! `T x T` map per head (`T = ws^2`). Channel attention builds a `d x d` map
//! per head over channel rows of length `H W`, with L2-normalized queries
//! and keys and a learnable per-head temperature. Both are followed by a
//! gated depthwise feed-forward network, each sub-layer wrapped in a
//! pre-norm residual.

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::kernels::ConvSpec;
use crate::layers::{Conv, Norm};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry recorded by [`window_partition`] so the merge can undo it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    /// Windows along (height, width).
    pub grid: (usize, usize),
    /// Zero rows added at the bottom and columns at the right.
    pub pad: (usize, usize),
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowLayout {
    pub fn new(shape: [usize; 4], window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window size must be at least 1"));
        }
        let [n, c, h, w] = shape;
        let gh = h.div_ceil(window);
        let gw = w.div_ceil(window);
        Ok(WindowLayout {
            window,
            grid: (gh, gw),
            pad: (gh * window - h, gw * window - w),
            batch: n,
            channels: c,
            height: h,
            width: w,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn windows_shape(&self) -> [usize; 4] {
        [self.batch * self.num_windows(), self.channels, self.window, self.window]
    }
}

/// Splits `x` into windows ordered (batch, window row, window column).
pub fn partition_tensor<T: Scalar>(x: &Tensor<T>, layout: &WindowLayout) -> Tensor<T> {
    let ws = layout.window;
    let (gh, gw) = layout.grid;
    let (h, w) = (layout.height, layout.width);
    let mut out = Tensor::zeros(layout.windows_shape());
    let od = out.data_mut();
    let xd = x.data();
    let mut i = 0;
    for n in 0..layout.batch {
        for wy in 0..gh {
            for wx in 0..gw {
                for c in 0..layout.channels {
                    let plane = &xd[(n * layout.channels + c) * h * w..];
                    for y in 0..ws {
                        let iy = wy * ws + y;
                        for xx in 0..ws {
                            let ix = wx * ws + xx;
                            if iy < h && ix < w {
                                od[i] = plane[iy * w + ix];
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`partition_tensor`], cropping any padding.
pub fn merge_tensor<T: Scalar>(windows: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    if windows.shape() != layout.windows_shape() {
        return Err(Error::contract(format!(
            "windows of shape {:?} do not match layout expecting {:?}",
            windows.shape(),
            layout.windows_shape()
        )));
    }
    let ws = layout.window;
    let (gh, gw) = layout.grid;
    let (h, w) = (layout.height, layout.width);
    let mut out = Tensor::zeros([layout.batch, layout.channels, h, w]);
    let od = out.data_mut();
    let wd = windows.data();
    let mut i = 0;
    for n in 0..layout.batch {
        for wy in 0..gh {
            for wx in 0..gw {
                for c in 0..layout.channels {
                    let base = (n * layout.channels + c) * h * w;
                    for y in 0..ws {
                        let iy = wy * ws + y;
                        for xx in 0..ws {
                            let ix = wx * ws + xx;
                            if iy < h && ix < w {
                                od[base + iy * w + ix] = wd[i];
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable window partition; zero-pads to a multiple of `window`.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, window: usize) -> Result<(Var, WindowLayout)> {
    let layout = WindowLayout::new(g.shape(x), window)?;
    let value = partition_tensor(g.value(x), &layout);
    let v = g.push(
        OpKind::WindowPartition,
        &[x],
        value,
        Box::new(move |ctx| Ok(vec![Some(merge_tensor(ctx.grad, &layout)?)])),
    );
    Ok((v, layout))
}

/// Differentiable inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(g: &mut Graph<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let layout = *layout;
    let value = merge_tensor(g.value(windows), &layout)?;
    Ok(g.push(
        OpKind::WindowMerge,
        &[windows],
        value,
        Box::new(move |ctx| Ok(vec![Some(partition_tensor(ctx.grad, &layout))])),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionDim {
    Spatial,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub dim: AttentionDim,
}

impl AttentionConfig {
    /// Per-head width `C / h`; fails unless `h` divides `C`.
    pub fn head_dim(&self, channels: usize) -> Result<usize> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{channels} channels are not divisible into {} heads",
                self.heads
            )));
        }
        Ok(channels / self.heads)
    }
}

/// Multi-head self-attention inside each window.
#[derive(Clone, Debug)]
pub struct SpatialWindowAttention {
    pub cfg: AttentionConfig,
    pub channels: usize,
    /// Stacked `W_Q`, `W_K`, `W_V` as one bias-free 1x1 convolution.
    pub qkv: Conv,
    pub proj: Conv,
}

impl SpatialWindowAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            heads,
            dim: AttentionDim::Spatial,
        };
        cfg.head_dim(channels)?;
        Ok(SpatialWindowAttention {
            cfg,
            channels,
            qkv: Conv::new(
                store,
                &format!("{name}.qkv"),
                channels,
                3 * channels,
                1,
                ConvSpec::new(1, 0),
                false,
            )?,
            proj: Conv::pointwise(store, &format!("{name}.proj"), channels, channels)?,
        })
    }

    /// Returns the attended windows and the `B x h x T x T` probability map.
    pub fn forward_with_map<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, windows: Var) -> Result<(Var, Var)> {
        let [b, c, wh, ww] = g.shape(windows);
        if c != self.channels {
            return Err(Error::contract(format!(
                "spatial attention built for {} channels got {c}",
                self.channels
            )));
        }
        let h = self.cfg.heads;
        let d = self.cfg.head_dim(c)?;
        let t = wh * ww;
        let qkv = self.qkv.forward(g, p, windows)?;
        let q = g.slice_channels(qkv, 0, c)?;
        let k = g.slice_channels(qkv, c, c)?;
        let v = g.slice_channels(qkv, 2 * c, c)?;
        let q = g.reshape(q, [b, h, d, t])?;
        let k = g.reshape(k, [b, h, d, t])?;
        let v = g.reshape(v, [b, h, d, t])?;
        let logits = g.matmul(q, k, true, false)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(logits, 3)?;
        let out = g.matmul(v, attn, false, true)?;
        let out = g.reshape(out, [b, c, wh, ww])?;
        Ok((self.proj.forward(g, p, out)?, attn))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, windows: Var) -> Result<Var> {
        Ok(self.forward_with_map(g, p, windows)?.0)
    }
}

/// Multi-head self-attention across channels.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub cfg: AttentionConfig,
    pub channels: usize,
    pub qkv: Conv,
    pub qkv_dw: Conv,
    pub temperature: ParamId,
    pub proj: Conv,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            heads,
            dim: AttentionDim::Channel,
        };
        cfg.head_dim(channels)?;
        let c3 = 3 * channels;
        Ok(ChannelAttention {
            cfg,
            channels,
            qkv: Conv::new(
                store,
                &format!("{name}.qkv"),
                channels,
                c3,
                1,
                ConvSpec::new(1, 0),
                false,
            )?,
            qkv_dw: Conv::new(
                store,
                &format!("{name}.qkv_dw"),
                c3,
                c3,
                3,
                ConvSpec::depthwise(3, c3),
                false,
            )?,
            temperature: store.add(&format!("{name}.temperature"), [1, heads, 1, 1], Init::Ones)?,
            proj: Conv::pointwise(store, &format!("{name}.proj"), channels, channels)?,
        })
    }

    /// Returns the output and the `N x h x d x d` probability map.
    pub fn forward_with_map<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<(Var, Var)> {
        let [n, c, hh, ww] = g.shape(x);
        if c != self.channels {
            return Err(Error::contract(format!(
                "channel attention built for {} channels got {c}",
                self.channels
            )));
        }
        let h = self.cfg.heads;
        let d = self.cfg.head_dim(c)?;
        let hw = hh * ww;
        let qkv = self.qkv.forward(g, p, x)?;
        let qkv = self.qkv_dw.forward(g, p, qkv)?;
        let q = g.slice_channels(qkv, 0, c)?;
        let k = g.slice_channels(qkv, c, c)?;
        let v = g.slice_channels(qkv, 2 * c, c)?;
        let q = g.reshape(q, [n, h, d, hw])?;
        let k = g.reshape(k, [n, h, d, hw])?;
        let v = g.reshape(v, [n, h, d, hw])?;
        let q = g.l2_normalize(q);
        let k = g.l2_normalize(k);
        let logits = g.matmul(q, k, false, true)?;
        let logits = g.mul(logits, p[self.temperature])?;
        let attn = g.softmax(logits, 3)?;
        let out = g.matmul(attn, v, false, false)?;
        let out = g.reshape(out, [n, c, hh, ww])?;
        Ok((self.proj.forward(g, p, out)?, attn))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        Ok(self.forward_with_map(g, p, x)?.0)
    }
}

/// Hidden width of the gated feed-forward network for `channels` inputs.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    ((channels as f64 * expansion).round() as usize).max(1)
}

/// Gated depthwise-conv feed-forward network.
#[derive(Clone, Debug)]
pub struct Gdfn {
    pub hidden: usize,
    pub project_in: Conv,
    pub dwconv: Conv,
    pub project_out: Conv,
}

impl Gdfn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, expansion: f64) -> Result<Self> {
        let hidden = ffn_hidden(channels, expansion);
        let h2 = 2 * hidden;
        Ok(Gdfn {
            hidden,
            project_in: Conv::pointwise(store, &format!("{name}.project_in"), channels, h2)?,
            dwconv: Conv::new(
                store,
                &format!("{name}.dwconv"),
                h2,
                h2,
                3,
                ConvSpec::depthwise(3, h2),
                true,
            )?,
            project_out: Conv::pointwise(store, &format!("{name}.project_out"), hidden, channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = self.project_in.forward(g, p, x)?;
        let y = self.dwconv.forward(g, p, y)?;
        let gate = g.slice_channels(y, 0, self.hidden)?;
        let value = g.slice_channels(y, self.hidden, self.hidden)?;
        let gate = g.gelu(gate);
        let y = g.mul(gate, value)?;
        self.project_out.forward(g, p, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaOrder {
    SpatialFirst,
    ChannelFirst,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SctbConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub ffn_expansion: f64,
    pub spatial: bool,
    pub channel: bool,
    pub order: SaOrder,
}

#[derive(Clone, Debug)]
pub struct SpatialStage {
    pub norm_attn: Norm,
    pub attn: SpatialWindowAttention,
    pub norm_ffn: Norm,
    pub ffn: Gdfn,
}

#[derive(Clone, Debug)]
pub struct ChannelStage {
    pub norm_attn: Norm,
    pub attn: ChannelAttention,
    pub norm_ffn: Norm,
    pub ffn: Gdfn,
}

/// Spatial-channel transformer block.
#[derive(Clone, Debug)]
pub struct Sctb {
    pub cfg: SctbConfig,
    pub spatial: Option<SpatialStage>,
    pub channel: Option<ChannelStage>,
}

impl Sctb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: SctbConfig) -> Result<Self> {
        if !cfg.spatial && !cfg.channel {
            return Err(Error::config("a transformer block needs spatial or channel attention"));
        }
        let c = cfg.channels;
        let spatial = if cfg.spatial {
            let n = format!("{name}.spatial");
            Some(SpatialStage {
                norm_attn: Norm::new(store, &format!("{n}.norm_attn"), c)?,
                attn: SpatialWindowAttention::new(store, &format!("{n}.attn"), c, cfg.heads)?,
                norm_ffn: Norm::new(store, &format!("{n}.norm_ffn"), c)?,
                ffn: Gdfn::new(store, &format!("{n}.ffn"), c, cfg.ffn_expansion)?,
            })
        } else {
            None
        };
        let channel = if cfg.channel {
            let n = format!("{name}.channel");
            Some(ChannelStage {
                norm_attn: Norm::new(store, &format!("{n}.norm_attn"), c)?,
                attn: ChannelAttention::new(store, &format!("{n}.attn"), c, cfg.heads)?,
                norm_ffn: Norm::new(store, &format!("{n}.norm_ffn"), c)?,
                ffn: Gdfn::new(store, &format!("{n}.ffn"), c, cfg.ffn_expansion)?,
            })
        } else {
            None
        };
        Ok(Sctb { cfg, spatial, channel })
    }

    fn spatial_stage<T: Scalar>(&self, s: &SpatialStage, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = s.norm_attn.forward(g, p, x)?;
        let (win, layout) = window_partition(g, y, self.cfg.window)?;
        let win = s.attn.forward(g, p, win)?;
        let y = window_merge(g, win, &layout)?;
        let x = g.add(x, y)?;
        let y = s.norm_ffn.forward(g, p, x)?;
        let y = s.ffn.forward(g, p, y)?;
        g.add(x, y)
    }

    fn channel_stage<T: Scalar>(&self, s: &ChannelStage, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = s.norm_attn.forward(g, p, x)?;
        let y = s.attn.forward(g, p, y)?;
        let x = g.add(x, y)?;
        let y = s.norm_ffn.forward(g, p, x)?;
        let y = s.ffn.forward(g, p, y)?;
        g.add(x, y)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
        let mut x = x;
        let spatial_first = self.cfg.order == SaOrder::SpatialFirst;
        for step in 0..2 {
            let run_spatial = (step == 0) == spatial_first;
            if run_spatial {
                if let Some(s) = &self.spatial {
                    x = self.spatial_stage(s, g, p, x)?;
                }
            } else if let Some(s) = &self.channel {
                x = self.channel_stage(s, g, p, x)?;
            }
        }
        Ok(x)
    }
}
