//! Naive reference implementations shared by the integration tests.
//!
//! Everything here is written with plain index loops over `Tensor::at` so it
//! shares no code with the kernels under test.

#![allow(dead_code, clippy::needless_range_loop)]

use dpcnet_core::attention::{ChannelAttention, Gdfn, SaOrder, Sctb, SpatialWindowAttention};
use dpcnet_core::layers::{Conv, Norm};
use dpcnet_core::net::{Afm, DdBlock, DpcNet, FfeBlock, Fuse, SfeBlock, LEVELS};
use std::f64::consts::PI;

use dpcnet_core::fft::SpectrumTensor;
use dpcnet_core::{Graph, ParamStore, Tensor};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Replaces every parameter with `U(-0.5, 0.5)` so zero-initialized biases
/// take part in the comparison.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.value = Tensor::rand_uniform(p.value.shape(), -0.5, 0.5, &mut r);
    }
}

pub fn set_zero(store: &mut ParamStore<f64>, conv: &Conv) {
    let w = store.get_mut(conv.weight);
    w.value = Tensor::zeros(w.value.shape());
    if let Some(b) = conv.bias {
        let b = store.get_mut(b);
        b.value = Tensor::zeros(b.value.shape());
    }
}

/// Runs `f` on a fresh graph with frozen parameters and returns its value.
pub fn eval<F>(store: &ParamStore<f64>, inputs: &[&Tensor<f64>], f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Graph<f64>, &dpcnet_core::Bindings, &[dpcnet_core::Var]) -> dpcnet_core::Result<dpcnet_core::Var>,
{
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let vars: Vec<_> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let out = f(&mut g, &p, &vars).unwrap();
    g.value(out).clone()
}

pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shapes differ");
    let d = a.max_abs_diff(b);
    assert!(d < tol, "{what}: max abs difference {d:e} exceeds {tol:e}");
}

/// Max abs difference relative to the largest reference magnitude (at least 1).
pub fn assert_rel_close(a: &Tensor<f64>, reference: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), reference.shape(), "{what}: shapes differ");
    let scale = reference.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let rel = a.max_abs_diff(reference) / scale;
    assert!(rel < tol, "{what}: relative difference {rel:e} exceeds {tol:e}");
}

// ---- elementwise -------------------------------------------------------

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn map(x: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h, w], |a, b, y, xx| f(x.at(a, b, y, xx)))
}

/// Elementwise binary op with size-1 broadcasting on either side.
pub fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    let shape: [usize; 4] = std::array::from_fn(|i| sa[i].max(sb[i]));
    let pick =
        |s: [usize; 4], i: [usize; 4]| -> [usize; 4] { std::array::from_fn(|k| if s[k] == 1 { 0 } else { i[k] }) };
    Tensor::from_fn(shape, |n, c, y, x| {
        let i = [n, c, y, x];
        let [an, ac, ay, ax] = pick(sa, i);
        let [bn, bc, by, bx] = pick(sb, i);
        f(a.at(an, ac, ay, ax), b.at(bn, bc, by, bx))
    })
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    zip(a, b, |u, v| u + v)
}

pub fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    zip(a, b, |u, v| u * v)
}

pub fn channels(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let [n, _, h, w] = x.shape();
    Tensor::from_fn([n, len, h, w], |a, c, y, xx| x.at(a, start + c, y, xx))
}

pub fn cat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, ca, h, w] = a.shape();
    let cb = b.shape()[1];
    Tensor::from_fn([n, ca + cb, h, w], |i, c, y, x| {
        if c < ca {
            a.at(i, c, y, x)
        } else {
            b.at(i, c - ca, y, x)
        }
    })
}

// ---- convolution and normalization ------------------------------------

pub fn conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape();
    let [oc, cg, k, _] = w.shape();
    assert_eq!(cg * groups, c);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let per_group = oc / groups;
    Tensor::from_fn([n, oc, oh, ow], |b, o, oy, ox| {
        let grp = o / per_group;
        let mut acc = bias.map_or(0.0, |t| t.at(0, o, 0, 0));
        for ci in 0..cg {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(b, grp * cg + ci, iy as usize, ix as usize) * w.at(o, ci, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

pub fn conv_layer(store: &ParamStore<f64>, layer: &Conv, x: &Tensor<f64>) -> Tensor<f64> {
    let w = &store.get(layer.weight).value;
    let b = layer.bias.map(|id| &store.get(id).value);
    conv(x, w, b, layer.spec.stride, layer.spec.padding, layer.spec.groups)
}

pub fn layer_norm(x: &Tensor<f64>, scale: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ci, y, xx| {
        let vals: Vec<f64> = (0..c).map(|k| x.at(b, k, y, xx)).collect();
        let mean = vals.iter().sum::<f64>() / c as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        (x.at(b, ci, y, xx) - mean) / (var + 1e-5).sqrt() * scale.at(0, ci, 0, 0) + bias.at(0, ci, 0, 0)
    })
}

pub fn norm_layer(store: &ParamStore<f64>, norm: &Norm, x: &Tensor<f64>) -> Tensor<f64> {
    layer_norm(x, &store.get(norm.scale).value, &store.get(norm.bias).value)
}

fn softmax_rows(rows: &mut [Vec<f64>]) {
    for row in rows {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
    }
}

// ---- windows -------------------------------------------------------------

/// Window `(b, wy, wx)` lands at batch index `(b * gh + wy) * gw + wx`.
pub fn partition(x: &Tensor<f64>, ws: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let (gh, gw) = (h.div_ceil(ws), w.div_ceil(ws));
    Tensor::from_fn([n * gh * gw, c, ws, ws], |i, ch, y, xx| {
        let (b, rest) = (i / (gh * gw), i % (gh * gw));
        let (iy, ix) = ((rest / gw) * ws + y, (rest % gw) * ws + xx);
        if iy < h && ix < w {
            x.at(b, ch, iy, ix)
        } else {
            0.0
        }
    })
}

pub fn merge(win: &Tensor<f64>, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let [_, c, ws, _] = win.shape();
    let (gh, gw) = (h.div_ceil(ws), w.div_ceil(ws));
    Tensor::from_fn([n, c, h, w], |b, ch, y, x| {
        win.at((b * gh + y / ws) * gw + x / ws, ch, y % ws, x % ws)
    })
}

// ---- attention -----------------------------------------------------------

/// Token `t` of a window is pixel `(t / ww, t % ww)`; head `h` owns channels
/// `[h d, (h + 1) d)`.
pub fn spatial_attention(store: &ParamStore<f64>, attn: &SpatialWindowAttention, win: &Tensor<f64>) -> Tensor<f64> {
    let [b, c, wh, ww] = win.shape();
    let heads = attn.cfg.heads;
    let d = c / heads;
    let t = wh * ww;
    let qkv = conv_layer(store, &attn.qkv, win);
    let tok = |bi: usize, ch: usize, i: usize| qkv.at(bi, ch, i / ww, i % ww);
    let mut out = Tensor::zeros([b, c, wh, ww]);
    for bi in 0..b {
        for hd in 0..heads {
            let mut logits: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    (0..t)
                        .map(|j| {
                            (0..d)
                                .map(|k| tok(bi, hd * d + k, i) * tok(bi, c + hd * d + k, j))
                                .sum::<f64>()
                                / (d as f64).sqrt()
                        })
                        .collect()
                })
                .collect();
            softmax_rows(&mut logits);
            for i in 0..t {
                for k in 0..d {
                    let v: f64 = (0..t).map(|j| logits[i][j] * tok(bi, 2 * c + hd * d + k, j)).sum();
                    out.set(bi, hd * d + k, i / ww, i % ww, v);
                }
            }
        }
    }
    conv_layer(store, &attn.proj, &out)
}

pub fn channel_attention(store: &ParamStore<f64>, attn: &ChannelAttention, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let heads = attn.cfg.heads;
    let d = c / heads;
    let qkv = conv_layer(store, &attn.qkv_dw, &conv_layer(store, &attn.qkv, x));
    let temp = &store.get(attn.temperature).value;
    let row = |b: usize, ch: usize| -> Vec<f64> { (0..h * w).map(|p| qkv.at(b, ch, p / w, p % w)).collect() };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let norm = (v.iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
        v.into_iter().map(|a| a / norm).collect()
    };
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for hd in 0..heads {
            let q: Vec<Vec<f64>> = (0..d).map(|i| unit(row(b, hd * d + i))).collect();
            let k: Vec<Vec<f64>> = (0..d).map(|i| unit(row(b, c + hd * d + i))).collect();
            let v: Vec<Vec<f64>> = (0..d).map(|i| row(b, 2 * c + hd * d + i)).collect();
            let mut a: Vec<Vec<f64>> = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>() * temp.at(0, hd, 0, 0))
                        .collect()
                })
                .collect();
            softmax_rows(&mut a);
            for i in 0..d {
                for p in 0..h * w {
                    let val: f64 = (0..d).map(|j| a[i][j] * v[j][p]).sum();
                    out.set(b, hd * d + i, p / w, p % w, val);
                }
            }
        }
    }
    conv_layer(store, &attn.proj, &out)
}

pub fn gdfn(store: &ParamStore<f64>, ffn: &Gdfn, x: &Tensor<f64>) -> Tensor<f64> {
    let y = conv_layer(store, &ffn.dwconv, &conv_layer(store, &ffn.project_in, x));
    let gate = map(&channels(&y, 0, ffn.hidden), gelu);
    let value = channels(&y, ffn.hidden, ffn.hidden);
    conv_layer(store, &ffn.project_out, &mul(&gate, &value))
}

pub fn sctb(store: &ParamStore<f64>, block: &Sctb, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, _, h, w] = x.shape();
    let spatial = |x: Tensor<f64>| -> Tensor<f64> {
        let Some(s) = &block.spatial else { return x };
        let win = partition(&norm_layer(store, &s.norm_attn, &x), block.cfg.window);
        let y = merge(&spatial_attention(store, &s.attn, &win), n, h, w);
        let x = add(&x, &y);
        let y = gdfn(store, &s.ffn, &norm_layer(store, &s.norm_ffn, &x));
        add(&x, &y)
    };
    let channel = |x: Tensor<f64>| -> Tensor<f64> {
        let Some(s) = &block.channel else { return x };
        let y = channel_attention(store, &s.attn, &norm_layer(store, &s.norm_attn, &x));
        let x = add(&x, &y);
        let y = gdfn(store, &s.ffn, &norm_layer(store, &s.norm_ffn, &x));
        add(&x, &y)
    };
    match block.cfg.order {
        SaOrder::SpatialFirst => channel(spatial(x.clone())),
        SaOrder::ChannelFirst => spatial(channel(x.clone())),
    }
}

// ---- fusion and blocks -----------------------------------------------------

pub fn afm_spatial_map(store: &ParamStore<f64>, afm: &Afm, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let pooled = Tensor::from_fn([n, 2, h, w], |b, k, y, xx| {
        let vals = (0..c).map(|ch| x.at(b, ch, y, xx));
        if k == 0 {
            vals.sum::<f64>() / c as f64
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    map(&conv_layer(store, &afm.spatial_conv, &pooled), sigmoid)
}

pub fn afm_channel_map(store: &ParamStore<f64>, afm: &Afm, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let pooled = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
        (0..h)
            .flat_map(|y| (0..w).map(move |xx| (y, xx)))
            .map(|(y, xx)| x.at(b, ch, y, xx))
            .sum::<f64>()
            / (h * w) as f64
    });
    let hidden = map(&conv_layer(store, &afm.channel_reduce, &pooled), |v| v.max(0.0));
    map(&conv_layer(store, &afm.channel_expand, &hidden), sigmoid)
}

/// The two pre-convolution sums of the fusion.
pub fn afm_sums(store: &ParamStore<f64>, afm: &Afm, b1: &Tensor<f64>, b2: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (sa1, sa2) = (afm_spatial_map(store, afm, b1), afm_spatial_map(store, afm, b2));
    let (ca1, ca2) = (afm_channel_map(store, afm, b1), afm_channel_map(store, afm, b2));
    let first = add(&mul(b1, &sa2), &mul(b2, &ca1));
    let second = add(&mul(b1, &ca2), &mul(b2, &sa1));
    (first, second)
}

pub fn afm(store: &ParamStore<f64>, afm: &Afm, b1: &Tensor<f64>, b2: &Tensor<f64>) -> Tensor<f64> {
    let (s1, s2) = afm_sums(store, afm, b1, b2);
    let f1 = conv_layer(store, &afm.first, &s1);
    let f2 = conv_layer(store, &afm.second, &s2);
    conv_layer(store, &afm.out, &cat(&f1, &f2))
}

pub fn fuse(store: &ParamStore<f64>, f: &Fuse, b1: &Tensor<f64>, b2: &Tensor<f64>) -> Tensor<f64> {
    match f {
        Fuse::Afm(a) => afm(store, a, b1, b2),
        Fuse::Concat(c) => conv_layer(store, c, &cat(b1, b2)),
    }
}

pub fn sfe(store: &ParamStore<f64>, block: &SfeBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let a = sctb(store, &block.transformer, x);
    let local = map(&conv_layer(store, &block.local_first, x), gelu);
    let local = map(&conv_layer(store, &block.local_second, &local), gelu);
    fuse(store, &block.fuse, &a, &local)
}

/// Spectral path through the library FFT, which is checked separately
/// against a direct DFT.
pub fn ffe(store: &ParamStore<f64>, block: &FfeBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let w = x.shape()[3];
    let y = conv_layer(store, &block.conv_in, x);
    let s = dpcnet_core::fft::rfft2_stacked(&y).unwrap();
    let s = map(&conv_layer(store, &block.spectral_first, &s), |v| v.max(0.0));
    let s = conv_layer(store, &block.spectral_second, &s);
    let y = dpcnet_core::fft::irfft2_stacked(&s, w).unwrap();
    add(x, &conv_layer(store, &block.conv_out, &y))
}

pub fn dd(store: &ParamStore<f64>, block: &DdBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let s = sfe(store, &block.spatial, x);
    let y = match &block.frequency {
        Some((f, fz)) => fuse(store, fz, &s, &ffe(store, f, x)),
        None => s,
    };
    add(&y, x)
}

pub fn upsample2(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 2 * h, 2 * w], |b, ch, y, xx| x.at(b, ch, y / 2, xx / 2))
}

pub fn dpcnet(store: &ParamStore<f64>, net: &DpcNet, rainy: &Tensor<f64>) -> Tensor<f64> {
    let mut x = conv_layer(store, &net.stem, rainy);
    let mut skips = Vec::new();
    for level in 0..LEVELS {
        for b in &net.encoder[level] {
            x = dd(store, b, &x);
        }
        if level + 1 < LEVELS {
            skips.push(x.clone());
            x = conv_layer(store, &net.down[level], &x);
        }
    }
    for level in (0..LEVELS - 1).rev() {
        let up = conv_layer(store, &net.up[level], &upsample2(&x));
        x = conv_layer(store, &net.skip[level], &cat(&up, &skips[level]));
        for b in &net.decoder[level] {
            x = dd(store, b, &x);
        }
    }
    add(rainy, &conv_layer(store, &net.head, &x))
}

// ---- metrics ---------------------------------------------------------------

/// BT.601 luma of pixel `(y, x)` written out from its coefficients.
pub fn luma(img: &Tensor<f64>, b: usize, y: usize, x: usize) -> f64 {
    16.0 / 255.0 + (65.481 * img.at(b, 0, y, x) + 128.553 * img.at(b, 1, y, x) + 24.966 * img.at(b, 2, y, x)) / 255.0
}

pub fn literal_psnr_y(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, _, h, w] = a.shape();
    let mut se = 0.0;
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let d = luma(a, i, y, x) - luma(b, i, y, x);
                se += d * d;
            }
        }
    }
    let mse = se / (n * h * w) as f64;
    10.0 * (1.0 / mse).log10()
}

/// Mean over every 11x11 window position of the SSIM index, with local
/// statistics taken directly from their definitions under a normalized 2-D
/// Gaussian weight.
pub fn literal_ssim_y(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, _, h, w] = a.shape();
    let (k, sigma) = (11usize, 1.5f64);
    let mut weights = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (dy, row) in weights.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (ry, rx) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(ry * ry + rx * rx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        for top in 0..=h - k {
            for left in 0..=w - k {
                let window = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += weights[dy][dx] / total * f(top + dy, left + dx);
                        }
                    }
                    acc
                };
                let mx = window(&|y, x| luma(a, i, y, x));
                let my = window(&|y, x| luma(b, i, y, x));
                let vx = window(&|y, x| (luma(a, i, y, x) - mx).powi(2));
                let vy = window(&|y, x| (luma(b, i, y, x) - my).powi(2));
                let cov = window(&|y, x| (luma(a, i, y, x) - mx) * (luma(b, i, y, x) - my));
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// The checked-in metric fixtures as `(rainy, clean)` in `f64`.
pub fn metric_fixtures() -> Vec<(Tensor<f64>, Tensor<f64>)> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics");
    (0..5)
        .map(|i| {
            let load = |side: &str| {
                dpcnet_core::data::load_png(&root.join(side).join(format!("pair_{i:03}.png")))
                    .unwrap()
                    .cast::<f64>()
            };
            (load("rainy"), load("clean"))
        })
        .collect()
}

// ---- spectra ---------------------------------------------------------------

/// Direct double sum over every pixel for one bin.
pub fn naive_bin(x: &Tensor<f64>, n: usize, c: usize, ky: usize, kx: usize) -> Complex<f64> {
    let [_, _, h, w] = x.shape();
    let mut acc = Complex::new(0.0, 0.0);
    for y in 0..h {
        for xx in 0..w {
            let phase = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
            acc += Complex::from_polar(x.at(n, c, y, xx), phase);
        }
    }
    acc
}

/// Full-plane energy recovered from the stored half: interior columns stand
/// in for their conjugate mirror as well.
pub fn spectrum_energy(s: &SpectrumTensor<f64>) -> f64 {
    let [n, c, h, wf] = s.shape();
    let w = s.width();
    let mut e = 0.0;
    for ni in 0..n {
        for ci in 0..c {
            for ky in 0..h {
                for kx in 0..wf {
                    let mult = if kx == 0 || 2 * kx == w { 1.0 } else { 2.0 };
                    e += mult * s.bin(ni, ci, ky, kx).norm_sqr();
                }
            }
        }
    }
    e
}
