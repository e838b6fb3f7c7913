//! Forward and backward compute kernels over plain tensors.
//!
//! These are the numerical building blocks; [`Graph`](crate::Graph) wires
//! them into differentiable operations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Below this many multiply-adds a plain loop beats packing for GEMM.
const SMALL_GEMM: usize = 4096;

/// `c (m x n) = op(a) * op(b)`, optionally accumulating into `c`.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is stored `k x n`
/// (or `n x k` when `tb`). All row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    if m * n * k <= SMALL_GEMM {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        if tb {
            // Rows of `b` are contiguous along `k`: use dot products.
            for i in 0..m {
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let dot: T = if ta {
                        brow.iter().enumerate().map(|(p, &bv)| a[p * m + i] * bv).sum()
                    } else {
                        a[i * k..(i + 1) * k].iter().zip(brow).map(|(&av, &bv)| av * bv).sum()
                    };
                    c[i * n + j] += dot;
                }
            }
        } else {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * rsa + p * csa];
                    if av == T::zero() {
                        continue;
                    }
                    for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths were checked against the logical extents above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched matrix product over the trailing two axes.
///
/// The leading two axes are batch axes and must agree. With `ta`/`tb`
/// the corresponding operand is transposed before multiplication.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let sa = a.shape();
    let sb = b.shape();
    let (m, ka) = if ta { (sa[3], sa[2]) } else { (sa[2], sa[3]) };
    let (kb, n) = if tb { (sb[3], sb[2]) } else { (sb[2], sb[3]) };
    if sa[0] != sb[0] || sa[1] != sb[1] || ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: sa,
            rhs: sb,
        });
    }
    let batches = sa[0] * sa[1];
    let mut out = Tensor::zeros([sa[0], sa[1], m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for bi in 0..batches {
        gemm(
            m,
            ka,
            n,
            &ad[bi * m * ka..],
            ta,
            &bd[bi * ka * n..],
            tb,
            &mut od[bi * m * n..(bi + 1) * m * n],
            false,
        );
    }
    Ok(out)
}

/// Gradients for the two operands of a product; `None` where not requested.
pub type OptionalGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of `matmul(a, b, ta, tb)` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    gc: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<OptionalGrads<T>> {
    let ga = if need_a {
        Some(if ta {
            matmul(b, gc, tb, true)?
        } else {
            matmul(gc, b, false, !tb)?
        })
    } else {
        None
    };
    let gb = if need_b {
        Some(if tb {
            matmul(gc, a, true, ta)?
        } else {
            matmul(a, gc, !ta, false)?
        })
    } else {
        None
    };
    Ok((ga, gb))
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub const fn same(kernel: usize) -> Self {
        ConvSpec::new(1, kernel / 2)
    }

    pub const fn depthwise(kernel: usize, channels: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
            groups: channels,
        }
    }

    /// Output extent along one axis (floor semantics).
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return Err(Error::config(format!(
                "convolution with kernel {kernel}, stride {}, padding {} has no output for extent {input}",
                self.stride, self.padding
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    og: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn new(xs: Shape, ws: Shape, spec: ConvSpec) -> Result<Self> {
        let [n, c, h, w] = xs;
        let [o, cg, kh, kw] = ws;
        let g = spec.groups;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::config(format!(
                "convolution kernel must be square with odd side, got {kh}x{kw}"
            )));
        }
        if g == 0 || c % g != 0 || o % g != 0 || cg != c / g {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            ho: spec.out_extent(h, kh)?,
            wo: spec.out_extent(w, kw)?,
            cg,
            og: o / g,
            spec,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn direct(&self) -> bool {
        self.spec.stride == 1 && self.cg * self.og <= 4
    }

    fn col_rows(&self) -> usize {
        self.cg * self.k * self.k
    }

    /// Output columns `[lo, hi)` whose input column for tap `kx` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let shift = kx as isize - self.spec.padding as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(s) };
        let limit = self.w as isize - shift;
        let hi = if limit <= 0 {
            0
        } else {
            (((limit - 1) as usize) / s + 1).min(self.wo)
        };
        (lo.min(hi), hi)
    }

    /// Unfolds input channels `[c0, c0 + cg)` of one image into `col`.
    fn im2col<T: Scalar>(&self, x: &[T], c0: usize, col: &mut [T]) {
        let (k, s, p) = (self.k, self.spec.stride, self.spec.padding as isize);
        let plane = self.ho * self.wo;
        for ci in 0..self.cg {
            let xc = &x[(c0 + ci) * self.h * self.w..];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * plane;
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let ix0 = (lo * s) as isize + kx as isize - p;
                        if s == 1 {
                            let ix0 = ix0 as usize;
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 as usize + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `col` back into `gx`.
    fn col2im<T: Scalar>(&self, col: &[T], c0: usize, gx: &mut [T]) {
        let (k, s, p) = (self.k, self.spec.stride, self.spec.padding as isize);
        let plane = self.ho * self.wo;
        for ci in 0..self.cg {
            let gxc = &mut gx[(c0 + ci) * self.h * self.w..(c0 + ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * plane;
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &col[row + oy * self.wo + lo..row + oy * self.wo + hi];
                        let dst = &mut gxc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let ix0 = ((lo * s) as isize + kx as isize - p) as usize;
                        for (j, &v) in src.iter().enumerate() {
                            dst[ix0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `kk` at stride 1.
    fn tap_range(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        let p = self.spec.padding as isize;
        let shift = kk as isize - p;
        let lo = (-shift).max(0) as usize;
        let hi = ((extent as isize - shift).min(out as isize)).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// 2-D cross-correlation. `w` has shape `O x (C / groups) x k x k`; `bias`
/// (if any) has shape `1 x O x 1 x 1`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [1, g.o, 1, 1] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
    }
    let plane = g.ho * g.wo;
    let mut out = Tensor::zeros([g.n, g.o, g.ho, g.wo]);
    let (xd, wd) = (x.data(), w.data());
    {
        let od = out.data_mut();
        if g.direct() {
            direct_forward(&g, xd, wd, od);
        } else {
            let rows = g.col_rows();
            let mut col = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); rows * plane]
            };
            for ni in 0..g.n {
                let xi = &xd[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
                for gi in 0..spec.groups {
                    let c0 = gi * g.cg;
                    let src: &[T] = if g.pointwise() {
                        &xi[c0 * plane..(c0 + g.cg) * plane]
                    } else {
                        g.im2col(xi, c0, &mut col);
                        &col
                    };
                    let o0 = ni * g.o + gi * g.og;
                    gemm(
                        g.og,
                        rows,
                        plane,
                        &wd[gi * g.og * rows..],
                        false,
                        src,
                        false,
                        &mut od[o0 * plane..(o0 + g.og) * plane],
                        false,
                    );
                }
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for ni in 0..g.n {
                for oc in 0..g.o {
                    let bv = bd[oc];
                    od[(ni * g.o + oc) * plane..(ni * g.o + oc + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
    }
    Ok(out)
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Direct stride-1 convolution, used when each group maps few channels
/// (depthwise convs, the single-output spatial attention conv) and
/// unfolding would cost more than the arithmetic.
fn direct_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (k, p) = (g.k, g.spec.padding);
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for ni in 0..g.n {
        for oc in 0..g.o {
            let c0 = (oc / g.og) * g.cg;
            let dst_plane = &mut out[(ni * g.o + oc) * ohw..(ni * g.o + oc + 1) * ohw];
            for ci in 0..g.cg {
                let xc = &x[(ni * g.c + c0 + ci) * hw..(ni * g.c + c0 + ci + 1) * hw];
                for ky in 0..k {
                    let (y0, y1) = g.tap_range(ky, g.h, g.ho);
                    for kx in 0..k {
                        let wv = w[((oc * g.cg + ci) * k + ky) * k + kx];
                        let (x0, x1) = g.tap_range(kx, g.w, g.wo);
                        // An empty column range may start past the plane end.
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            let src = &xc[iy * g.w + x0 + kx - p..iy * g.w + x1 + kx - p];
                            let dst = &mut dst_plane[oy * g.wo + x0..oy * g.wo + x1];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (k, p) = (g.k, g.spec.padding);
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for ni in 0..g.n {
        for oc in 0..g.o {
            let c0 = (oc / g.og) * g.cg;
            let gyc = &gy[(ni * g.o + oc) * ohw..(ni * g.o + oc + 1) * ohw];
            for ci in 0..g.cg {
                let base_in = (ni * g.c + c0 + ci) * hw;
                for ky in 0..k {
                    let (y0, y1) = g.tap_range(ky, g.h, g.ho);
                    for kx in 0..k {
                        let widx = ((oc * g.cg + ci) * k + ky) * k + kx;
                        let (x0, x1) = g.tap_range(kx, g.w, g.wo);
                        if x0 == x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let xs = base_in + (oy + ky - p) * g.w + x0 + kx - p;
                            let gys = &gyc[oy * g.wo + x0..oy * g.wo + x1];
                            if gw.is_some() {
                                acc += dot(&x[xs..xs + (x1 - x0)], gys);
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let wv = w[widx];
                                for (d, &s) in gx[xs..xs + (x1 - x0)].iter_mut().zip(gys) {
                                    *d += wv * s;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: ConvSpec,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let plane = g.ho * g.wo;
    let mut gx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_w.then(|| Tensor::zeros(w.shape()));
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    if g.direct() {
        direct_backward(
            &g,
            xd,
            wd,
            gyd,
            gx.as_mut().map(|t| t.data_mut()),
            gw.as_mut().map(|t| t.data_mut()),
        );
    } else if need_x || need_w {
        let rows = g.col_rows();
        let mut col = vec![T::zero(); if g.pointwise() { 0 } else { rows * plane }];
        let mut gcol = vec![T::zero(); if g.pointwise() { 0 } else { rows * plane }];
        for ni in 0..g.n {
            let xi = &xd[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
            for gi in 0..spec.groups {
                let c0 = gi * g.cg;
                let o0 = ni * g.o + gi * g.og;
                let gyg = &gyd[o0 * plane..(o0 + g.og) * plane];
                let wg = &wd[gi * g.og * rows..(gi + 1) * g.og * rows];
                if let Some(gw) = gw.as_mut() {
                    let src: &[T] = if g.pointwise() {
                        &xi[c0 * plane..(c0 + g.cg) * plane]
                    } else {
                        g.im2col(xi, c0, &mut col);
                        &col
                    };
                    gemm(
                        g.og,
                        plane,
                        rows,
                        gyg,
                        false,
                        src,
                        true,
                        &mut gw.data_mut()[gi * g.og * rows..(gi + 1) * g.og * rows],
                        true,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    let gxi = &mut gx.data_mut()[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
                    if g.pointwise() {
                        gemm(
                            rows,
                            g.og,
                            plane,
                            wg,
                            true,
                            gyg,
                            false,
                            &mut gxi[c0 * plane..(c0 + g.cg) * plane],
                            true,
                        );
                    } else {
                        gemm(rows, g.og, plane, wg, true, gyg, false, &mut gcol, false);
                        g.col2im(&gcol, c0, gxi);
                    }
                }
            }
        }
    }
    let gb = need_b.then(|| {
        let mut gb = Tensor::zeros([1, g.o, 1, 1]);
        let bd = gb.data_mut();
        for ni in 0..g.n {
            for oc in 0..g.o {
                bd[oc] += gyd[(ni * g.o + oc) * plane..(ni * g.o + oc + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        gb
    });
    Ok((gx, gw, gb))
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: Shape, axis: usize) -> Result<(usize, usize, usize)> {
    if axis > 3 {
        return Err(Error::contract(format!("axis {axis} out of range for rank 4")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut y = x.clone();
    let yd = y.data_mut();
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let mut mx = T::neg_infinity();
            for i in 0..len {
                mx = mx.max(yd[idx(i)]);
            }
            let mut total = T::zero();
            for i in 0..len {
                let e = (yd[idx(i)] - mx).exp();
                yd[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                yd[idx(i)] /= total;
            }
        }
    }
    Ok(y)
}

/// `gx = y * (gy - sum(gy * y))` along `axis`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gyd) = (y.data(), gy.data());
    let gxd = gx.data_mut();
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let dot: T = (0..len).map(|i| yd[idx(i)] * gyd[idx(i)]).sum();
            for i in 0..len {
                gxd[idx(i)] = yd[idx(i)] * (gyd[idx(i)] - dot);
            }
        }
    }
    Ok(gx)
}

/// Saved statistics of a channel layer norm, needed by the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormStats<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes over the channel axis at every spatial position, then applies
/// per-channel `scale` and `bias` (both `1 x C x 1 x 1`).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    let [n, c, h, w] = x.shape();
    if scale.shape() != [1, c, 1, 1] || bias.shape() != [1, c, 1, 1] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape(),
            rhs: scale.shape(),
        });
    }
    let plane = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(eps);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); n * plane];
    let (xd, sd, bd) = (x.data(), scale.data(), bias.data());
    let mut mean = vec![T::zero(); plane];
    let mut var = vec![T::zero(); plane];
    for ni in 0..n {
        let base = ni * c * plane;
        mean.iter_mut().for_each(|v| *v = T::zero());
        var.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xd[base + ci * plane..base + (ci + 1) * plane]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ci in 0..c {
            let row = &xd[base + ci * plane..base + (ci + 1) * plane];
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                let d = v - m;
                *s += d * d;
            }
        }
        let istd = &mut inv_std[ni * plane..(ni + 1) * plane];
        for (is, &s) in istd.iter_mut().zip(&var) {
            *is = T::one() / (s * inv_c + eps).sqrt();
        }
        for ci in 0..c {
            let range = base + ci * plane..base + (ci + 1) * plane;
            let (g, b) = (sd[ci], bd[ci]);
            let xh = &mut xhat.data_mut()[range.clone()];
            for (p, v) in xh.iter_mut().enumerate() {
                *v = (xd[base + ci * plane + p] - mean[p]) * istd[p];
            }
            let xh = &xhat.data()[range.clone()];
            for (yo, &v) in y.data_mut()[range].iter_mut().zip(xh) {
                *yo = v * g + b;
            }
        }
    }
    Ok((
        y,
        LayerNormStats {
            normalized: xhat,
            inv_std,
        },
    ))
}

/// Gradients of [`layer_norm`] with respect to input, scale and bias.
pub fn layer_norm_backward<T: Scalar>(
    stats: &LayerNormStats<T>,
    scale: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = gy.shape();
    let plane = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let (xh, sd, gyd) = (stats.normalized.data(), scale.data(), gy.data());
    let mut gx = Tensor::zeros(gy.shape());
    let mut gs = Tensor::zeros(scale.shape());
    let mut gb = Tensor::zeros(scale.shape());
    let mut mean_g = vec![T::zero(); plane];
    let mut mean_gx = vec![T::zero(); plane];
    for ni in 0..n {
        let base = ni * c * plane;
        mean_g.iter_mut().for_each(|v| *v = T::zero());
        mean_gx.iter_mut().for_each(|v| *v = T::zero());
        for (ci, &scale_c) in sd.iter().enumerate() {
            let off = base + ci * plane;
            let mut acc_s = T::zero();
            let mut acc_b = T::zero();
            for p in 0..plane {
                let gyv = gyd[off + p];
                let xv = xh[off + p];
                acc_s += gyv * xv;
                acc_b += gyv;
                let gv = gyv * scale_c;
                mean_g[p] += gv;
                mean_gx[p] += gv * xv;
            }
            gs.data_mut()[ci] += acc_s;
            gb.data_mut()[ci] += acc_b;
        }
        let istd = &stats.inv_std[ni * plane..(ni + 1) * plane];
        let gxd = gx.data_mut();
        for (ci, &scale_c) in sd.iter().enumerate() {
            let off = base + ci * plane;
            for p in 0..plane {
                let gv = gyd[off + p] * scale_c;
                gxd[off + p] = istd[p] * (gv - mean_g[p] * inv_c - xh[off + p] * mean_gx[p] * inv_c);
            }
        }
    }
    (gx, gs, gb)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h * factor, w * factor], |ni, ci, y, xx| {
        x.at(ni, ci, y / factor, xx / factor)
    })
}

pub fn upsample_nearest_backward<T: Scalar>(gy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = gy.shape();
    let mut gx = Tensor::zeros([n, c, h / factor, w / factor]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let i = gx.offset(ni, ci, y / factor, xx / factor);
                    gx.data_mut()[i] += gy.at(ni, ci, y, xx);
                }
            }
        }
    }
    gx
}

/// Non-overlapping average pooling with a square window.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!(
            "average pool factor {factor} does not divide {h}x{w}"
        )));
    }
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut y = Tensor::zeros([n, c, h / factor, w / factor]);
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let i = y.offset(ni, ci, yy / factor, xx / factor);
                    y.data_mut()[i] += x.at(ni, ci, yy, xx) * inv;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_backward<T: Scalar>(gy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let inv = T::of(1.0 / (factor * factor) as f64);
    let mut gx = upsample_nearest(gy, factor);
    gx.scale_in_place(inv);
    gx
}
