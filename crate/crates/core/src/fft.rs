//! Per-channel real 2-D FFT.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = sum_n x[n] exp(-2 pi i k.n / (H, W))`, and the inverse carries the
//! full `1 / (H W)` factor. Only the non-redundant half spectrum
//! `H x (W / 2 + 1)` of a real input is stored.
//!
//! Both extents must be powers of two (radix-2 Cooley-Tukey, rows then
//! columns).

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_pow2(extent: usize, axis: &str) -> Result<()> {
    if extent == 0 || !extent.is_power_of_two() {
        return Err(Error::config(format!(
            "FFT {axis} extent {extent} is not a power of two"
        )));
    }
    Ok(())
}

/// Precomputed twiddles for one transform length.
struct Plan<T> {
    n: usize,
    twiddles: Vec<Complex<T>>,
    inverse_twiddles: Vec<Complex<T>>,
}

impl<T: Scalar> Plan<T> {
    fn new(n: usize) -> Self {
        let twiddles: Vec<Complex<T>> = (0..n / 2)
            .map(|k| {
                let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(T::of(a.cos()), T::of(a.sin()))
            })
            .collect();
        let inverse_twiddles = twiddles.iter().map(|w| w.conj()).collect();
        Plan {
            n,
            twiddles,
            inverse_twiddles,
        }
    }

    /// In-place unnormalized transform; `inverse` flips the exponent sign.
    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                buf.swap(i, j);
            }
        }
        let tw = if inverse {
            &self.inverse_twiddles
        } else {
            &self.twiddles
        };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = tw[k * step];
                    let u = buf[start + k];
                    let v = buf[start + k + half] * w;
                    buf[start + k] = u + v;
                    buf[start + k + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// Unnormalized 1-D transform of a power-of-two length buffer.
pub fn fft_in_place<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) -> Result<()> {
    check_pow2(buf.len(), "length")?;
    Plan::new(buf.len()).run(buf, inverse);
    Ok(())
}

/// Transforms columns `[0, ncols)` of a row-major `h x w` plane.
fn fft_columns<T: Scalar>(
    plane: &mut [Complex<T>],
    w: usize,
    ncols: usize,
    plan: &Plan<T>,
    buf: &mut [Complex<T>],
    inverse: bool,
) {
    let h = buf.len();
    for c in 0..ncols {
        for r in 0..h {
            buf[r] = plane[r * w + c];
        }
        plan.run(buf, inverse);
        for r in 0..h {
            plane[r * w + c] = buf[r];
        }
    }
}

fn fft_rows<T: Scalar>(plane: &mut [Complex<T>], w: usize, plan: &Plan<T>, inverse: bool) {
    for r in plane.chunks_mut(w) {
        plan.run(r, inverse);
    }
}

/// Half spectrum of a real tensor in stacked layout: `N x 2C x H x (W/2+1)`
/// with real parts in channels `[0, C)` and imaginary parts in `[C, 2C)`.
pub fn rfft2_stacked<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    check_pow2(h, "height")?;
    check_pow2(w, "width")?;
    let wf = w / 2 + 1;
    let (rows, cols) = (Plan::new(w), Plan::new(h));
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut col_buf = plane[..h].to_vec();
    let mut out = Tensor::zeros([n, 2 * c, h, wf]);
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let src = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for (p, &v) in plane.iter_mut().zip(src) {
                *p = Complex::new(v, T::zero());
            }
            // Only the stored half of the columns needs the second pass.
            fft_rows(&mut plane, w, &rows, false);
            fft_columns(&mut plane, w, wf, &cols, &mut col_buf, false);
            let re_base = (ni * 2 * c + ci) * h * wf;
            let im_base = (ni * 2 * c + c + ci) * h * wf;
            let od = out.data_mut();
            for ky in 0..h {
                for kx in 0..wf {
                    let z = plane[ky * w + kx];
                    od[re_base + ky * wf + kx] = z.re;
                    od[im_base + ky * wf + kx] = z.im;
                }
            }
        }
    }
    Ok(out)
}

/// `scale * Re(IDFT_unnormalized(Z))` where `Z` is the stacked half
/// spectrum zero-filled to full width. With `hermitian` set, interior
/// columns are doubled, which turns this into the exact inverse of
/// [`rfft2_stacked`] when `scale = 1 / (H W)`.
fn half_to_real<T: Scalar>(s: &Tensor<T>, width: usize, hermitian: bool, scale: T) -> Result<Tensor<T>> {
    let [n, c2, h, wf] = s.shape();
    check_pow2(h, "height")?;
    check_pow2(width, "width")?;
    if c2 % 2 != 0 || wf != width / 2 + 1 {
        return Err(Error::contract(format!(
            "spectrum layout {:?} does not match target width {width}",
            s.shape()
        )));
    }
    let c = c2 / 2;
    let w = width;
    let (rows, cols) = (Plan::new(w), Plan::new(h));
    let zero = Complex::new(T::zero(), T::zero());
    let mut plane = vec![zero; h * w];
    let mut col_buf = plane[..h].to_vec();
    let mut out = Tensor::zeros([n, c, h, w]);
    let sd = s.data();
    let two = T::of(2.0);
    for ni in 0..n {
        for ci in 0..c {
            let re_base = (ni * c2 + ci) * h * wf;
            let im_base = (ni * c2 + c + ci) * h * wf;
            plane.iter_mut().for_each(|p| *p = zero);
            for ky in 0..h {
                for kx in 0..wf {
                    let weight = if hermitian && kx != 0 && 2 * kx != w {
                        two
                    } else {
                        T::one()
                    };
                    plane[ky * w + kx] =
                        Complex::new(sd[re_base + ky * wf + kx] * weight, sd[im_base + ky * wf + kx] * weight);
                }
            }
            // Columns past the half spectrum are zero, so transform columns first.
            fft_columns(&mut plane, w, wf, &cols, &mut col_buf, true);
            fft_rows(&mut plane, w, &rows, true);
            let dst = &mut out.data_mut()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for (d, z) in dst.iter_mut().zip(&plane) {
                *d = z.re * scale;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`rfft2_stacked`].
pub fn irfft2_stacked<T: Scalar>(s: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    let h = s.shape()[2];
    half_to_real(s, width, true, T::of(1.0 / (h * width) as f64))
}

/// Half-spectrum complex tensor, `N x C x H x (W/2+1)` bins stored as
/// interleaved `(re, im)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTensor<T> {
    shape: [usize; 4],
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> SpectrumTensor<T> {
    /// Bin extents `[N, C, H, W/2+1]`.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    /// Width of the real signal this spectrum came from.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn bin(&self, n: usize, c: usize, ky: usize, kx: usize) -> Complex<T> {
        let [_, cs, h, wf] = self.shape;
        let i = 2 * (((n * cs + c) * h + ky) * wf + kx);
        Complex::new(self.data[i], self.data[i + 1])
    }

    pub fn from_stacked(stacked: &Tensor<T>, width: usize) -> Result<Self> {
        let [n, c2, h, wf] = stacked.shape();
        if c2 % 2 != 0 || wf != width / 2 + 1 {
            return Err(Error::contract(format!(
                "stacked spectrum {:?} does not match width {width}",
                stacked.shape()
            )));
        }
        let c = c2 / 2;
        let sd = stacked.data();
        let mut data = Vec::with_capacity(2 * n * c * h * wf);
        for ni in 0..n {
            for ci in 0..c {
                let re = (ni * c2 + ci) * h * wf;
                let im = (ni * c2 + c + ci) * h * wf;
                for i in 0..h * wf {
                    data.push(sd[re + i]);
                    data.push(sd[im + i]);
                }
            }
        }
        Ok(SpectrumTensor {
            shape: [n, c, h, wf],
            width,
            data,
        })
    }

    pub fn to_stacked(&self) -> Tensor<T> {
        let [n, c, h, wf] = self.shape;
        let mut out = Tensor::zeros([n, 2 * c, h, wf]);
        let od = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let re = (ni * 2 * c + ci) * h * wf;
                let im = (ni * 2 * c + c + ci) * h * wf;
                let src = ((ni * c + ci) * h * wf) * 2;
                for i in 0..h * wf {
                    od[re + i] = self.data[src + 2 * i];
                    od[im + i] = self.data[src + 2 * i + 1];
                }
            }
        }
        out
    }
}

/// Forward real 2-D FFT of every channel.
pub fn rfft2<T: Scalar>(x: &Tensor<T>) -> Result<SpectrumTensor<T>> {
    SpectrumTensor::from_stacked(&rfft2_stacked(x)?, x.shape()[3])
}

/// Inverse of [`rfft2`]; `target_width` must be the original width.
pub fn irfft2<T: Scalar>(s: &SpectrumTensor<T>, target_width: usize) -> Result<Tensor<T>> {
    if s.shape[3] != target_width / 2 + 1 {
        return Err(Error::contract(format!(
            "spectrum with {} columns cannot produce width {target_width}",
            s.shape[3]
        )));
    }
    irfft2_stacked(&s.to_stacked(), target_width)
}

/// Differentiable [`rfft2_stacked`]. The adjoint is the unnormalized
/// inverse applied to the zero-filled gradient spectrum.
pub fn rfft2_op<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let width = g.shape(x)[3];
    let value = rfft2_stacked(g.value(x))?;
    Ok(g.push(
        OpKind::Rfft2,
        &[x],
        value,
        Box::new(move |ctx| Ok(vec![Some(half_to_real(ctx.grad, width, false, T::one())?)])),
    ))
}

/// Differentiable [`irfft2_stacked`]. The adjoint is the forward transform
/// of the gradient scaled per column by the Hermitian weight over `H W`.
pub fn irfft2_op<T: Scalar>(g: &mut Graph<T>, s: Var, width: usize) -> Result<Var> {
    let value = irfft2_stacked(g.value(s), width)?;
    let [_, _, h, _] = value.shape();
    Ok(g.push(
        OpKind::Irfft2,
        &[s],
        value,
        Box::new(move |ctx| {
            let mut gs = rfft2_stacked(ctx.grad)?;
            let wf = width / 2 + 1;
            let inv = T::of(1.0 / (h * width) as f64);
            let two = T::of(2.0);
            for (i, v) in gs.data_mut().iter_mut().enumerate() {
                let kx = i % wf;
                let weight = if kx != 0 && 2 * kx != width { two } else { T::one() };
                *v *= weight * inv;
            }
            Ok(vec![Some(gs)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_power_of_two_names_the_extent() {
        let err = rfft2(&Tensor::<f64>::zeros([1, 1, 6, 8])).unwrap_err();
        assert!(err.to_string().contains('6'), "{err}");
        let err = rfft2(&Tensor::<f64>::zeros([1, 1, 8, 12])).unwrap_err();
        assert!(err.to_string().contains("12"), "{err}");
    }

    #[test]
    fn irfft_rejects_layout_mismatch() {
        let s = rfft2(&Tensor::<f64>::zeros([1, 1, 4, 8])).unwrap();
        assert!(matches!(irfft2(&s, 4), Err(Error::Contract(_))));
        assert!(matches!(
            irfft2_stacked(&Tensor::<f64>::zeros([1, 3, 4, 5]), 8),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn one_dimensional_transform_of_impulse_is_flat() {
        let mut buf = vec![Complex::new(0.0f64, 0.0); 8];
        buf[0] = Complex::new(1.0, 0.0);
        fft_in_place(&mut buf, false).unwrap();
        assert!(buf.iter().all(|z| (z.re - 1.0).abs() < 1e-15 && z.im.abs() < 1e-15));
    }

    #[test]
    fn stacked_interleaved_roundtrip() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 4], |n, c, h, w| ((n + 2 * c + 3 * h + 5 * w) % 7) as f64);
        let s = rfft2(&x).unwrap();
        let back = SpectrumTensor::from_stacked(&s.to_stacked(), 4).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn single_precision_roundtrip() {
        let x = Tensor::<f32>::from_fn([1, 2, 16, 16], |_, c, h, w| {
            ((c * 31 + h * 7 + w * 13) % 17) as f32 / 17.0
        });
        let back = irfft2(&rfft2(&x).unwrap(), 16).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-5);
    }
}
