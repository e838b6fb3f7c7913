//! Real 2-D FFT against a direct O(N^2) DFT and its structural identities.

use std::f64::consts::PI;

use dpcnet_core::fft::{fft_in_place, irfft2, rfft2};
use dpcnet_core::{Error, Tensor};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::{naive_bin, rand_t, spectrum_energy};

#[test]
fn agrees_with_direct_dft_on_8x8() {
    let x = rand_t([2, 3, 8, 8], 1);
    let s = rfft2(&x).unwrap();
    assert_eq!(s.shape(), [2, 3, 8, 5]);
    let mut worst: f64 = 0.0;
    for n in 0..2 {
        for c in 0..3 {
            for ky in 0..8 {
                for kx in 0..5 {
                    worst = worst.max((s.bin(n, c, ky, kx) - naive_bin(&x, n, c, ky, kx)).norm());
                }
            }
        }
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

#[test]
fn agrees_with_direct_dft_on_rectangles() {
    for (h, w) in [(1, 1), (1, 8), (4, 2), (2, 16), (16, 4)] {
        let x = rand_t([1, 1, h, w], (h * 31 + w) as u64);
        let s = rfft2(&x).unwrap();
        for ky in 0..h {
            for kx in 0..w / 2 + 1 {
                let d = (s.bin(0, 0, ky, kx) - naive_bin(&x, 0, 0, ky, kx)).norm();
                assert!(d < 1e-9, "{h}x{w} bin ({ky},{kx}) off by {d:e}");
            }
        }
    }
}

#[test]
fn roundtrip_recovers_input() {
    for shape in [[1, 3, 64, 64], [2, 2, 8, 32], [1, 1, 1, 2], [1, 1, 32, 1]] {
        let x = rand_t(shape, 2);
        let back = irfft2(&rfft2(&x).unwrap(), shape[3]).unwrap();
        let err = x.max_abs_diff(&back);
        assert!(err < 1e-6, "{shape:?}: roundtrip error {err:e}");
    }
}

#[test]
fn parseval_holds() {
    for shape in [[1, 3, 8, 8], [2, 1, 16, 32], [1, 2, 4, 2]] {
        let x = rand_t(shape, 3);
        let [_, _, h, w] = shape;
        let spatial = x.sum_squares();
        let spectral = spectrum_energy(&rfft2(&x).unwrap()) / (h * w) as f64;
        let rel = (spatial - spectral).abs() / spatial;
        assert!(rel < 1e-4, "{shape:?}: relative energy gap {rel:e}");
    }
}

#[test]
fn constant_field_concentrates_in_dc() {
    let x = Tensor::<f64>::full([1, 1, 8, 8], 0.75);
    let s = rfft2(&x).unwrap();
    for ky in 0..8 {
        for kx in 0..5 {
            let v = s.bin(0, 0, ky, kx);
            if (ky, kx) == (0, 0) {
                assert!((v - Complex::new(48.0, 0.0)).norm() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12, "bin ({ky},{kx}) = {v}");
            }
        }
    }
}

#[test]
fn impulse_has_flat_unit_spectrum() {
    let mut x = Tensor::<f64>::zeros([1, 1, 8, 16]);
    x.set(0, 0, 0, 0, 1.0);
    let s = rfft2(&x).unwrap();
    for ky in 0..8 {
        for kx in 0..9 {
            assert!((s.bin(0, 0, ky, kx) - Complex::new(1.0, 0.0)).norm() < 1e-12);
        }
    }
}

#[test]
fn shifted_impulse_carries_linear_phase() {
    let mut x = Tensor::<f64>::zeros([1, 1, 8, 8]);
    x.set(0, 0, 2, 3, 1.0);
    let s = rfft2(&x).unwrap();
    for ky in 0..8 {
        for kx in 0..5 {
            let expect = Complex::from_polar(1.0, -2.0 * PI * (2.0 * ky as f64 + 3.0 * kx as f64) / 8.0);
            assert!((s.bin(0, 0, ky, kx) - expect).norm() < 1e-12);
        }
    }
}

#[test]
fn transform_is_linear() {
    let a = rand_t([1, 2, 8, 8], 4);
    let b = rand_t([1, 2, 8, 8], 5);
    let (alpha, beta) = (0.7, -1.3);
    let mix = a.zip_map(&b, |u, v| alpha * u + beta * v).unwrap();
    let (sa, sb, sm) = (rfft2(&a).unwrap(), rfft2(&b).unwrap(), rfft2(&mix).unwrap());
    for ((&u, &v), &m) in sa.data().iter().zip(sb.data()).zip(sm.data()) {
        assert!((alpha * u + beta * v - m).abs() < 1e-12);
    }
}

#[test]
fn real_input_has_real_dc_and_nyquist_bins() {
    let x = rand_t([1, 3, 8, 8], 6);
    let s = rfft2(&x).unwrap();
    for c in 0..3 {
        for (ky, kx) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
            assert!(s.bin(0, c, ky, kx).im.abs() < 1e-12);
        }
        let mean = (0..8)
            .flat_map(|y| (0..8).map(move |xx| (y, xx)))
            .map(|(y, xx)| x.at(0, c, y, xx))
            .sum::<f64>();
        assert!((s.bin(0, c, 0, 0).re - mean).abs() < 1e-12);
    }
}

#[test]
fn zero_spectrum_inverts_to_zero() {
    let s = rfft2(&Tensor::<f64>::zeros([1, 2, 4, 8])).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
    let x = irfft2(&s, 8).unwrap();
    assert!(x.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dc_bin_alone_inverts_to_its_mean() {
    // Spectrum of a constant 2.5 field: only the DC bin is set.
    let s = rfft2(&Tensor::<f64>::full([1, 1, 4, 8], 2.5)).unwrap();
    let x = irfft2(&s, 8).unwrap();
    assert!(x.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn one_dimensional_transform_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = Tensor::<f64>::rand_uniform([1, 1, 1, 32], -1.0, 1.0, &mut rng);
    let mut buf: Vec<Complex<f64>> = input.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false).unwrap();
    for (k, got) in buf.iter().enumerate() {
        let expect: Complex<f64> = input
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| Complex::from_polar(v, -2.0 * PI * (k * j) as f64 / 32.0))
            .sum();
        assert!((got - expect).norm() < 1e-10);
    }
    fft_in_place(&mut buf, true).unwrap();
    for (got, &v) in buf.iter().zip(input.data()) {
        assert!((got.re / 32.0 - v).abs() < 1e-12 && got.im.abs() < 1e-10);
    }
}

#[test]
fn non_power_of_two_extents_are_config_errors() {
    for shape in [[1, 1, 6, 8], [1, 1, 8, 12], [1, 1, 0, 8]] {
        assert!(
            matches!(rfft2(&Tensor::<f64>::zeros(shape)), Err(Error::Config(_))),
            "{shape:?}"
        );
    }
    let mut odd = vec![Complex::new(0.0, 0.0); 3];
    assert!(matches!(fft_in_place(&mut odd, false), Err(Error::Config(_))));
}
