//! PNG I/O, synthetic rain, patch sampling and the bundled corpus.

use std::path::{Path, PathBuf};

use dpcnet_core::data::{
    load_png, patch_sample, save_png, streak_layer, synth_rain, synthetic_corpus, Corpus, ImagePair, RainParams,
};
use dpcnet_core::error::ImageError;
use dpcnet_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/png")
        .join(name)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rain(density: f64, intensity: f64, length: usize, seed: u64) -> RainParams {
    RainParams {
        density,
        angle: 0.0,
        length,
        intensity,
        seed,
    }
}

// ---- PNG I/O ---------------------------------------------------------------

#[test]
fn known_bytes_load_as_exact_fractions() {
    let t = load_png(&fixture("known_2x2.png")).unwrap();
    assert_eq!(t.shape(), [1, 3, 2, 2]);
    let pixels = [[255u8, 0, 0], [0, 255, 0], [0, 0, 255], [12, 200, 255]];
    for (i, px) in pixels.iter().enumerate() {
        for (c, &byte) in px.iter().enumerate() {
            assert_eq!(t.at(0, c, i / 2, i % 2), byte as f32 / 255.0);
        }
    }
}

#[test]
fn black_png_is_zero() {
    let t = load_png(&fixture("black_3x2.png")).unwrap();
    assert_eq!(t.shape(), [1, 3, 2, 3]);
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eight_bit_images_roundtrip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::<f32>::from_fn([1, 3, 7, 5], |_, _, _, _| rng.gen_range(0..=255u8) as f32 / 255.0);
    let path = dir.path().join("x.png");
    save_png(&t, &path).unwrap();
    assert_eq!(load_png(&path).unwrap(), t);
    // Saving the loaded tensor again reproduces the file byte for byte.
    let again = dir.path().join("y.png");
    save_png(&load_png(&path).unwrap(), &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn saving_clamps_and_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f64>::from_vec([1, 3, 1, 2], vec![-0.5, 1.5, 0.5, 0.2, 0.999, 0.001]).unwrap();
    let path = dir.path().join("c.png");
    save_png(&t, &path).unwrap();
    let back = load_png(&path).unwrap();
    let bytes: Vec<u8> = back.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    assert_eq!(bytes, [0, 255, 128, 51, 255, 0]);
    assert!(matches!(
        save_png(&Tensor::<f32>::zeros([1, 1, 2, 2]), &path),
        Err(Error::Contract(_))
    ));
}

#[test]
fn load_failures_are_distinct() {
    let missing = load_png(&fixture("does_not_exist.png"));
    assert!(
        matches!(missing, Err(Error::Image(ImageError::Missing(_)))),
        "{missing:?}"
    );
    let gray = load_png(&fixture("gray_2x2.png"));
    assert!(matches!(gray, Err(Error::Image(ImageError::NotRgb { .. }))), "{gray:?}");
    let truncated = load_png(&fixture("truncated.png"));
    assert!(
        matches!(truncated, Err(Error::Image(ImageError::Corrupt { .. }))),
        "{truncated:?}"
    );
}

// ---- synthetic rain --------------------------------------------------------

#[test]
fn zero_intensity_or_density_leaves_the_image_untouched() {
    let clean = Tensor::<f32>::from_fn([1, 3, 32, 32], |_, c, y, x| ((c + y * 3 + x) % 17) as f32 / 17.0);
    for p in [rain(0.05, 0.0, 5, 1), rain(0.0, 0.9, 5, 2)] {
        assert_eq!(synth_rain("a", &clean, &p).unwrap().rainy, clean);
    }
}

#[test]
fn rain_is_deterministic_per_seed() {
    let clean = Tensor::<f32>::full([1, 3, 32, 32], 0.4);
    let a = synth_rain("a", &clean, &rain(0.02, 0.7, 7, 11)).unwrap();
    let b = synth_rain("a", &clean, &rain(0.02, 0.7, 7, 11)).unwrap();
    let c = synth_rain("a", &clean, &rain(0.02, 0.7, 7, 12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.rainy, c.rainy);
}

#[test]
fn streak_count_follows_binomial_statistics() {
    // Unit-length streaks never overlap, so each streak pixel is one seed.
    let (h, w, density) = (128usize, 128usize, 0.01);
    let n = (h * w) as f64;
    let mean = n * density;
    let sigma = (n * density * (1.0 - density)).sqrt();
    let clean = Tensor::<f32>::full([1, 3, h, w], 0.5);
    for seed in 0..5 {
        let pair = synth_rain("g", &clean, &rain(density, 0.8, 1, seed)).unwrap();
        let streaked = (0..h * w).filter(|&i| pair.rainy.at(0, 0, i / w, i % w) != 0.5).count() as f64;
        assert!(
            (streaked - mean).abs() <= 3.0 * sigma,
            "seed {seed}: {streaked} streak pixels, expected {mean} ± {}",
            3.0 * sigma
        );
    }
}

#[test]
fn streaks_only_brighten_and_stay_in_range() {
    let clean = Tensor::<f32>::from_fn([1, 3, 64, 64], |_, c, y, x| ((c * 7 + y + 2 * x) % 23) as f32 / 22.0);
    let p = RainParams {
        density: 0.03,
        angle: 20.0,
        length: 9,
        intensity: 0.6,
        seed: 5,
    };
    let layer = streak_layer(64, 64, &p).unwrap();
    let pair = synth_rain("s", &clean, &p).unwrap();
    for (i, &s) in layer.iter().enumerate() {
        assert!((0.0..=0.6).contains(&s));
        for c in 0..3 {
            let (r, k) = (pair.rainy.at(0, c, i / 64, i % 64), clean.at(0, c, i / 64, i % 64));
            assert!((0.0..=1.0).contains(&r));
            if s == 0.0 {
                assert_eq!(r, k);
            } else {
                assert_eq!(r, (k + s).min(1.0));
            }
        }
    }
}

#[test]
fn invalid_rain_parameters_are_config_errors() {
    for p in [rain(-0.1, 0.5, 3, 0), rain(0.1, 1.5, 3, 0), rain(0.1, 0.5, 0, 0)] {
        assert!(matches!(streak_layer(8, 8, &p), Err(Error::Config(_))));
    }
}

// ---- patches ---------------------------------------------------------------

fn test_pair(size: usize) -> ImagePair {
    let clean = Tensor::<f32>::from_fn([1, 3, size, size], |_, c, y, x| {
        ((c * 5 + y * 3 + x) % 29) as f32 / 28.0
    });
    synth_rain("p", &clean, &rain(0.03, 0.7, 5, 3)).unwrap()
}

#[test]
fn full_size_patch_without_flip_is_the_pair() {
    let pair = test_pair(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(patch_sample(&pair, 16, false, &mut rng).unwrap(), pair);
}

#[test]
fn patches_crop_both_images_identically() {
    let pair = test_pair(32);
    let diff = pair.rainy.zip_map(&pair.clean, |a, b| a - b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let p = patch_sample(&pair, 8, true, &mut rng).unwrap();
        let pd = p.rainy.zip_map(&p.clean, |a, b| a - b).unwrap();
        // The patch difference must appear somewhere in the full difference,
        // possibly mirrored.
        let found = (0..=24).any(|top| {
            (0..=24).any(|left| {
                [false, true].iter().any(|&flip| {
                    (0..3).all(|c| {
                        (0..8).all(|y| {
                            (0..8).all(|x| {
                                let sx = if flip { 7 - x } else { x };
                                pd.at(0, c, y, x) == diff.at(0, c, top + y, left + sx)
                                    && p.clean.at(0, c, y, x) == pair.clean.at(0, c, top + y, left + sx)
                            })
                        })
                    })
                })
            })
        });
        assert!(found, "patch is not an aligned crop");
    }
}

#[test]
fn seeded_patches_are_reproducible() {
    let pair = test_pair(32);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .map(|_| patch_sample(&pair, 16, true, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn oversized_or_odd_patches_are_rejected() {
    let pair = test_pair(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for size in [0, 12, 32] {
        assert!(
            matches!(patch_sample(&pair, size, false, &mut rng), Err(Error::Contract(_))),
            "size {size}"
        );
    }
}

// ---- corpus ----------------------------------------------------------------

#[test]
fn corpus_directories_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synthetic_corpus(3, 5, 16, 1).unwrap();
    corpus.save_dir(dir.path()).unwrap();
    let loaded = Corpus::load_dir(dir.path()).unwrap();
    let ids: Vec<&str> = loaded.pairs.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["pair_005", "pair_006", "pair_007"]);
    assert!(loaded.pairs.iter().all(|p| p
        .rainy
        .data()
        .iter()
        .chain(p.clean.data())
        .all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn corpus_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Corpus::load_dir(&dir.path().join("nope")),
        Err(Error::Image(ImageError::Missing(_)))
    ));
    synthetic_corpus(2, 0, 16, 1).unwrap().save_dir(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("clean/pair_001.png")).unwrap();
    match Corpus::load_dir(dir.path()) {
        Err(Error::Image(ImageError::Missing(p))) => assert!(p.ends_with("clean/pair_001.png")),
        other => panic!("unexpected {other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(empty.path().join("rainy")).unwrap();
    std::fs::create_dir_all(empty.path().join("clean")).unwrap();
    assert!(matches!(
        Corpus::load_dir(empty.path()),
        Err(Error::Image(ImageError::Empty(_)))
    ));
}

/// Rounds to the 8-bit grid the PNGs store. The product is taken in f64 as
/// the writer does; in f32 a value just below a half step can round up.
fn quantized(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| ((v as f64 * 255.0).round() as f32) / 255.0)
}

#[test]
fn bundled_corpus_matches_the_generator() {
    for (dir, count, first) in [("train", 24, 0), ("test", 8, 24)] {
        let loaded = Corpus::load_dir(&repo_root().join("data/synthetic").join(dir)).unwrap();
        let generated = synthetic_corpus(count, first, 64, 42).unwrap();
        assert_eq!(loaded.len(), count);
        for (l, g) in loaded.pairs.iter().zip(&generated.pairs) {
            assert_eq!(l.id, g.id);
            assert_eq!(l.rainy, quantized(&g.rainy), "{dir}/{}", l.id);
            assert_eq!(l.clean, quantized(&g.clean), "{dir}/{}", l.id);
            assert_ne!(l.rainy, l.clean);
        }
    }
}
