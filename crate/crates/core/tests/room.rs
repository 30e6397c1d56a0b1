use mcse_core::dsp::read_wav;
use mcse_core::room::augment::{augment, AugmentKind};
use mcse_core::room::dataset::{generate_example, load_manifest, make_dataset, regenerate, DatasetRecipe, Pools, Split, MANIFEST};
use mcse_core::room::scene::{draw_scene, SceneConfig};
use mcse_core::room::{convolve, image_source_rir, RoomClass, RoomSpec};
use mcse_core::spatial::ArrayGeometry;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use realfft::RealFftPlanner;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// RT60 from the Schroeder backward-integrated energy decay, fitted
/// between -5 and -25 dB and extrapolated to 60 dB.
fn schroeder_rt60(h: &[f64], fs: f64) -> f64 {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / edc[0]).log10()).collect();
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|(_, &d)| (-25.0..=-5.0).contains(&d))
        .map(|(i, &d)| (i as f64 / fs, d))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (sxy, sxx) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + (p.0 - mx) * (p.1 - my), b + (p.0 - mx).powi(2)));
    -60.0 / (sxy / sxx)
}

#[test]
fn decay_matches_sabine() {
    for (room, src, mic) in [
        (RoomSpec::new(4.0, 4.5, 3.0, 0.3, RoomClass::Small).unwrap(), [1.2, 1.7, 1.4], [2.9, 3.1, 1.6]),
        (RoomSpec::new(6.0, 5.5, 3.2, 0.4, RoomClass::Medium).unwrap(), [1.5, 2.0, 1.5], [4.1, 3.6, 1.2]),
    ] {
        let h = image_source_rir(&room, src, mic, 30, 16_000, 343.0).unwrap();
        let measured = schroeder_rt60(&h, 16_000.0);
        let sabine = room.sabine_rt60();
        eprintln!("rt60 measured {measured:.3} s, sabine {sabine:.3} s");
        assert!((measured - sabine).abs() / sabine <= 0.3);
    }
}

#[test]
fn rir_is_deterministic() {
    let room = RoomSpec::new(7.5, 7.2, 3.0, 0.5, RoomClass::Large).unwrap();
    let a = image_source_rir(&room, [1.0, 2.0, 1.0], [5.0, 5.0, 2.0], 8, 16_000, 343.0).unwrap();
    let b = image_source_rir(&room, [1.0, 2.0, 1.0], [5.0, 5.0, 2.0], 8, 16_000, 343.0).unwrap();
    assert_eq!(a, b);
}

fn peak_hz(x: &[f64], fs: f64) -> (f64, f64) {
    let size = 1 << 15;
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(size);
    let mut buf = fft.make_input_vec();
    buf[..x.len()].copy_from_slice(x);
    let mut spec = fft.make_output_vec();
    fft.process(&mut buf, &mut spec).unwrap();
    let k = (0..spec.len()).max_by(|&a, &b| spec[a].norm().total_cmp(&spec[b].norm())).unwrap();
    let bin = fs / size as f64;
    (k as f64 * bin, bin)
}

#[test]
fn speed_raises_pitch() {
    let fs = 16_000.0;
    let tone: Vec<f64> = (0..16_000)
        .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / fs).sin())
        .collect();
    let fast = augment(&tone, AugmentKind::Speed, 1.1).unwrap();
    assert_eq!(fast.len(), (16_000.0f64 / 1.1).round() as usize);
    let (f, bin) = peak_hz(&fast, fs);
    assert!((f - 484.0).abs() <= bin, "peak at {f} Hz (bin {bin})");
}

#[test]
fn class_ratio_passes_chi_square() {
    let cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 3];
    for _ in 0..1000 {
        let c = cfg.draw_class(&mut rng);
        counts[RoomClass::ALL.iter().position(|&k| k == c).unwrap()] += 1;
    }
    let expected = [250.0, 375.0, 375.0];
    let chi2: f64 = counts.iter().zip(expected).map(|(&o, e)| (o as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    eprintln!("counts {counts:?}, chi2 {chi2:.3}, p {p:.3}");
    assert!(p > 0.01);
}

#[test]
fn scene_classes_follow_ratio() {
    let cfg = SceneConfig::default();
    let geom = ArrayGeometry::default();
    let mut counts = [0usize; 3];
    for seed in 0..80 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = draw_scene(&mut rng, &cfg, &geom, seed).unwrap();
        assert!(s.room.size_class.contains(s.room.width) && s.room.size_class.contains(s.room.length));
        counts[RoomClass::ALL.iter().position(|&k| k == s.room.size_class).unwrap()] += 1;
    }
    eprintln!("80 scenes: {counts:?}");
    // 3 sigma around {20, 30, 30}
    for (c, e) in counts.iter().zip([20.0, 30.0, 30.0]) {
        assert!((*c as f64 - e).abs() <= 3.0 * (80.0 * (e / 80.0) * (1.0 - e / 80.0)).sqrt());
    }
}

fn small_recipe(split: Split, count: usize) -> DatasetRecipe {
    let mut r = DatasetRecipe {
        count,
        seed: 11,
        split,
        train_seconds: 0.5,
        ..Default::default()
    };
    r.scene.max_order = 4;
    r
}

#[test]
fn dev_examples_are_six_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let entries = make_dataset(&small_recipe(Split::Dev, 3), dir.path()).unwrap();
    assert_eq!(entries.len(), 3);
    for e in &entries {
        assert_eq!(e.samples, 96_000);
        let mix = read_wav(&dir.path().join(&e.mix)).unwrap();
        let target = read_wav(&dir.path().join(&e.target)).unwrap();
        assert_eq!((mix.num_channels(), mix.len()), (8, 96_000));
        assert_eq!(target.len(), 96_000);
    }
}

#[test]
fn regeneration_reproduces_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let entries = make_dataset(&small_recipe(Split::Train, 4), dir.path()).unwrap();
    assert_eq!(load_manifest(&dir.path().join(MANIFEST)).unwrap(), entries);
    assert!(regenerate(dir.path(), out.path()).unwrap().is_empty());
    // a tampered file is caught
    let e = &entries[1];
    std::fs::write(dir.path().join(&e.mix), b"junk").unwrap();
    let mut m = load_manifest(&dir.path().join(MANIFEST)).unwrap();
    m[1].sha256_mix = mcse_core::room::dataset::sha256_file(&dir.path().join(&e.mix)).unwrap();
    let lines: Vec<String> = m.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    std::fs::write(dir.path().join(MANIFEST), lines.join("\n")).unwrap();
    assert_eq!(regenerate(dir.path(), out.path()).unwrap(), vec![e.id.clone()]);
}

#[test]
fn mixture_decomposes_exactly() {
    let recipe = small_recipe(Split::Train, 1);
    let g = generate_example(&recipe, &Pools::synthetic(), 5).unwrap();
    let ex = &g.example;
    let mut worst = 0.0f64;
    for c in 0..8 {
        for (i, m) in ex.mixture.channel(c).iter().enumerate() {
            worst = worst.max((m - ex.reverberant_clean[c][i] - ex.scaled_noise[c][i]).abs());
        }
    }
    assert!(worst <= 1e-7);
    let p = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let snr = 10.0 * (p(&ex.reverberant_clean[0]) / p(&ex.scaled_noise[0])).log10();
    assert!((snr - ex.scene.snr_db).abs() <= 1e-6 * ex.scene.snr_db.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn convolution_is_linear_and_truncated(
        x in prop::collection::vec(-1.0f64..1.0, 1..200),
        h in prop::collection::vec(-1.0f64..1.0, 1..40),
        a in -3.0f64..3.0,
    ) {
        let y = convolve(&x, &h);
        prop_assert_eq!(y.len(), x.len());
        let xs: Vec<f64> = x.iter().map(|v| a * v).collect();
        for (p, q) in convolve(&xs, &h).iter().zip(&y) {
            prop_assert!((p - a * q).abs() <= 1e-9);
        }
        for (i, v) in y.iter().enumerate() {
            let direct: f64 = (0..=i.min(h.len() - 1)).map(|k| h[k] * x[i - k]).sum();
            prop_assert!((v - direct).abs() <= 1e-9);
        }
    }

    #[test]
    fn volume_is_a_gain(x in prop::collection::vec(-1.0f64..1.0, 0..100), g in 0.25f64..4.0) {
        let y = augment(&x, AugmentKind::Volume, g).unwrap();
        prop_assert!(y.iter().zip(&x).all(|(a, b)| *a == b * g));
    }
}
