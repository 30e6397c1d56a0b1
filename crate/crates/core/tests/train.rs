mod common;

use common::desk::{examples, mixtures, tiny_am, tiny_config, tiny_model};
use mcse_core::frontend::Variant;
use mcse_core::losses::{total_loss_value, LossWeights};
use mcse_core::nn::gradcheck::check_params;
use mcse_core::nn::{ops, Adam, Backward, ParamStore, Precision, Tensor};
use mcse_core::train::{
    bmuf_round, compute_gradients, grad_check, run_training, train_step, Batch, BmufConfig, BmufState, LogRecord,
    TrainConfig, Trainer, LAST_CKPT, LOG_FILE,
};

fn grads(store: &ParamStore) -> Vec<Vec<u64>> {
    store.iter().map(|p| p.grad.data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn beta_zero_matches_si_snr_only_gradients() {
    let data = mixtures(2, 480, 3);
    let mut a = tiny_model(Variant::Proposed, Precision::F64, 5);
    let am = tiny_am(&a, &data, 1);
    let ex = examples(&a, &data, Some(&am));
    let batch = Batch::collate(&ex.iter().collect::<Vec<_>>()).unwrap();
    let mut b = a.clone();
    let w = LossWeights { alpha: 1.0, beta: 0.0 };
    compute_gradients(&batch, &mut a, Some(&am), w).unwrap();
    let mut plain = batch.clone();
    plain.labels = None;
    compute_gradients(&plain, &mut b, None, w).unwrap();
    assert_eq!(grads(&a.store), grads(&b.store));
}

#[test]
fn breakdown_total_is_exact_weighted_sum() {
    let data = mixtures(2, 480, 4);
    let mut m = tiny_model(Variant::Proposed, Precision::F64, 2);
    let am = tiny_am(&m, &data, 2);
    let ex = examples(&m, &data, Some(&am));
    let batch = Batch::collate(&ex.iter().collect::<Vec<_>>()).unwrap();
    let w = LossWeights { alpha: 0.7, beta: 0.3 };
    let b = compute_gradients(&batch, &mut m, Some(&am), w).unwrap();
    assert!(b.l_am > 0.0);
    assert_eq!(b.l_total, total_loss_value(b.l_enh, b.l_am, w));
}

#[test]
fn overfit_single_example_decreases_in_windows() {
    let data = mixtures(1, 800, 11);
    let mut m = tiny_model(Variant::M5, Precision::F64, 3);
    let ex = examples(&m, &data, None);
    let batch = Batch::collate(&[&ex[0]]).unwrap();
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(cfg.adam, &m.store);
    let losses: Vec<f64> = (0..300)
        .map(|_| train_step(&batch, &mut m, None, &mut adam, &cfg).unwrap().l_enh)
        .collect();
    let windows: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {windows:?}");
    }
}

#[test]
fn frozen_am_untouched_by_training() {
    let data = mixtures(2, 480, 6);
    let mut m = tiny_model(Variant::Proposed, Precision::F32, 1);
    let am = tiny_am(&m, &data, 3);
    let before = am.model.store.clone();
    let ex = examples(&m, &data, Some(&am));
    let batch = Batch::collate(&ex.iter().collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(cfg.adam, &m.store);
    for _ in 0..5 {
        train_step(&batch, &mut m, Some(&am), &mut adam, &cfg).unwrap();
    }
    assert!(am.model.store.bit_equal(&before));
}

#[test]
fn missing_am_with_positive_beta_is_an_error() {
    let m = tiny_model(Variant::Proposed, Precision::F32, 1);
    assert!(Trainer::new(m, None, TrainConfig::default()).is_err());
    // M5 has no AM branch: beta is ignored
    let m = tiny_model(Variant::M5, Precision::F32, 1);
    assert!(Trainer::new(m, None, TrainConfig::default()).is_ok());
}

#[test]
fn bmuf_degenerate_matches_serial_adam() {
    let data = mixtures(4, 320, 8);
    let model = tiny_model(Variant::M5, Precision::F32, 4);
    let ex = examples(&model, &data, None);
    let batches: Vec<Batch> = ex.chunks(2).map(|c| Batch::collate(&c.iter().collect::<Vec<_>>()).unwrap()).collect();
    let cfg = TrainConfig::default();
    let tau = 5;
    let bcfg = BmufConfig {
        workers: 1,
        sync_period: tau,
        block_momentum: 0.0,
        block_lr: 1.0,
        ..Default::default()
    };
    let mut serial = model.clone();
    let mut serial_adam = Adam::new(cfg.adam, &serial.store);
    let mut global = model.clone();
    let mut worker = model.clone();
    let mut worker_adam = Adam::new(cfg.adam, &worker.store);
    let mut st = BmufState::new(bcfg, &global.store).unwrap();
    for step in 0..40 {
        let b = &batches[step % batches.len()];
        train_step(b, &mut serial, None, &mut serial_adam, &cfg).unwrap();
        train_step(b, &mut worker, None, &mut worker_adam, &cfg).unwrap();
        if (step + 1) % tau == 0 {
            bmuf_round(&mut st, &mut global.store, &[&worker.store]).unwrap();
            assert!(global.store.bit_equal(&serial.store), "diverged at step {step}");
            worker.store.copy_values_from(&st.restart_point(&global.store)).unwrap();
        }
    }
}

#[test]
fn identical_replicas_equal_single_worker() {
    let data = mixtures(2, 320, 9);
    let model = tiny_model(Variant::M2, Precision::F32, 4);
    let ex = examples(&model, &data, None);
    let batch = Batch::collate(&ex.iter().collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig::default();
    let bcfg = BmufConfig::default();
    let run = |k: usize| {
        let mut global = model.clone();
        let mut st = BmufState::new(bcfg, &global.store).unwrap();
        let mut ws: Vec<_> = (0..k).map(|_| (model.clone(), Adam::new(cfg.adam, &model.store))).collect();
        for _ in 0..3 {
            for (w, a) in ws.iter_mut() {
                w.store.copy_values_from(&st.restart_point(&global.store)).unwrap();
                for _ in 0..3 {
                    train_step(&batch, w, None, a, &cfg).unwrap();
                }
            }
            let reps: Vec<&ParamStore> = ws.iter().map(|(w, _)| &w.store).collect();
            bmuf_round(&mut st, &mut global.store, &reps).unwrap();
        }
        global.store
    };
    let one = run(1);
    let two = run(2);
    // the mean of two equal f32 values is exact, so the runs agree bitwise
    assert!(one.bit_equal(&two));
}

#[test]
fn linear_toy_gradcheck_is_exact() {
    let mut store = ParamStore::new(Precision::F64);
    let w = store.add("w", Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap());
    let x = Tensor::new(&[1, 4, 5], (0..20).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let r = check_params(&mut store, 1e-5, 200, 0, |g, s| {
        let wv = g.param(s, w);
        let xv = g.constant(x.clone());
        let y = ops::pointwise(g, xv, wv, None)?;
        Ok(ops::sum(g, y))
    })
    .unwrap();
    assert!(r.max_rel_error <= 1e-10, "{r:?}");
}

/// Doubles its input but reports the gradient of the identity.
struct Corrupt;

impl Backward for Corrupt {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> mcse_core::Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone())])
    }
}

#[test]
fn corrupted_backward_is_detected() {
    let mut store = ParamStore::new(Precision::F64);
    let w = store.add("w", Tensor::new(&[5], vec![0.3, -0.2, 0.9, 1.1, -0.5]).unwrap());
    let r = check_params(&mut store, 1e-5, 200, 0, |g, s| {
        let wv = g.param(s, w);
        let doubled = g.value(wv).map(|v| 2.0 * v);
        let y = g.apply(Box::new(Corrupt), &[wv], doubled);
        let sq = ops::mul(g, y, y)?;
        Ok(ops::sum(g, sq))
    })
    .unwrap();
    assert!(r.max_rel_error > 1e-2);
    assert!(r.worst.starts_with("w["));
}

#[test]
fn proposed_model_gradcheck() {
    let data = mixtures(2, 320, 12);
    let m = tiny_model(Variant::Proposed, Precision::F64, 7);
    let am = tiny_am(&m, &data, 4);
    let ex = examples(&m, &data, Some(&am));
    let batch = Batch::collate(&ex.iter().collect::<Vec<_>>()).unwrap();
    let r = grad_check(&m, Some(&am), &batch, LossWeights::default(), 1e-5, 200, 1).unwrap();
    assert!(r.max_rel_error <= 1e-4, "worst {} = {:e}", r.worst, r.max_rel_error);
    assert!(r.per_tensor.iter().any(|(n, _)| n.starts_with("frontend.icd")));
}

#[test]
fn variant_smoke_matrix() {
    let data = mixtures(2, 320, 13);
    for v in [Variant::B2, Variant::M2, Variant::M5, Variant::Proposed] {
        let m = tiny_model(v, Precision::F32, 1);
        let am = v.uses_am().then(|| tiny_am(&m, &data, 5));
        let ex = examples(&m, &data, am.as_ref());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let mut t = Trainer::new(m, am, cfg).unwrap();
        let s = t.fit(&ex, &ex, None).unwrap();
        assert_eq!(s.epochs, 1, "{v}");
        assert!(s.epoch_losses[0].l_total.is_finite(), "{v}");
    }
}

#[test]
fn set_lr_reaches_the_log() {
    let data = mixtures(2, 320, 13);
    let m = tiny_model(Variant::M5, Precision::F32, 1);
    let ex = examples(&m, &data, None);
    let mut t = Trainer::new(m, None, TrainConfig::default()).unwrap();
    assert!(t.set_lr(0.0).is_err());
    assert!(t.set_lr(f64::NAN).is_err());
    t.set_lr(2.5e-4).unwrap();
    let recs = t.train_epoch(&ex).unwrap();
    assert!(recs.iter().all(|r| r.lr == 2.5e-4));
}

fn write_dataset(dir: &std::path::Path, n: usize, seed: u64) {
    let mut r = common::desk::recipe(320, seed);
    r.count = n;
    mcse_core::room::dataset::make_dataset(&r, dir).unwrap();
}

#[test]
fn resume_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    write_dataset(&train, 4, 21);
    let model_cfg = tiny_config(Variant::M5);
    let base = TrainConfig {
        epochs: 3,
        batch_size: 2,
        train_data: Some(train.clone()),
        dev_data: Some(train.clone()),
        ..Default::default()
    };
    let full = TrainConfig {
        out_dir: dir.path().join("full"),
        ..base.clone()
    };
    run_training(&model_cfg, &full, None).unwrap();

    let split = dir.path().join("split");
    let first = TrainConfig {
        epochs: 1,
        out_dir: split.clone(),
        ..base.clone()
    };
    run_training(&model_cfg, &first, None).unwrap();
    let second = TrainConfig {
        out_dir: split.clone(),
        ..base
    };
    let s = run_training(&model_cfg, &second, Some(&split.join(LAST_CKPT))).unwrap();
    assert_eq!(s.epochs, 2);

    let a = mcse_core::model::EnhancementModel::load(&dir.path().join("full").join(LAST_CKPT)).unwrap();
    let b = mcse_core::model::EnhancementModel::load(&split.join(LAST_CKPT)).unwrap();
    assert!(a.store.bit_equal(&b.store));

    let log = std::fs::read_to_string(split.join(LOG_FILE)).unwrap();
    let recs: Vec<LogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6);
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    assert!(recs.iter().all(|r| r.l_enh.is_finite() && r.l_am == 0.0 && r.lr == 1e-3));
}

#[test]
fn bmuf_training_runs_and_is_thread_independent() {
    let data = mixtures(6, 320, 14);
    let m = tiny_model(Variant::M5, Precision::F32, 2);
    let ex = examples(&m, &data, None);
    let run = |threads: usize| {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 1,
            threads,
            bmuf: Some(BmufConfig {
                workers: 3,
                sync_period: 1,
                nesterov: true,
                ..Default::default()
            }),
            ..Default::default()
        };
        let mut t = Trainer::new(m.clone(), None, cfg).unwrap();
        t.fit(&ex, &[], None).unwrap();
        assert_eq!(t.bmuf_state().unwrap().rounds, 4);
        t.model.store
    };
    assert!(run(1).bit_equal(&run(3)));
}
