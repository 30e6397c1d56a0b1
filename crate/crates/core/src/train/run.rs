//! Epoch loop, dev evaluation, checkpoints and resumption.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bmuf_round, effective_weights, train_step, Batch, BmufState, Example, FrozenAm, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{score, MetricReport};
use crate::model::{EnhancementModel, ModelConfig};
use crate::nn::{Adam, Checkpoint, ParamStore};
use crate::room::dataset::{load_example, load_manifest, MANIFEST};

pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub worker: usize,
    pub l_enh: f64,
    pub l_am: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    /// Epoch index and mean dev SI-SNR of the best checkpoint.
    pub best: Option<(usize, f64)>,
    /// Mean training losses per epoch run in this call.
    pub epoch_losses: Vec<LossBreakdown>,
    pub dev_reports: Vec<MetricReport>,
}

#[derive(Clone, Debug)]
struct Worker {
    model: EnhancementModel,
    adam: Adam,
}

/// Training state: global model, optimizer(s), BMUF filter and counters.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: EnhancementModel,
    pub am: Option<FrozenAm>,
    adam: Adam,
    workers: Vec<Worker>,
    bmuf: Option<BmufState>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best: Option<(usize, f64)>,
    start: Instant,
}

fn mean_breakdown(v: &[LossBreakdown]) -> LossBreakdown {
    let n = v.len().max(1) as f64;
    LossBreakdown {
        l_enh: v.iter().map(|b| b.l_enh).sum::<f64>() / n,
        l_am: v.iter().map(|b| b.l_am).sum::<f64>() / n,
        l_total: v.iter().map(|b| b.l_total).sum::<f64>() / n,
    }
}

impl Trainer {
    pub fn new(model: EnhancementModel, am: Option<FrozenAm>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let w = effective_weights(&model, config.loss);
        match &am {
            None if w.beta > 0.0 => {
                return invalid(format!(
                    "variant {} with beta = {} needs a frozen acoustic model (am_checkpoint)",
                    model.variant(),
                    w.beta
                ))
            }
            Some(a) => a.check_compatible(&model)?,
            None => {}
        }
        let adam = Adam::new(config.adam, &model.store);
        let (workers, bmuf) = match config.bmuf {
            Some(b) => {
                let st = BmufState::new(b, &model.store)?;
                let ws = (0..b.workers)
                    .map(|_| Worker {
                        model: model.clone(),
                        adam: Adam::new(config.adam, &model.store),
                    })
                    .collect();
                (ws, Some(st))
            }
            None => (Vec::new(), None),
        };
        Ok(Trainer {
            config,
            model,
            am,
            adam,
            workers,
            bmuf,
            epoch: 0,
            step: 0,
            best: None,
            start: Instant::now(),
        })
    }

    pub fn bmuf_state(&self) -> Option<&BmufState> {
        self.bmuf.as_ref()
    }

    /// Changes the learning rate of every optimizer from the next step on.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {lr}"));
        }
        self.config.adam.lr = lr;
        self.adam.config.lr = lr;
        self.workers.iter_mut().for_each(|w| w.adam.config.lr = lr);
        Ok(())
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn record(&self, worker: usize, b: &LossBreakdown) -> LogRecord {
        LogRecord {
            step: self.step,
            epoch: self.epoch,
            worker,
            l_enh: b.l_enh,
            l_am: b.l_am,
            l_total: b.l_total,
            lr: self.config.adam.lr,
            wall_time: self.start.elapsed().as_secs_f64(),
        }
    }

    /// One pass over `train`; returns the per-step log records.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<Vec<LogRecord>> {
        if train.is_empty() {
            return invalid("no training examples");
        }
        let order = self.epoch_order(train.len());
        let bs = self.config.batch_size;
        let mut records = Vec::new();
        if self.bmuf.is_none() {
            for chunk in order.chunks(bs) {
                let batch = Batch::collate(&chunk.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;
                let b = train_step(&batch, &mut self.model, self.am.as_ref(), &mut self.adam, &self.config)?;
                self.step += 1;
                records.push(self.record(0, &b));
            }
        } else {
            self.bmuf_epoch(train, &order, &mut records)?;
        }
        self.epoch += 1;
        Ok(records)
    }

    fn bmuf_epoch(&mut self, train: &[Example], order: &[usize], records: &mut Vec<LogRecord>) -> Result<()> {
        let k = self.workers.len();
        let tau = self.bmuf.as_ref().unwrap().config.sync_period;
        let bs = self.config.batch_size;
        // worker j takes every k-th example of the shuffled order
        let shards: Vec<Vec<Vec<usize>>> = (0..k)
            .map(|j| {
                let mine: Vec<usize> = order.iter().skip(j).step_by(k).copied().collect();
                mine.chunks(bs).map(|c| c.to_vec()).collect()
            })
            .collect();
        let rounds = shards.iter().map(|s| s.len().div_ceil(tau)).max().unwrap_or(0);
        for r in 0..rounds {
            let start = self.bmuf.as_ref().unwrap().restart_point(&self.model.store);
            for w in &mut self.workers {
                w.model.store.copy_values_from(&start)?;
            }
            let am = self.am.as_ref();
            let cfg = &self.config;
            let run = |w: &mut Worker, batches: &[Vec<usize>]| -> Result<Vec<LossBreakdown>> {
                batches
                    .iter()
                    .map(|c| {
                        let batch = Batch::collate(&c.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;
                        train_step(&batch, &mut w.model, am, &mut w.adam, cfg)
                    })
                    .collect()
            };
            let slice = |j: usize| {
                let s = &shards[j];
                &s[(r * tau).min(s.len())..((r + 1) * tau).min(s.len())]
            };
            let results: Vec<Result<Vec<LossBreakdown>>> = if cfg.threads > 1 {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = self
                        .workers
                        .iter_mut()
                        .enumerate()
                        .map(|(j, w)| {
                            let b = slice(j);
                            scope.spawn(move || run(w, b))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
                })
            } else {
                self.workers.iter_mut().enumerate().map(|(j, w)| run(w, slice(j))).collect()
            };
            for (j, res) in results.into_iter().enumerate() {
                for b in res? {
                    self.step += 1;
                    records.push(self.record(j, &b));
                }
            }
            let replicas: Vec<&ParamStore> = self.workers.iter().map(|w| &w.model.store).collect();
            bmuf_round(self.bmuf.as_mut().unwrap(), &mut self.model.store, &replicas)?;
            if self.bmuf.as_ref().unwrap().config.reset_adam {
                self.workers.iter_mut().for_each(|w| w.adam.reset());
            }
        }
        Ok(())
    }

    /// Scores the current model on `dev`.
    pub fn evaluate(&self, dev: &[Example]) -> Result<MetricReport> {
        let sr = self.model.config.frame.sample_rate;
        let utts = dev
            .iter()
            .map(|e| {
                let y = self.model.enhance_batch(&e.input, &e.fixed)?;
                score(&e.id, &e.target, &y, sr)
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport::new(self.model.variant().id(), utts))
    }

    /// Full training state as a checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint(serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "best": self.best,
            "train": self.config,
        }));
        c.extend(self.adam.state_tensors(&self.model.store, "opt/"));
        for (j, w) in self.workers.iter().enumerate() {
            c.extend(w.adam.state_tensors(&self.model.store, &format!("worker{j}/opt/")));
        }
        if let Some(b) = &self.bmuf {
            c.extend(b.state_tensors(&self.model.store, "bmuf/"));
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Restores a trainer saved by [`save`](Self::save). Bit-identical
    /// continuation needs 32-bit parameter storage (the checkpoint format).
    pub fn resume(path: &Path, am: Option<FrozenAm>, config: TrainConfig) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        let model = EnhancementModel::from_checkpoint(&c, path)?;
        let extra = &c.metadata["extra"];
        let bad = |what: &str| Error::Format {
            path: path.to_path_buf(),
            reason: format!("training checkpoint lacks {what}"),
        };
        let epoch = extra["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        let step = extra["step"].as_u64().ok_or_else(|| bad("step"))?;
        let best: Option<(usize, f64)> = serde_json::from_value(extra["best"].clone())?;
        let mut t = Trainer::new(model, am, config)?;
        t.adam.load_state(&t.model.store, "opt/", &c.tensors)?;
        for (j, w) in t.workers.iter_mut().enumerate() {
            w.adam.load_state(&t.model.store, &format!("worker{j}/opt/"), &c.tensors)?;
        }
        if let Some(b) = &mut t.bmuf {
            b.load_state(&t.model.store, "bmuf/", &c.tensors)?;
        }
        t.epoch = epoch;
        t.step = step;
        t.best = best;
        Ok(t)
    }

    /// Trains until `config.epochs`, evaluating on `dev` after every epoch.
    /// With `out_dir`, writes `last.ckpt`, `best.ckpt`, per-epoch dev CSVs
    /// and appends to the JSONL log.
    pub fn fit(&mut self, train: &[Example], dev: &[Example], out_dir: Option<&Path>) -> Result<TrainSummary> {
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                Some(OpenOptions::new().create(true).append(true).open(d.join(LOG_FILE))?)
            }
            None => None,
        };
        let mut summary = TrainSummary {
            epochs: 0,
            steps: 0,
            best: self.best,
            epoch_losses: Vec::new(),
            dev_reports: Vec::new(),
        };
        while self.epoch < self.config.epochs {
            let records = self.train_epoch(train)?;
            if let Some(f) = &mut log {
                for r in &records {
                    writeln!(f, "{}", serde_json::to_string(r)?)?;
                }
                f.flush()?;
            }
            let losses: Vec<LossBreakdown> = records
                .iter()
                .map(|r| LossBreakdown {
                    l_enh: r.l_enh,
                    l_am: r.l_am,
                    l_total: r.l_total,
                })
                .collect();
            let mean = mean_breakdown(&losses);
            summary.epoch_losses.push(mean);
            let mut improved = dev.is_empty();
            if !dev.is_empty() {
                let report = self.evaluate(dev)?;
                let s = report.mean.si_snr;
                info!(
                    "epoch {}: l_total {:.4} dev SI-SNR {:.3} dB STOI {:.4}",
                    self.epoch, mean.l_total, s, report.mean.stoi
                );
                if self.best.is_none_or(|(_, b)| s > b) {
                    self.best = Some((self.epoch, s));
                    improved = true;
                }
                if let Some(d) = out_dir {
                    fs::write(d.join(format!("dev_epoch{:03}.csv", self.epoch)), report.to_csv())?;
                }
                summary.dev_reports.push(report);
            } else {
                info!("epoch {}: l_total {:.4}", self.epoch, mean.l_total);
            }
            if let Some(d) = out_dir {
                self.save(&d.join(LAST_CKPT))?;
                if improved {
                    self.model.save(&d.join(BEST_CKPT), serde_json::json!({ "epoch": self.epoch, "dev": self.best }))?;
                }
            }
            summary.epochs += 1;
        }
        summary.steps = self.step;
        summary.best = self.best;
        Ok(summary)
    }
}

/// Examples of a dataset directory written by `make_dataset`.
pub fn load_examples(root: &Path, model: &EnhancementModel, am: Option<&FrozenAm>) -> Result<Vec<Example>> {
    let entries = load_manifest(&root.join(MANIFEST))?;
    if entries.is_empty() {
        return invalid(format!("{} lists no examples", root.join(MANIFEST).display()));
    }
    entries
        .iter()
        .map(|e| {
            let (mix, target) = load_example(root, e)?;
            Example::prepare(model, e.id.clone(), &mix, target, am)
        })
        .collect()
}

/// Trains from the dataset directories named in `cfg`, optionally resuming
/// from a checkpoint written by a previous run.
pub fn run_training(model_cfg: &ModelConfig, cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_root = cfg
        .train_data
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("train_data is not set".into()))?;
    let am = cfg.am_checkpoint.as_deref().map(FrozenAm::load).transpose()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(p, am, cfg.clone())?,
        None => Trainer::new(EnhancementModel::new(model_cfg, cfg.precision, cfg.seed)?, am, cfg.clone())?,
    };
    let uses_am = effective_weights(&trainer.model, cfg.loss).beta > 0.0;
    let am_ref = trainer.am.as_ref().filter(|_| uses_am);
    let train = load_examples(train_root, &trainer.model, am_ref)?;
    let dev = match &cfg.dev_data {
        Some(d) => load_examples(d, &trainer.model, am_ref)?,
        None => Vec::new(),
    };
    info!(
        "training {} on {} examples ({} dev) from epoch {}",
        trainer.model.variant(),
        train.len(),
        dev.len(),
        trainer.epoch
    );
    trainer.fit(&train, &dev, Some(&cfg.out_dir))
}
