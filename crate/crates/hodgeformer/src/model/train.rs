//! Training loop: shuffled batches, on-the-fly augmentation and pattern
//! resampling, Adam with cosine-annealed learning rate, per-epoch CSV
//! metrics, best/final checkpoints.
//!
//! Determinism: every random stream (shuffling, augmentation, patterns,
//! dropout) is derived from the config seed with [`mix_seed`] salts, and
//! per-sample gradients are reduced in sample order, so runs with the same
//! seed produce byte-identical metrics and checkpoints at any worker count.
//! In debug builds a non-finite forward value panics at the offending tape
//! node instead of reaching the divergence guard; release builds skip the
//! bad batch and abort after three consecutive ones.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Scalar, Tape};
use crate::model::checkpoint;
use crate::model::data::{class_weights, PreparedSample};
use crate::model::eval::{evaluate_prepared, EvalSummary};
use crate::model::{argmax_rows, build_patterns, mix_seed, Model};
use crate::nn::{cosine_lr, Adam, GradAccum};
use crate::par;
use crate::{Error, Result};

// Salts separating the derived random streams.
const SALT_SHUFFLE: u64 = 0x583f;
const SALT_AUGMENT: u64 = 0xa06;
const SALT_PATTERN: u64 = 0xba7d;
const SALT_DROPOUT: u64 = 0xd80;
const SALT_EVAL: u64 = 0xea1;

pub struct TrainOptions {
    /// Where to write `metrics.csv`, `report.json`, `best.ckpt`,
    /// `final.ckpt`; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            out_dir: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    #[serde(skip)]
    pub metrics_csv: String,
}

/// Counts consecutive batches with a non-finite loss; three in a row abort
/// the run with a diagnostic.
pub(crate) struct DivergenceGuard {
    consecutive: usize,
}

impl DivergenceGuard {
    pub(crate) fn new() -> DivergenceGuard {
        DivergenceGuard { consecutive: 0 }
    }

    pub(crate) fn observe(&mut self, finite: bool, epoch: usize, batch: usize) -> Result<()> {
        if finite {
            self.consecutive = 0;
            return Ok(());
        }
        self.consecutive += 1;
        if self.consecutive >= 3 {
            return Err(Error::Diverged(format!(
                "loss non-finite for 3 consecutive batches (last: epoch {epoch}, batch {batch}); \
                 try a lower lr_max"
            )));
        }
        Ok(())
    }
}

struct SampleOut<T: Scalar> {
    grads: GradAccum<T>,
    loss: f64,
    correct: usize,
    total: usize,
    finite: bool,
}

pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let cfg = model.config.clone();
    let weights = class_weights(train_set, cfg.num_classes, cfg.class_weighting);
    let mut adam = Adam::new(&model.store);
    let mut guard = DivergenceGuard::new();

    let mut csv = String::from("epoch,lr,train_loss,train_acc,val_loss,val_acc\n");
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_saved = false;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;
    let mut final_metrics = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs.max(1), cfg.lr_max, cfg.lr_min);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, SALT_SHUFFLE), epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_total = 0usize;
        let mut finite_samples = 0usize;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_len = batch.len();
            let results: Vec<SampleOut<T>> = par::map_indexed(opts.workers, batch, |_, &idx| {
                let s = &train_set[idx];
                let sample_salt = mix_seed(epoch as u64, idx as u64);
                let feats = s.epoch_features(
                    cfg.augment,
                    mix_seed(mix_seed(cfg.seed, SALT_AUGMENT), sample_salt),
                );
                let pattern_seed = if cfg.resample_patterns {
                    mix_seed(mix_seed(cfg.seed, SALT_PATTERN), sample_salt)
                } else {
                    mix_seed(mix_seed(cfg.seed, SALT_PATTERN), idx as u64)
                };
                let patterns = build_patterns(&s.adj, pattern_seed);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    mix_seed(cfg.seed, SALT_DROPOUT),
                    sample_salt,
                ));
                let mut tape = Tape::new();
                let b = model.store.bind(&mut tape, true);
                let logits = model.forward(&mut tape, &b, s, &feats, &patterns, true, &mut rng);
                let targets = model.targets(s);
                let loss = tape.cross_entropy(logits, &targets, &weights, cfg.label_smoothing);
                let loss_val = tape.values(loss)[0].to_f64();
                let preds = argmax_rows(tape.values(logits), logits.rows, logits.cols);
                let correct = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
                let finite = loss_val.is_finite();
                let mut grads = GradAccum::zeros(&model.store);
                if finite {
                    let mut g =
                        tape.backward_seeded(loss, T::from_f64(1.0 / batch_len as f64));
                    grads.accumulate(&b, &mut g);
                }
                SampleOut {
                    grads,
                    loss: loss_val,
                    correct,
                    total: targets.len(),
                    finite,
                }
            });

            let batch_finite = results.iter().all(|r| r.finite);
            for r in &results {
                epoch_correct += r.correct;
                epoch_total += r.total;
                if r.finite {
                    epoch_loss += r.loss;
                    finite_samples += 1;
                }
            }
            guard.observe(batch_finite, epoch + 1, batch_no)?;
            if batch_finite {
                let mut total = GradAccum::zeros(&model.store);
                for r in &results {
                    total.merge(&r.grads);
                }
                adam.step(&mut model.store, &total, lr);
            }
        }

        let train_loss = epoch_loss / finite_samples.max(1) as f64;
        let train_acc = epoch_correct as f64 / epoch_total.max(1) as f64;
        let val = eval_split(model, val_set, cfg.seed, opts.workers);
        epochs_run = epoch + 1;
        final_metrics = (train_loss, train_acc, val.mean_loss, val.accuracy);
        csv.push_str(&format!(
            "{},{lr},{train_loss},{train_acc},{},{}\n",
            epoch + 1,
            val.mean_loss,
            val.accuracy
        ));

        // "Best" means highest validation accuracy (training accuracy when
        // there is no validation split), earliest epoch on ties.
        let selection_acc = if val_set.is_empty() { train_acc } else { val.accuracy };
        if selection_acc > best_val_acc {
            best_val_acc = selection_acc;
            best_epoch = epoch + 1;
            if let Some(dir) = &opts.out_dir {
                checkpoint::save(&dir.join("best.ckpt"), model, None, epoch as u64 + 1)?;
                best_saved = true;
            }
        }

        if let Some(target) = cfg.early_stop_train_acc {
            if train_acc >= target {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join("final.ckpt"), model, Some(&adam), epochs_run as u64)?;
        if !best_saved {
            checkpoint::save(&dir.join("best.ckpt"), model, None, epochs_run as u64)?;
        }
        std::fs::write(dir.join("metrics.csv"), &csv)?;
    }

    let report = TrainReport {
        epochs_run,
        final_train_loss: final_metrics.0,
        final_train_acc: final_metrics.1,
        final_val_loss: final_metrics.2,
        final_val_acc: final_metrics.3,
        best_val_acc: if best_val_acc.is_finite() { best_val_acc } else { f64::NAN },
        best_epoch,
        stopped_early,
        metrics_csv: csv,
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

fn eval_split<T: Scalar>(
    model: &Model<T>,
    samples: &[PreparedSample],
    seed: u64,
    workers: usize,
) -> EvalSummary {
    if samples.is_empty() {
        return EvalSummary {
            mean_loss: f64::NAN,
            accuracy: f64::NAN,
            correct: 0,
            total: 0,
            per_sample: Vec::new(),
        };
    }
    evaluate_prepared(model, samples, mix_seed(seed, SALT_EVAL), workers)
}
