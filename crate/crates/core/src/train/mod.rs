//! SGD training with warm restarts, evaluation and checkpoints.

mod checkpoint;
mod eval;
mod optim;
mod schedule;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use eval::{evaluate, label_rank, recompute_bn_moments, topk_misses};
pub use optim::{sgd_momentum_step, sgd_update, OptimizerState, MOMENTUM, WEIGHT_DECAY, WEIGHT_DECAY_LARGE};
pub use schedule::{cosine_lr, warm_restart_lr, Schedule, CYCLE_EPOCHS, LR_MAX, LR_MIN};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batch_count, make_minibatches, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::{softmax_cross_entropy, BnMode};
use crate::tensor::{Real, Rng};

/// Key of the generator used for the post-training moment pass.
const RECOMPUTE_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Must be a cycle boundary: 2, 6, 14, 30, 62, 126 or 254.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    pub eval_batch_size: usize,
    /// Evaluate after every epoch rather than only at cycle ends.
    pub eval_every_epoch: bool,
    /// Replace the running-average moments after training.
    pub recompute_moments: bool,
    /// Line-delimited JSON epoch log.
    pub log_path: Option<PathBuf>,
    /// Checkpoint rewritten at every cycle end.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 125,
            lr_max: LR_MAX,
            lr_min: LR_MIN,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            augment: None,
            seed: 0,
            eval_batch_size: 500,
            eval_every_epoch: false,
            recompute_moments: true,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running error of the train-mode forward passes over the epoch.
    pub train_error: f64,
    /// Test errors with running-average moments; present at cycle ends.
    pub test_top1: Option<f64>,
    pub test_top5: Option<f64>,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub ema_top1: f64,
    pub ema_top5: f64,
    pub recomputed_top1: Option<f64>,
    pub recomputed_top5: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub final_eval: Option<FinalEval>,
}

impl TrainLog {
    /// Same results up to wall-clock timings.
    pub fn same_results(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| {
            let mut l = l.clone();
            l.records.iter_mut().for_each(|r| r.wall_seconds = 0.0);
            l
        };
        strip(self) == strip(other)
    }
}

pub struct TrainOutcome<T> {
    pub log: TrainLog,
    pub optimizer: OptimizerState<T>,
    pub steps: u64,
}

pub fn train<T: Real>(
    net: &mut Network<T>,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_progress(net, train_ds, test_ds, cfg, &mut |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_progress<T: Real>(
    net: &mut Network<T>,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let ipe = batch_count(train_ds.len(), cfg.batch_size);
    if ipe == 0 {
        return Err(Error::arg(format!(
            "{} training samples make no batch of {}",
            train_ds.len(),
            cfg.batch_size
        )));
    }
    let mut schedule = Schedule::through_epoch(cfg.epochs, ipe)?;
    schedule.lr_max = cfg.lr_max;
    schedule.lr_min = cfg.lr_min;
    let cycle_ends = schedule.cycle_ends();

    let mut log_file = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut opt = OptimizerState::new(cfg.momentum, cfg.weight_decay);
    let root = Rng::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..schedule.total_epochs() {
        let started = Instant::now();
        let (mut loss_sum, mut misses, mut seen) = (0.0, 0usize, 0usize);
        let batches = make_minibatches::<T>(
            train_ds,
            cfg.batch_size,
            &root.derive(epoch as u64),
            cfg.augment.as_ref(),
        )?;
        for (x, y) in batches {
            opt.lr = warm_restart_lr(step, &schedule)?;
            let logits = net.forward(&x, BnMode::Train)?;
            let out = softmax_cross_entropy(&logits, &y)?;
            if !out.loss.is_finite() {
                net.clear_cache();
                let layer = net.first_nonfinite_layer(&x).unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite { layer });
            }
            loss_sum += out.loss * y.len() as f64;
            misses += topk_misses(&logits, &y)?.0;
            seen += y.len();
            net.backward(&out.dlogits)?;
            sgd_momentum_step(&mut net.parameters(), &mut opt)?;
            step += 1;
        }
        let done = epoch + 1;
        let cycle_end = cycle_ends.contains(&done);
        if let (true, Some(p)) = (cycle_end, &cfg.checkpoint_path) {
            save_checkpoint(p, net, &opt, done as u64, step as u64)?;
        }
        let eval_now = cfg.eval_every_epoch || cycle_end;
        let (test_top1, test_top5) = match test_ds {
            Some(ds) if eval_now => {
                let (a, b) = evaluate(net, ds, cfg.eval_batch_size)?;
                (Some(a), Some(b))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch: done,
            train_loss: loss_sum / seen as f64,
            train_error: misses as f64 / seen as f64,
            test_top1,
            test_top5,
            lr: warm_restart_lr(step, &schedule).unwrap_or(schedule.lr_min),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        on_epoch(&record);
        log.records.push(record);
    }

    let last = log.records.last().expect("at least two epochs");
    if let (Some(ema_top1), Some(ema_top5)) = (last.test_top1, last.test_top5) {
        log.final_eval = Some(FinalEval {
            ema_top1,
            ema_top5,
            recomputed_top1: None,
            recomputed_top5: None,
        });
    }
    if cfg.recompute_moments {
        recompute_bn_moments(
            net,
            train_ds,
            cfg.augment.as_ref(),
            cfg.batch_size,
            &root.derive(RECOMPUTE_STREAM),
        )?;
        if let (Some(ds), Some(fe)) = (test_ds, log.final_eval.as_mut()) {
            let (a, b) = evaluate(net, ds, cfg.eval_batch_size)?;
            fe.recomputed_top1 = Some(a);
            fe.recomputed_top5 = Some(b);
        }
    }
    if let (Some(f), Some(fe)) = (log_file.as_mut(), &log.final_eval) {
        serde_json::to_writer(&mut *f, &serde_json::json!({ "final": fe }))?;
        f.write_all(b"\n")?;
        f.flush()?;
    }
    Ok(TrainOutcome {
        log,
        optimizer: opt,
        steps: step as u64,
    })
}
