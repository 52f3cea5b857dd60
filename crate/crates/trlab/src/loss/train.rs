//! Adam training loop over the combined objective.
//!
//! Fully deterministic for a fixed shuffle seed: sequential utterance
//! order (shuffled by a seeded stream), sequential batch reduction, and
//! a flat-vector Adam state. Two identical invocations produce
//! bit-identical parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::model::ModelParameters;
use crate::{Error, Result};

use super::{joint_loss, LossReport};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
        }
    }
}

/// Mean loss components over one split for one epoch.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: Split,
    pub rnnt: f64,
    pub ctc: f64,
    pub ilm: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps of linear learning-rate ramp-up; 0 disables warmup.
    pub warmup_steps: usize,
    /// Weight of the per-frame loss term.
    pub alpha: f64,
    /// Weight of the label-only language model term.
    pub beta: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: 20,
            alpha: 0.0,
            beta: 0.0,
            shuffle_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of [`train`]: the parameters with the best dev loss, the
/// per-epoch loss trace, and bookkeeping counters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub trace: Vec<TraceRow>,
    pub best_epoch: usize,
    pub best_dev_joint: f64,
    /// Utterances skipped because the per-frame loss was inadmissible.
    pub skipped_utterances: usize,
}

#[derive(Default)]
struct Accum {
    rnnt: f64,
    ctc: f64,
    ilm: f64,
    joint: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, r: &LossReport) {
        self.rnnt += r.rnnt;
        self.ctc += r.ctc;
        self.ilm += r.ilm;
        self.joint += r.joint;
        self.n += 1;
    }

    fn row(&self, epoch: usize, split: Split) -> TraceRow {
        let d = self.n as f64;
        TraceRow {
            epoch,
            split,
            rnnt: self.rnnt / d,
            ctc: self.ctc / d,
            ilm: self.ilm / d,
            joint: self.joint / d,
        }
    }

    fn mean_joint(&self) -> f64 {
        if self.n == 0 {
            f64::INFINITY
        } else {
            self.joint / self.n as f64
        }
    }
}

fn check_divergence(report: &LossReport, id: &str, epoch: usize) -> Result<()> {
    if report.rnnt.is_nan() || report.ctc.is_nan() || report.ilm.is_nan() {
        return Err(Error::Diverged(format!(
            "loss became NaN on utterance `{id}` in epoch {epoch}"
        )));
    }
    Ok(())
}

fn evaluate(
    params: &ModelParameters,
    set: &[Utterance],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Accum> {
    let mut acc = Accum::default();
    for utt in set {
        let (report, _) = joint_loss(params, &utt.features, &utt.reference, cfg.alpha, cfg.beta)?;
        check_divergence(&report, &utt.id, epoch)?;
        if report.joint.is_finite() {
            acc.add(&report);
        }
    }
    Ok(acc)
}

/// Train with Adam and return the parameters of the epoch with the
/// lowest mean dev loss (the final parameters when `dev_set` is empty).
pub fn train(
    init: &ModelParameters,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }

    let mut params = init.clone();
    let n = params.num_params();
    let mut adam_m = vec![0.0; n];
    let mut adam_v = vec![0.0; n];
    let mut adam_t: u32 = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, ModelParameters)> = None;
    let mut skipped = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_grad = vec![0.0; n];
            let mut contributed = 0usize;
            for &i in chunk {
                let utt = &train_set[i];
                let (report, grads) =
                    joint_loss(&params, &utt.features, &utt.reference, cfg.alpha, cfg.beta)?;
                check_divergence(&report, &utt.id, epoch)?;
                if !report.joint.is_finite() {
                    skipped += 1;
                    continue;
                }
                acc.add(&report);
                for (a, b) in batch_grad.iter_mut().zip(grads.flatten()) {
                    *a += b;
                }
                contributed += 1;
            }
            if contributed == 0 || cfg.learning_rate == 0.0 {
                continue;
            }
            adam_t += 1;
            let warm = if cfg.warmup_steps > 0 {
                (adam_t as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let lr = cfg.learning_rate * warm;
            let scale = 1.0 / contributed as f64;
            let bias1 = 1.0 - ADAM_BETA1.powi(adam_t as i32);
            let bias2 = 1.0 - ADAM_BETA2.powi(adam_t as i32);
            let mut theta = params.flatten();
            for i in 0..n {
                let g = batch_grad[i] * scale;
                adam_m[i] = ADAM_BETA1 * adam_m[i] + (1.0 - ADAM_BETA1) * g;
                adam_v[i] = ADAM_BETA2 * adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = adam_m[i] / bias1;
                let v_hat = adam_v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            params.assign_flat(&theta)?;
        }
        trace.push(acc.row(epoch, Split::Train));
        if !dev_set.is_empty() {
            let dev = evaluate(&params, dev_set, cfg, epoch)?;
            trace.push(dev.row(epoch, Split::Dev));
            let dev_joint = dev.mean_joint();
            if best.as_ref().is_none_or(|(_, b, _)| dev_joint < *b) {
                best = Some((epoch, dev_joint, params.clone()));
            }
        }
    }

    let (best_epoch, best_dev_joint, chosen) = match best {
        Some(b) => b,
        None => (cfg.epochs, f64::NAN, params),
    };
    Ok(TrainOutcome {
        params: chosen,
        trace,
        best_epoch,
        best_dev_joint,
        skipped_utterances: skipped,
    })
}
