//! Transducer model: encoder, prediction and joint networks.
//!
//! Two transducer modes are supported. `Rnnt` models blank and labels in a
//! single softmax over the full vocabulary. `Hat` factorizes the joint
//! network into a sigmoid blank head and a softmax label head over the
//! non-blank vocabulary; the combined per-cell distribution is
//! `[p_blank ; (1 - p_blank) * label_dist]`.
//!
//! On top of the shared encoder an optional CTC-style head produces
//! per-frame distributions: a plain linear+softmax head (`Ctc`), a
//! factorized blank/label head pair (`Fctc`), or the parameter-free
//! internal acoustic model (`Iam`) which re-uses the joint network with
//! the prediction input zeroed. The converse zeroing (encoder input
//! zeroed) yields the internal language model view, see
//! [`ModelParameters::ilm_eval`].

mod checkpoint;
mod forward;
mod params;

pub use forward::{FrameForward, IlmForward, LatticeForward};
pub use params::{AffineParams, CtcHeadParams, GruParams, JointHeadParams, JointParams};

use serde::{Deserialize, Serialize};

use crate::numkit::{self, Matrix};
use crate::{Error, Result};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransducerMode {
    Rnnt,
    Hat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtcHeadKind {
    None,
    Ctc,
    Fctc,
    Iam,
}

/// Architecture metadata; fixed at init time and stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: TransducerMode,
    pub ctc_head: CtcHeadKind,
    /// Input feature dimension per acoustic frame.
    pub feature_dim: usize,
    /// Hidden width shared by encoder, prediction and joint networks.
    pub hidden_dim: usize,
    /// Vocabulary size including the blank symbol.
    pub vocab_size: usize,
    /// Index of the blank symbol; fixed to 0 in this toolkit.
    pub blank_id: usize,
    /// Subsampling stride: one encoder frame per `stride` input frames.
    pub stride: usize,
    /// Causal encoders see no lookahead group; offline encoders see one.
    pub causal: bool,
    pub encoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: TransducerMode::Hat,
            ctc_head: CtcHeadKind::Iam,
            feature_dim: 8,
            hidden_dim: 16,
            vocab_size: 17,
            blank_id: 0,
            stride: 2,
            causal: false,
            encoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary needs blank plus at least one label".into(),
            ));
        }
        if self.blank_id != 0 {
            return Err(Error::InvalidArgument(
                "blank symbol must have index 0".into(),
            ));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("zero model dimension".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.encoder_layers == 0 {
            return Err(Error::InvalidArgument(
                "need at least one encoder layer".into(),
            ));
        }
        Ok(())
    }

    /// Encoder frames produced for `input_frames` acoustic frames.
    pub fn encoder_len(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(self.stride)
    }

    /// Width of the stacked-frame window consumed by the first encoder layer.
    pub fn window_frames(&self) -> usize {
        if self.causal {
            self.stride
        } else {
            2 * self.stride
        }
    }
}

/// Token inventory: blank plus named non-blank labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    blank_id: usize,
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>, blank_id: usize) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary needs blank plus at least one label".into(),
            ));
        }
        if blank_id >= names.len() {
            return Err(Error::InvalidArgument("blank index out of range".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate token name `{n}`"
                )));
            }
        }
        Ok(Vocabulary { blank_id, names })
    }

    /// Blank `<b>` at index 0 followed by `t01..`, as used by the synthetic task.
    pub fn synthetic(size: usize) -> Self {
        let mut names = vec!["<b>".to_string()];
        for k in 1..size {
            names.push(format!("t{k:02}"));
        }
        Vocabulary { blank_id: 0, names }
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Subsampled encoder states, one row per encoder frame.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    hidden: Matrix,
    source_frames: usize,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.hidden.rows()
    }

    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.hidden.row(t)
    }

    /// Input frames per encoder frame, `T' / T`.
    pub fn subsample_ratio(&self) -> f64 {
        self.source_frames as f64 / self.hidden.rows() as f64
    }
}

/// Prediction-network state after consuming a label prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionState {
    hidden: Vec<f64>,
    consumed: usize,
}

impl PredictionState {
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    /// Number of prefix tokens consumed so far.
    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

/// Joint-network output for one (encoder frame, prediction state) pair.
#[derive(Debug, Clone)]
pub enum JointOutput {
    /// Single distribution over the full vocabulary.
    Rnnt { probs: Vec<f64> },
    /// Factorized blank probability plus label distribution.
    Hat { blank: f64, label: Vec<f64> },
}

impl JointOutput {
    /// Full-vocabulary distribution; for the factorized case this is
    /// `[p_blank ; (1 - p_blank) * label]` and sums to 1.
    pub fn combined(&self) -> Vec<f64> {
        match self {
            JointOutput::Rnnt { probs } => probs.clone(),
            JointOutput::Hat { blank, label } => {
                let mut out = Vec::with_capacity(label.len() + 1);
                out.push(*blank);
                for &p in label {
                    out.push((1.0 - blank) * p);
                }
                out
            }
        }
    }
}

/// Training-time output tensor: log-probabilities over `(t, u, k)` with
/// shape `T x (U+1) x K`. Each `(t, u)` slice is a normalized distribution.
#[derive(Debug, Clone)]
pub struct JointLattice {
    t_len: usize,
    u_len: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl JointLattice {
    pub fn zeros(t_len: usize, u_len: usize, vocab: usize) -> Self {
        JointLattice {
            t_len,
            u_len,
            vocab,
            data: vec![0.0; t_len * u_len * vocab],
        }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    /// Number of prediction states, `U + 1`.
    pub fn u_len(&self) -> usize {
        self.u_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn offset(&self, t: usize, u: usize) -> usize {
        (t * self.u_len + u) * self.vocab
    }

    pub fn slice(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.data[o..o + self.vocab]
    }

    pub fn slice_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let o = self.offset(t, u);
        &mut self.data[o..o + self.vocab]
    }

    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.data[self.offset(t, u) + k]
    }
}

/// Per-frame log-distributions over the vocabulary, `T x K`.
///
/// Produced by the CTC-style heads and by the internal acoustic model.
#[derive(Debug, Clone)]
pub struct FrameDistributions {
    log_probs: Matrix,
}

impl FrameDistributions {
    pub(crate) fn new(log_probs: Matrix) -> Self {
        FrameDistributions { log_probs }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    pub fn log_row(&self, t: usize) -> &[f64] {
        self.log_probs.row(t)
    }

    pub fn probs_row(&self, t: usize) -> Vec<f64> {
        self.log_probs.row(t).iter().map(|&x| x.exp()).collect()
    }

    /// Log-odds of blank at frame `t`: `ln(p_blank / (1 - p_blank))`.
    ///
    /// Computed from the log-distribution, so it stays exact where the
    /// probability itself would round to 1.
    pub fn blank_log_odds(&self, t: usize, blank_id: usize) -> f64 {
        let row = self.log_probs.row(t);
        let others: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != blank_id)
            .map(|(_, &v)| v)
            .collect();
        row[blank_id] - numkit::log_sum_exp(&others)
    }
}

pub use params::ModelParameters;
