//! Decoding: transducer beam searches, frame-wise greedy decoding, and the
//! two blank-thresholding mechanisms that trade search work for accuracy.
//!
//! Thresholds live in logit space. The frame filter discards encoder frame
//! `t` when its blank log-odds reach `lambda_ctc`, which is the same test as
//! comparing the blank posterior against `sigmoid(lambda_ctc)` but exact even
//! where the posterior rounds to 1. The per-step gate forces a blank
//! transition whenever the blank logit reaches `lambda_hat` and skips the
//! label head for that step. The threshold enters only through these
//! comparisons, so a saturating threshold reproduces unthresholded decoding
//! bit for bit.

mod search;

pub use search::{alsd_decode, tsd_decode};

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CtcHeadKind, EncoderOutput, FrameDistributions, ModelConfig, ModelParameters, PredictionState,
    TokenId, TransducerMode,
};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Frame-wise argmax over the per-frame head; no prediction network.
    GreedyCtc,
    /// Alignment-length-synchronous transducer beam search.
    Alsd,
    /// Time-synchronous transducer beam search.
    Tsd,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::GreedyCtc => "greedy_ctc",
            Algorithm::Alsd => "alsd",
            Algorithm::Tsd => "tsd",
        })
    }
}

/// Search settings; the defaults match the benchmark setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub algorithm: Algorithm,
    /// Hypotheses kept per search step, and the length of the n-best list.
    pub beam: usize,
    /// Label budget for ALSD as a fraction of the kept encoder frames.
    pub alsd_max_symbols: f64,
    /// Label expansions TSD may take on one frame before emitting blank.
    pub tsd_max_expansions_per_frame: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            algorithm: Algorithm::Alsd,
            beam: 8,
            alsd_max_symbols: 1.0,
            tsd_max_expansions_per_frame: 3,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::InvalidArgument("beam must be at least 1".into()));
        }
        if !self.alsd_max_symbols.is_finite() || self.alsd_max_symbols <= 0.0 {
            return Err(Error::InvalidArgument(
                "label budget factor must be positive and finite".into(),
            ));
        }
        if self.tsd_max_expansions_per_frame == 0 {
            return Err(Error::InvalidArgument(
                "need at least one label expansion per frame".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    None,
    /// Per-step blank gate only.
    Hat,
    /// Per-frame blank filter only.
    Ctc,
    /// Filter frames first, then gate the surviving steps.
    Dual,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::None => "none",
            ThresholdMode::Hat => "hat",
            ThresholdMode::Ctc => "ctc",
            ThresholdMode::Dual => "dual",
        })
    }
}

/// Where the per-frame blank posterior for the filter comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlankSource {
    /// Internal acoustic model: the joint evaluated without prediction input.
    Iam,
    /// The trained per-frame head.
    Fctc,
}

impl fmt::Display for BlankSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlankSource::Iam => "iam",
            BlankSource::Fctc => "fctc",
        })
    }
}

/// Which thresholds apply during decoding and where the frame-level blank
/// posterior comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    /// Gate threshold in blank-logit units.
    pub lambda_hat: f64,
    /// Filter threshold in blank log-odds units.
    pub lambda_ctc: f64,
    pub blank_source: BlankSource,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            mode: ThresholdMode::None,
            lambda_hat: 0.0,
            lambda_ctc: 0.0,
            blank_source: BlankSource::Iam,
        }
    }
}

impl ThresholdConfig {
    /// True when the per-step gate is active.
    pub fn gates_steps(&self) -> bool {
        matches!(self.mode, ThresholdMode::Hat | ThresholdMode::Dual)
    }

    /// True when the per-frame filter is active.
    pub fn filters_frames(&self) -> bool {
        matches!(self.mode, ThresholdMode::Ctc | ThresholdMode::Dual)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !self.lambda_hat.is_finite() || !self.lambda_ctc.is_finite() {
            return Err(Error::InvalidArgument("thresholds must be finite".into()));
        }
        if self.gates_steps() && model.mode != TransducerMode::Hat {
            return Err(Error::Unsupported(
                "per-step blank gating needs a factorized blank head".into(),
            ));
        }
        if self.filters_frames()
            && self.blank_source == BlankSource::Fctc
            && !matches!(model.ctc_head, CtcHeadKind::Ctc | CtcHeadKind::Fctc)
        {
            return Err(Error::Config(
                "frame filtering from the per-frame head needs a ctc or fctc head".into(),
            ));
        }
        Ok(())
    }
}

/// Work and timing counters for one decode, or a field-wise sum over many.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodeStats {
    pub encoder_frames: usize,
    /// Frames surviving the filter; equals `encoder_frames` when no filter ran.
    pub kept_frames: usize,
    pub blank_head_calls: usize,
    pub label_head_calls: usize,
    /// Encode + filter + search time; excludes I/O and scoring.
    pub wall_decode_seconds: f64,
    pub audio_seconds: f64,
}

impl DecodeStats {
    /// Field-wise sum. Associative and commutative, so per-utterance stats
    /// reduce in any grouping.
    pub fn merge(&mut self, other: &DecodeStats) {
        self.encoder_frames += other.encoder_frames;
        self.kept_frames += other.kept_frames;
        self.blank_head_calls += other.blank_head_calls;
        self.label_head_calls += other.label_head_calls;
        self.wall_decode_seconds += other.wall_decode_seconds;
        self.audio_seconds += other.audio_seconds;
    }

    /// Share of encoder frames surviving the filter, in percent (NBP).
    /// Empty input counts as fully kept.
    pub fn non_blank_percentage(&self) -> f64 {
        if self.encoder_frames == 0 {
            100.0
        } else {
            100.0 * self.kept_frames as f64 / self.encoder_frames as f64
        }
    }

    /// Label-head evaluations per blank-head evaluation, in percent (JCR).
    /// A decode that never reached the joint did no avoidable label work,
    /// which reports as 100.
    pub fn joint_call_ratio(&self) -> f64 {
        if self.blank_head_calls == 0 {
            100.0
        } else {
            100.0 * self.label_head_calls as f64 / self.blank_head_calls as f64
        }
    }

    /// Decode wall time per second of audio (RTF).
    pub fn real_time_factor(&self) -> f64 {
        self.wall_decode_seconds / self.audio_seconds
    }
}

/// A transcription candidate with its accumulated log-probability and the
/// prediction-network state after consuming `tokens`.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    pub pred_state: PredictionState,
}

/// Result of decoding one utterance: the best hypothesis, the n-best list
/// (best first), and the work counters.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub best: Hypothesis,
    pub nbest: Vec<Hypothesis>,
    pub stats: DecodeStats,
}

/// Outcome of one gated joint evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum GateOutcome {
    /// The blank logit reached the gate threshold; only the blank transition
    /// is scored and the label head was never evaluated.
    ForcedBlank { blank_log_prob: f64 },
    /// Combined log-distribution over the full vocabulary, blank first.
    Scored { log_probs: Vec<f64> },
}

/// Drop encoder frames whose blank log-odds reach `lambda`.
///
/// Returns the kept frame indices, strictly increasing and possibly empty,
/// plus partial stats carrying the frame counts. The posterior evaluations
/// happen outside the decoder and are not counted as head calls.
pub fn ctc_blank_filter(
    params: &ModelParameters,
    enc: &EncoderOutput,
    lambda: f64,
    source: BlankSource,
) -> Result<(Vec<usize>, DecodeStats)> {
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(
            "frame filter threshold must be finite".into(),
        ));
    }
    let dists = match source {
        BlankSource::Iam => params.iam_from_encoder(enc)?,
        BlankSource::Fctc => {
            if !matches!(params.config.ctc_head, CtcHeadKind::Ctc | CtcHeadKind::Fctc) {
                return Err(Error::Config(
                    "frame filtering from the per-frame head needs a ctc or fctc head".into(),
                ));
            }
            params.head_distributions_from_encoder(enc)?
        }
    };
    let blank = params.config.blank_id;
    let kept: Vec<usize> = (0..enc.frames())
        .filter(|&t| dists.blank_log_odds(t, blank) < lambda)
        .collect();
    let stats = DecodeStats {
        encoder_frames: enc.frames(),
        kept_frames: kept.len(),
        ..DecodeStats::default()
    };
    Ok((kept, stats))
}

/// One joint evaluation guarded by the blank gate.
///
/// The blank head always runs (one blank-head call); the label head runs only
/// when the blank logit stays below `lambda` (one label-head call). Rejected
/// for single-softmax joints, which have no separately evaluable blank head.
pub fn hat_blank_gate(
    params: &ModelParameters,
    h_enc: &[f64],
    state: &PredictionState,
    lambda: f64,
    stats: &mut DecodeStats,
) -> Result<GateOutcome> {
    if params.config.mode != TransducerMode::Hat {
        return Err(Error::Unsupported(
            "per-step blank gating needs a factorized blank head".into(),
        ));
    }
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(
            "gate threshold must be finite".into(),
        ));
    }
    Ok(search::eval_step(params, h_enc, state, Some(lambda), stats))
}

/// Frame-wise argmax decoding: collapse repeated labels, then drop blanks.
/// Argmax ties break toward the lowest token index.
pub fn greedy_ctc_decode(dists: &FrameDistributions, blank_id: usize) -> Vec<TokenId> {
    let mut tokens = Vec::new();
    let mut prev = None;
    for t in 0..dists.frames() {
        let best = argmax(dists.log_row(t));
        if prev != Some(best) && best != blank_id {
            tokens.push(best);
        }
        prev = Some(best);
    }
    tokens
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Decode one utterance end to end: encode, filter, search.
///
/// The wall clock covers exactly those three stages. An utterance whose
/// frames are all filtered away decodes to the empty transcript with
/// log-score 0.
pub fn decode_utterance(
    params: &ModelParameters,
    features: &Matrix,
    audio_seconds: f64,
    decode: &DecodeConfig,
    thresholds: &ThresholdConfig,
) -> Result<DecodeOutput> {
    decode.validate()?;
    thresholds.validate(&params.config)?;
    if decode.algorithm == Algorithm::GreedyCtc && thresholds.gates_steps() {
        return Err(Error::Config(
            "frame-wise greedy decoding has no per-step blank gate".into(),
        ));
    }
    let start = Instant::now();
    let enc = params.encode(features)?;
    let kept: Vec<usize> = if thresholds.filters_frames() {
        ctc_blank_filter(params, &enc, thresholds.lambda_ctc, thresholds.blank_source)?.0
    } else {
        (0..enc.frames()).collect()
    };
    let mut out = match decode.algorithm {
        Algorithm::GreedyCtc => greedy_output(params, &enc, &kept)?,
        Algorithm::Alsd => search::alsd_decode(params, &enc, &kept, decode, thresholds)?,
        Algorithm::Tsd => search::tsd_decode(params, &enc, &kept, decode, thresholds)?,
    };
    out.stats.wall_decode_seconds = start.elapsed().as_secs_f64();
    out.stats.audio_seconds = audio_seconds;
    Ok(out)
}

fn greedy_output(
    params: &ModelParameters,
    enc: &EncoderOutput,
    kept: &[usize],
) -> Result<DecodeOutput> {
    let all = params.head_distributions_from_encoder(enc)?;
    let vocab = params.config.vocab_size;
    let mut rows = Matrix::zeros(kept.len(), vocab);
    for (i, &t) in kept.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(all.log_row(t));
    }
    let filtered = FrameDistributions::new(rows);
    let tokens = greedy_ctc_decode(&filtered, params.config.blank_id);
    let log_score = (0..filtered.frames())
        .map(|t| {
            let row = filtered.log_row(t);
            row[argmax(row)]
        })
        .sum();
    let pred_state = params.predict(&tokens)?;
    let stats = DecodeStats {
        encoder_frames: enc.frames(),
        kept_frames: kept.len(),
        blank_head_calls: kept.len(),
        label_head_calls: kept.len(),
        ..DecodeStats::default()
    };
    let best = Hypothesis {
        tokens,
        log_score,
        pred_state,
    };
    Ok(DecodeOutput {
        nbest: vec![best.clone()],
        best,
        stats,
    })
}
