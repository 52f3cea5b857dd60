//! Level- and frame-synchronous beam searches over the transducer lattice.
//!
//! Both searches share one gated evaluation step, merge hypotheses with
//! identical token sequences by log-sum-exp, and order candidates by score,
//! then length, then lexicographic tokens, so output is deterministic.

use std::cmp::Ordering;
use std::collections::{btree_map::Entry, BTreeMap};

use crate::error::{Error, Result};
use crate::model::{EncoderOutput, ModelParameters, PredictionState, TokenId, TransducerMode};
use crate::numkit;

use super::{DecodeConfig, DecodeOutput, DecodeStats, GateOutcome, Hypothesis, ThresholdConfig};

/// One joint evaluation with optional blank gating, counting head calls.
///
/// For the factorized joint the blank head always runs; the label head runs
/// only when no gate fires. A single-softmax joint produces blank and label
/// scores in one evaluation, so both counters advance together and `gate`
/// must be `None` (enforced by threshold validation upstream).
pub(crate) fn eval_step(
    params: &ModelParameters,
    h_enc: &[f64],
    state: &PredictionState,
    gate: Option<f64>,
    stats: &mut DecodeStats,
) -> GateOutcome {
    let j = params.joint_pre(Some(h_enc), Some(state.hidden()));
    match params.config.mode {
        TransducerMode::Hat => {
            let bl = params.hat_blank_logit(&j);
            stats.blank_head_calls += 1;
            if gate.is_some_and(|lambda| bl >= lambda) {
                return GateOutcome::ForcedBlank {
                    blank_log_prob: numkit::log_sigmoid(bl),
                };
            }
            let ll = params.hat_label_logits(&j);
            stats.label_head_calls += 1;
            let mut log_probs = Vec::with_capacity(ll.len() + 1);
            log_probs.push(numkit::log_sigmoid(bl));
            let stay = numkit::log_one_minus_sigmoid(bl);
            for l in numkit::log_softmax(&ll) {
                log_probs.push(stay + l);
            }
            GateOutcome::Scored { log_probs }
        }
        TransducerMode::Rnnt => {
            debug_assert!(gate.is_none(), "gating rejected for single-softmax joints");
            let logits = params.rnnt_logits(&j);
            stats.blank_head_calls += 1;
            stats.label_head_calls += 1;
            GateOutcome::Scored {
                log_probs: numkit::log_softmax(&logits),
            }
        }
    }
}

/// Score descending, then fewer tokens, then lexicographically smaller tokens.
pub(crate) fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_score
        .partial_cmp(&a.log_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Cand {
    log_score: f64,
    pred_state: PredictionState,
}

/// Candidates keyed by token sequence; the key order makes iteration and
/// therefore pruning deterministic.
type Pool = BTreeMap<Vec<TokenId>, Cand>;

/// Add a scored continuation, merging by log-sum-exp when the token sequence
/// is already present. The state closure runs only for new entries; equal
/// token sequences imply equal prediction states.
fn merge_into(
    pool: &mut Pool,
    tokens: Vec<TokenId>,
    log_score: f64,
    state: impl FnOnce() -> Result<PredictionState>,
) -> Result<()> {
    match pool.entry(tokens) {
        Entry::Occupied(mut e) => {
            let c = e.get_mut();
            c.log_score = numkit::log_add(c.log_score, log_score);
        }
        Entry::Vacant(v) => {
            v.insert(Cand {
                log_score,
                pred_state: state()?,
            });
        }
    }
    Ok(())
}

fn drain_sorted(pool: Pool, beam: usize) -> Vec<Hypothesis> {
    let mut hyps: Vec<Hypothesis> = pool
        .into_iter()
        .map(|(tokens, c)| Hypothesis {
            tokens,
            log_score: c.log_score,
            pred_state: c.pred_state,
        })
        .collect();
    hyps.sort_by(hyp_order);
    hyps.truncate(beam);
    hyps
}

fn empty_output(params: &ModelParameters, enc: &EncoderOutput) -> Result<DecodeOutput> {
    let best = Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
        pred_state: params.predict(&[])?,
    };
    Ok(DecodeOutput {
        nbest: vec![best.clone()],
        best,
        stats: DecodeStats {
            encoder_frames: enc.frames(),
            ..DecodeStats::default()
        },
    })
}

fn check_kept(enc: &EncoderOutput, kept: &[usize]) -> Result<()> {
    for (i, &t) in kept.iter().enumerate() {
        if t >= enc.frames() || (i > 0 && kept[i - 1] >= t) {
            return Err(Error::InvalidArgument(
                "kept frame indices must be strictly increasing and in range".into(),
            ));
        }
    }
    Ok(())
}

fn gate_lambda(thresholds: &ThresholdConfig) -> Option<f64> {
    thresholds.gates_steps().then_some(thresholds.lambda_hat)
}

fn root_hypothesis(params: &ModelParameters) -> Result<Hypothesis> {
    Ok(Hypothesis {
        tokens: Vec::new(),
        log_score: 0.0,
        pred_state: params.predict(&[])?,
    })
}

/// Alignment-length-synchronous beam search.
///
/// Level `i` holds hypotheses whose blank and label transitions total `i`, so
/// a hypothesis with `u` tokens reads kept frame `i - u` next. Emitting blank
/// on the final kept frame completes a hypothesis. The label budget is
/// `alsd_max_symbols` times the number of kept frames, rounded down; with a
/// wide enough beam the returned scores are full alignment sums, matching the
/// lattice forward recursion.
pub fn alsd_decode(
    params: &ModelParameters,
    enc: &EncoderOutput,
    kept: &[usize],
    decode: &DecodeConfig,
    thresholds: &ThresholdConfig,
) -> Result<DecodeOutput> {
    decode.validate()?;
    thresholds.validate(&params.config)?;
    check_kept(enc, kept)?;
    if kept.is_empty() {
        return empty_output(params, enc);
    }
    let gate = gate_lambda(thresholds);
    let t_kept = kept.len();
    let max_symbols = (decode.alsd_max_symbols * t_kept as f64).floor() as usize;
    let vocab = params.config.vocab_size;
    let mut stats = DecodeStats {
        encoder_frames: enc.frames(),
        kept_frames: t_kept,
        ..DecodeStats::default()
    };
    let mut beam = vec![root_hypothesis(params)?];
    let mut finals: Pool = BTreeMap::new();
    for level in 0..t_kept + max_symbols {
        if beam.is_empty() {
            break;
        }
        let mut next: Pool = BTreeMap::new();
        for hyp in &beam {
            let t = level - hyp.tokens.len();
            let step = eval_step(
                params,
                enc.frame(kept[t]),
                &hyp.pred_state,
                gate,
                &mut stats,
            );
            let (blank_lp, labels) = match step {
                GateOutcome::ForcedBlank { blank_log_prob } => (blank_log_prob, None),
                GateOutcome::Scored { log_probs } => (log_probs[0], Some(log_probs)),
            };
            let target = if t + 1 == t_kept {
                &mut finals
            } else {
                &mut next
            };
            merge_into(target, hyp.tokens.clone(), hyp.log_score + blank_lp, || {
                Ok(hyp.pred_state.clone())
            })?;
            if let Some(log_probs) = labels {
                if hyp.tokens.len() < max_symbols {
                    for token in 1..vocab {
                        let mut tokens = hyp.tokens.clone();
                        tokens.push(token);
                        merge_into(&mut next, tokens, hyp.log_score + log_probs[token], || {
                            params.predict_step(&hyp.pred_state, token)
                        })?;
                    }
                }
            }
        }
        beam = drain_sorted(next, decode.beam);
    }
    let nbest = drain_sorted(finals, decode.beam);
    let best = nbest.first().cloned().ok_or_else(|| {
        Error::InvalidArgument("search ended without a complete hypothesis".into())
    })?;
    Ok(DecodeOutput { best, nbest, stats })
}

/// Time-synchronous beam search.
///
/// Each kept frame allows at most `tsd_max_expansions_per_frame` label
/// expansions before a hypothesis must take its blank transition; the beam
/// after the final frame holds the completed hypotheses. In the last
/// expansion round the evaluation still scores labels when no gate fires,
/// but only the blank continuation is used.
pub fn tsd_decode(
    params: &ModelParameters,
    enc: &EncoderOutput,
    kept: &[usize],
    decode: &DecodeConfig,
    thresholds: &ThresholdConfig,
) -> Result<DecodeOutput> {
    decode.validate()?;
    thresholds.validate(&params.config)?;
    check_kept(enc, kept)?;
    if kept.is_empty() {
        return empty_output(params, enc);
    }
    let gate = gate_lambda(thresholds);
    let expansions = decode.tsd_max_expansions_per_frame;
    let vocab = params.config.vocab_size;
    let mut stats = DecodeStats {
        encoder_frames: enc.frames(),
        kept_frames: kept.len(),
        ..DecodeStats::default()
    };
    let mut beam = vec![root_hypothesis(params)?];
    for &frame in kept {
        let h_enc = enc.frame(frame);
        let mut closed: Pool = BTreeMap::new();
        let mut active = std::mem::take(&mut beam);
        for round in 0..=expansions {
            let mut grown: Pool = BTreeMap::new();
            for hyp in &active {
                let step = eval_step(params, h_enc, &hyp.pred_state, gate, &mut stats);
                let (blank_lp, labels) = match step {
                    GateOutcome::ForcedBlank { blank_log_prob } => (blank_log_prob, None),
                    GateOutcome::Scored { log_probs } => (log_probs[0], Some(log_probs)),
                };
                merge_into(
                    &mut closed,
                    hyp.tokens.clone(),
                    hyp.log_score + blank_lp,
                    || Ok(hyp.pred_state.clone()),
                )?;
                if round < expansions {
                    if let Some(log_probs) = labels {
                        for token in 1..vocab {
                            let mut tokens = hyp.tokens.clone();
                            tokens.push(token);
                            merge_into(
                                &mut grown,
                                tokens,
                                hyp.log_score + log_probs[token],
                                || params.predict_step(&hyp.pred_state, token),
                            )?;
                        }
                    }
                }
            }
            if grown.is_empty() {
                break;
            }
            active = drain_sorted(grown, decode.beam);
        }
        beam = drain_sorted(closed, decode.beam);
    }
    let nbest = beam;
    let best = nbest.first().cloned().ok_or_else(|| {
        Error::InvalidArgument("search ended without a complete hypothesis".into())
    })?;
    Ok(DecodeOutput { best, nbest, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{Algorithm, BlankSource, ThresholdMode};
    use crate::loss::rnnt_loss;
    use crate::model::{CtcHeadKind, ModelConfig};
    use crate::numkit::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(mode: TransducerMode) -> ModelConfig {
        ModelConfig {
            mode,
            ctc_head: CtcHeadKind::Iam,
            feature_dim: 3,
            hidden_dim: 6,
            vocab_size: 4,
            blank_id: 0,
            stride: 2,
            causal: false,
            encoder_layers: 1,
        }
    }

    fn features(frames: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..frames * dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(frames, dim, data).unwrap()
    }

    fn all_frames(enc: &EncoderOutput) -> Vec<usize> {
        (0..enc.frames()).collect()
    }

    fn assert_exact_sum(params: &ModelParameters, feats: &Matrix, hyps: &[&Hypothesis]) {
        for hyp in hyps {
            let lattice = params.lattice(feats, &hyp.tokens).unwrap();
            let (loss, _) = rnnt_loss(&lattice, &hyp.tokens, 0).unwrap();
            assert!(
                (hyp.log_score + loss).abs() < 1e-9,
                "tokens {:?}: search {} vs lattice {}",
                hyp.tokens,
                hyp.log_score,
                -loss
            );
        }
    }

    /// A wide-beam ALSD run must recover the exact alignment sum computed by
    /// the lattice forward recursion for every returned hypothesis.
    fn assert_alsd_matches_lattice_sum(mode: TransducerMode) {
        let params = ModelParameters::init(config(mode), 5).unwrap();
        let feats = features(5, 3, 9);
        let enc = params.encode(&feats).unwrap();
        // three encoder frames, budget of three labels: exactly
        // 1 + 3 + 9 + 27 = 40 distinct sequences, so beam 64 never prunes
        let decode = DecodeConfig {
            algorithm: Algorithm::Alsd,
            beam: 64,
            ..DecodeConfig::default()
        };
        let out = alsd_decode(
            &params,
            &enc,
            &all_frames(&enc),
            &decode,
            &ThresholdConfig::default(),
        )
        .unwrap();
        assert_eq!(out.nbest.len(), 40);
        assert_exact_sum(&params, &feats, &out.nbest.iter().collect::<Vec<_>>());
    }

    /// Same check for TSD. The per-frame expansion cap excludes some
    /// alignments of long sequences, so only hypotheses short enough that
    /// every alignment fits under the cap are compared.
    fn assert_tsd_matches_lattice_sum(mode: TransducerMode) {
        let params = ModelParameters::init(config(mode), 5).unwrap();
        let feats = features(3, 3, 9);
        let enc = params.encode(&feats).unwrap();
        assert_eq!(enc.frames(), 2);
        // two frames at three expansions each reach 1600 sequences; beam
        // 4096 never prunes, and every sequence of up to three labels keeps
        // all its alignments under the per-frame cap
        let decode = DecodeConfig {
            algorithm: Algorithm::Tsd,
            beam: 4096,
            tsd_max_expansions_per_frame: 3,
            ..DecodeConfig::default()
        };
        let out = tsd_decode(
            &params,
            &enc,
            &all_frames(&enc),
            &decode,
            &ThresholdConfig::default(),
        )
        .unwrap();
        let short: Vec<&Hypothesis> = out.nbest.iter().filter(|h| h.tokens.len() <= 3).collect();
        assert_eq!(short.len(), 40);
        assert_exact_sum(&params, &feats, &short);
    }

    #[test]
    fn alsd_matches_lattice_sum_hat() {
        assert_alsd_matches_lattice_sum(TransducerMode::Hat);
    }

    #[test]
    fn alsd_matches_lattice_sum_rnnt() {
        assert_alsd_matches_lattice_sum(TransducerMode::Rnnt);
    }

    #[test]
    fn tsd_matches_lattice_sum_hat() {
        assert_tsd_matches_lattice_sum(TransducerMode::Hat);
    }

    #[test]
    fn tsd_matches_lattice_sum_rnnt() {
        assert_tsd_matches_lattice_sum(TransducerMode::Rnnt);
    }

    #[test]
    fn nbest_is_sorted_and_unique() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(9, 3, 2)).unwrap();
        for algorithm in [Algorithm::Alsd, Algorithm::Tsd] {
            let decode = DecodeConfig {
                algorithm,
                ..DecodeConfig::default()
            };
            let out = match algorithm {
                Algorithm::Alsd => alsd_decode(
                    &params,
                    &enc,
                    &all_frames(&enc),
                    &decode,
                    &ThresholdConfig::default(),
                )
                .unwrap(),
                _ => tsd_decode(
                    &params,
                    &enc,
                    &all_frames(&enc),
                    &decode,
                    &ThresholdConfig::default(),
                )
                .unwrap(),
            };
            assert!(!out.nbest.is_empty());
            assert!(out.nbest.len() <= decode.beam);
            for pair in out.nbest.windows(2) {
                assert!(hyp_order(&pair[0], &pair[1]) != Ordering::Greater);
                assert_ne!(pair[0].tokens, pair[1].tokens);
            }
            assert_eq!(out.best.tokens, out.nbest[0].tokens);
        }
    }

    #[test]
    fn saturating_gate_is_bit_identical_to_ungated() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(11, 3, 3)).unwrap();
        let kept = all_frames(&enc);
        for algorithm in [Algorithm::Alsd, Algorithm::Tsd] {
            let decode = DecodeConfig {
                algorithm,
                ..DecodeConfig::default()
            };
            let plain = ThresholdConfig::default();
            let gated = ThresholdConfig {
                mode: ThresholdMode::Hat,
                lambda_hat: 1e9,
                ..ThresholdConfig::default()
            };
            let run = |t: &ThresholdConfig| match algorithm {
                Algorithm::Alsd => alsd_decode(&params, &enc, &kept, &decode, t).unwrap(),
                _ => tsd_decode(&params, &enc, &kept, &decode, t).unwrap(),
            };
            let a = run(&plain);
            let b = run(&gated);
            assert_eq!(a.nbest.len(), b.nbest.len());
            for (x, y) in a.nbest.iter().zip(&b.nbest) {
                assert_eq!(x.tokens, y.tokens);
                assert_eq!(x.log_score.to_bits(), y.log_score.to_bits());
            }
            assert_eq!(a.stats, b.stats);
        }
    }

    #[test]
    fn aggressive_gate_forces_empty_transcript() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(11, 3, 3)).unwrap();
        let kept = all_frames(&enc);
        let thresholds = ThresholdConfig {
            mode: ThresholdMode::Hat,
            lambda_hat: -1e9,
            ..ThresholdConfig::default()
        };
        for algorithm in [Algorithm::Alsd, Algorithm::Tsd] {
            let decode = DecodeConfig {
                algorithm,
                ..DecodeConfig::default()
            };
            let out = match algorithm {
                Algorithm::Alsd => alsd_decode(&params, &enc, &kept, &decode, &thresholds).unwrap(),
                _ => tsd_decode(&params, &enc, &kept, &decode, &thresholds).unwrap(),
            };
            assert!(out.best.tokens.is_empty());
            assert_eq!(out.stats.label_head_calls, 0);
            assert!(out.stats.blank_head_calls >= enc.frames());
            assert_eq!(out.stats.joint_call_ratio(), 0.0);
        }
    }

    #[test]
    fn ungated_searches_call_both_heads_equally() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(9, 3, 7)).unwrap();
        let kept = all_frames(&enc);
        let decode = DecodeConfig::default();
        let out = alsd_decode(&params, &enc, &kept, &decode, &ThresholdConfig::default()).unwrap();
        assert_eq!(out.stats.blank_head_calls, out.stats.label_head_calls);
        assert_eq!(out.stats.joint_call_ratio(), 100.0);
        let decode = DecodeConfig {
            algorithm: Algorithm::Tsd,
            ..DecodeConfig::default()
        };
        let out = tsd_decode(&params, &enc, &kept, &decode, &ThresholdConfig::default()).unwrap();
        assert_eq!(out.stats.blank_head_calls, out.stats.label_head_calls);
    }

    #[test]
    fn empty_frame_list_yields_empty_hypothesis() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(9, 3, 7)).unwrap();
        for algorithm in [Algorithm::Alsd, Algorithm::Tsd] {
            let decode = DecodeConfig {
                algorithm,
                ..DecodeConfig::default()
            };
            let out = match algorithm {
                Algorithm::Alsd => {
                    alsd_decode(&params, &enc, &[], &decode, &ThresholdConfig::default()).unwrap()
                }
                _ => tsd_decode(&params, &enc, &[], &decode, &ThresholdConfig::default()).unwrap(),
            };
            assert!(out.best.tokens.is_empty());
            assert_eq!(out.best.log_score, 0.0);
            assert_eq!(out.stats.kept_frames, 0);
            assert_eq!(out.stats.encoder_frames, enc.frames());
            assert_eq!(out.stats.blank_head_calls, 0);
        }
    }

    #[test]
    fn kept_indices_are_validated() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(9, 3, 7)).unwrap();
        let decode = DecodeConfig::default();
        for bad in [vec![0, 0], vec![2, 1], vec![99]] {
            let err =
                alsd_decode(&params, &enc, &bad, &decode, &ThresholdConfig::default()).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)));
        }
    }

    #[test]
    fn hypothesis_state_matches_replayed_prefix() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let enc = params.encode(&features(11, 3, 13)).unwrap();
        let kept = all_frames(&enc);
        let out = alsd_decode(
            &params,
            &enc,
            &kept,
            &DecodeConfig::default(),
            &ThresholdConfig::default(),
        )
        .unwrap();
        for hyp in &out.nbest {
            let replay = params.predict(&hyp.tokens).unwrap();
            assert_eq!(replay, hyp.pred_state);
        }
    }

    #[test]
    fn dual_thresholds_filter_and_gate_together() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let feats = features(21, 3, 17);
        let enc = params.encode(&feats).unwrap();
        let thresholds = ThresholdConfig {
            mode: ThresholdMode::Dual,
            lambda_hat: 2.0,
            lambda_ctc: 2.0,
            blank_source: BlankSource::Iam,
        };
        let (kept, _) =
            crate::decode::ctc_blank_filter(&params, &enc, thresholds.lambda_ctc, BlankSource::Iam)
                .unwrap();
        let out = alsd_decode(&params, &enc, &kept, &DecodeConfig::default(), &thresholds).unwrap();
        assert_eq!(out.stats.kept_frames, kept.len());
        assert!(out.stats.label_head_calls <= out.stats.blank_head_calls);
    }

    #[test]
    fn tie_break_prefers_score_then_length_then_tokens() {
        let params = ModelParameters::init(config(TransducerMode::Hat), 5).unwrap();
        let state = params.predict(&[]).unwrap();
        let hyp = |tokens: Vec<TokenId>, score: f64| Hypothesis {
            tokens,
            log_score: score,
            pred_state: state.clone(),
        };
        let a = hyp(vec![1], -1.0);
        let b = hyp(vec![1, 2], -2.0);
        assert_eq!(hyp_order(&a, &b), Ordering::Less);
        let c = hyp(vec![1, 2], -1.0);
        let d = hyp(vec![3], -1.0);
        assert_eq!(hyp_order(&d, &c), Ordering::Less);
        let e = hyp(vec![1, 3], -1.0);
        assert_eq!(hyp_order(&c, &e), Ordering::Less);
    }
}
