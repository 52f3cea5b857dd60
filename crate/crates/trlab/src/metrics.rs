//! Evaluation metrics: token error rate via edit distance, the oracle
//! non-blank percentage of a dataset, and corpus-level aggregation of
//! per-utterance decode statistics.

use crate::data::Dataset;
use crate::decode::DecodeStats;
use crate::error::{Error, Result};
use crate::model::TokenId;

/// Counts from a minimal edit alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Corpus-level evaluation: error rate over all reference tokens plus the
/// work ratios of the merged decode statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Token error rate in percent, `(S + I + D) / reference tokens`.
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub nbp: f64,
    pub jcr: f64,
    pub rtf: f64,
    /// Reference tokens per encoder frame, in percent: the frame share a
    /// perfect blank filter would keep.
    pub oracle_nbp: f64,
}

/// Minimal edit alignment between a reference and a hypothesis.
///
/// Among all minimal-cost alignments the one with the most aligned token
/// pairs (matches plus substitutions) is chosen, so equal-cost alignments
/// favor substitutions over insert-plus-delete pairs. That canonical choice
/// fixes the count decomposition completely: the alignment-pair count alone
/// determines insertions and deletions, and it is symmetric in the two
/// arguments.
pub fn edit_distance(reference: &[TokenId], hypothesis: &[TokenId]) -> EditCounts {
    #[derive(Clone, Copy, Default)]
    struct Cell {
        cost: usize,
        aligned_pairs: usize,
    }
    // lexicographic shortest path: minimize cost, then maximize pairs;
    // both accumulate additively, so per-cell selection is globally optimal
    fn better(a: Cell, b: Cell) -> Cell {
        if (a.cost, b.aligned_pairs) < (b.cost, a.aligned_pairs) {
            a
        } else {
            b
        }
    }
    let rows = reference.len() + 1;
    let cols = hypothesis.len() + 1;
    let mut dp = vec![Cell::default(); rows * cols];
    for i in 1..rows {
        dp[i * cols].cost = i;
    }
    for j in 1..cols {
        dp[j].cost = j;
    }
    for i in 1..rows {
        for j in 1..cols {
            let penalty = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let diag = dp[(i - 1) * cols + (j - 1)];
            let up = dp[(i - 1) * cols + j];
            let left = dp[i * cols + (j - 1)];
            let via_pair = Cell {
                cost: diag.cost + penalty,
                aligned_pairs: diag.aligned_pairs + 1,
            };
            let via_delete = Cell {
                cost: up.cost + 1,
                aligned_pairs: up.aligned_pairs,
            };
            let via_insert = Cell {
                cost: left.cost + 1,
                aligned_pairs: left.aligned_pairs,
            };
            dp[i * cols + j] = better(better(via_pair, via_delete), via_insert);
        }
    }
    let end = dp[rows * cols - 1];
    let insertions = hypothesis.len() - end.aligned_pairs;
    let deletions = reference.len() - end.aligned_pairs;
    EditCounts {
        substitutions: end.cost - insertions - deletions,
        insertions,
        deletions,
    }
}

/// Reference tokens per encoder frame over a whole dataset, in percent.
///
/// This is the non-blank percentage an ideal frame filter would reach:
/// every surviving frame emits exactly one token.
pub fn oracle_nbp(dataset: &Dataset, stride: usize) -> f64 {
    assert!(stride > 0, "stride must be >= 1");
    let mut tokens = 0usize;
    let mut frames = 0usize;
    for utt in &dataset.utterances {
        tokens += utt.reference.len();
        frames += utt.features.rows().div_ceil(stride);
    }
    if frames == 0 {
        0.0
    } else {
        100.0 * tokens as f64 / frames as f64
    }
}

/// Reduce per-utterance decode statistics and (reference, hypothesis) pairs
/// into one corpus summary. Ratios are ratios of sums, so the result does
/// not depend on utterance order.
pub fn aggregate(stats: &[DecodeStats], pairs: &[(&[TokenId], &[TokenId])]) -> Result<EvalSummary> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    if stats.len() != pairs.len() {
        return Err(Error::InvalidArgument(
            "need one evaluation pair per decode statistic".into(),
        ));
    }
    let mut merged = DecodeStats::default();
    for s in stats {
        merged.merge(s);
    }
    let mut counts = EditCounts::default();
    let mut reference_tokens = 0usize;
    for (reference, hypothesis) in pairs {
        let c = edit_distance(reference, hypothesis);
        counts.substitutions += c.substitutions;
        counts.insertions += c.insertions;
        counts.deletions += c.deletions;
        reference_tokens += reference.len();
    }
    let wer = if reference_tokens == 0 {
        if counts.total() == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        100.0 * counts.total() as f64 / reference_tokens as f64
    };
    let oracle_nbp = if merged.encoder_frames == 0 {
        0.0
    } else {
        100.0 * reference_tokens as f64 / merged.encoder_frames as f64
    };
    Ok(EvalSummary {
        wer,
        substitutions: counts.substitutions,
        insertions: counts.insertions,
        deletions: counts.deletions,
        nbp: merged.non_blank_percentage(),
        jcr: merged.joint_call_ratio(),
        rtf: merged.real_time_factor(),
        oracle_nbp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabulary;
    use crate::numkit::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sequences_have_no_edits() {
        let c = edit_distance(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(c, EditCounts::default());
        assert_eq!(edit_distance(&[], &[]), EditCounts::default());
    }

    #[test]
    fn single_substitution() {
        let c = edit_distance(&[1, 2, 3], &[1, 9, 3]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
    }

    #[test]
    fn pure_deletion_and_insertion() {
        let c = edit_distance(&[1], &[]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 0, 1));
        let c = edit_distance(&[], &[1]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 1, 0));
    }

    #[test]
    fn equal_cost_alignments_prefer_substitutions() {
        // swapping two tokens costs 2 either as two substitutions or as a
        // delete plus an insert; the substitution decomposition wins
        let c = edit_distance(&[1, 2], &[2, 1]);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (2, 0, 0));
    }

    #[test]
    fn substituted_token_never_reports_as_insert_delete() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let len = rng.gen_range(1..8);
            let reference: Vec<TokenId> = (0..len).map(|_| rng.gen_range(1..4)).collect();
            let mut hyp = reference.clone();
            let pos = rng.gen_range(0..len);
            hyp[pos] = if reference[pos] == 1 { 2 } else { 1 };
            let c = edit_distance(&reference, &hyp);
            assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 0, 0));
        }
    }

    /// Exhaustive recursion over all alignments, independent of the DP.
    fn brute_force_distance(reference: &[TokenId], hypothesis: &[TokenId]) -> usize {
        match (reference, hypothesis) {
            ([], h) => h.len(),
            (r, []) => r.len(),
            ([r0, r_rest @ ..], [h0, h_rest @ ..]) => {
                let sub = brute_force_distance(r_rest, h_rest) + usize::from(r0 != h0);
                let del = brute_force_distance(r_rest, hypothesis) + 1;
                let ins = brute_force_distance(reference, h_rest) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn total_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let r_len = rng.gen_range(0..7);
            let h_len = rng.gen_range(0..7);
            let reference: Vec<TokenId> = (0..r_len).map(|_| rng.gen_range(1..4)).collect();
            let hypothesis: Vec<TokenId> = (0..h_len).map(|_| rng.gen_range(1..4)).collect();
            let c = edit_distance(&reference, &hypothesis);
            assert_eq!(c.total(), brute_force_distance(&reference, &hypothesis));
        }
    }

    #[test]
    fn swapping_arguments_swaps_insertions_and_deletions() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..300 {
            let r_len = rng.gen_range(0..9);
            let h_len = rng.gen_range(0..9);
            let reference: Vec<TokenId> = (0..r_len).map(|_| rng.gen_range(1..4)).collect();
            let hypothesis: Vec<TokenId> = (0..h_len).map(|_| rng.gen_range(1..4)).collect();
            let fwd = edit_distance(&reference, &hypothesis);
            let rev = edit_distance(&hypothesis, &reference);
            assert_eq!(fwd.total(), rev.total());
            assert_eq!(fwd.substitutions, rev.substitutions);
            assert_eq!(fwd.insertions, rev.deletions);
            assert_eq!(fwd.deletions, rev.insertions);
        }
    }

    fn dataset(utts: Vec<(usize, usize)>) -> Dataset {
        // (input frames, reference length) pairs with dummy features
        let utterances = utts
            .into_iter()
            .enumerate()
            .map(|(n, (frames, tokens))| crate::data::Utterance {
                id: format!("u{n}"),
                features: Matrix::zeros(frames, 2),
                reference: vec![1; tokens],
                audio_seconds: frames as f64 * 0.01,
            })
            .collect();
        Dataset {
            vocabulary: Vocabulary::synthetic(3),
            utterances,
        }
    }

    #[test]
    fn oracle_nbp_counts_tokens_per_encoder_frame() {
        // 50 input frames at stride 2 -> 25 encoder frames; 4 tokens -> 16%
        let set = dataset(vec![(50, 4)]);
        assert!((oracle_nbp(&set, 2) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_nbp_of_empty_references_is_zero() {
        let set = dataset(vec![(10, 0), (8, 0)]);
        assert_eq!(oracle_nbp(&set, 2), 0.0);
    }

    #[test]
    fn oracle_nbp_matches_direct_recount() {
        let set = dataset(vec![(13, 3), (7, 2), (24, 9)]);
        let stride = 3;
        let frames: usize = set
            .utterances
            .iter()
            .map(|u| u.features.rows().div_ceil(stride))
            .sum();
        let tokens: usize = set.utterances.iter().map(|u| u.reference.len()).sum();
        let expected = 100.0 * tokens as f64 / frames as f64;
        assert!((oracle_nbp(&set, stride) - expected).abs() < 1e-12);
    }

    fn stats(frames: usize, kept: usize, blank: usize, label: usize) -> DecodeStats {
        DecodeStats {
            encoder_frames: frames,
            kept_frames: kept,
            blank_head_calls: blank,
            label_head_calls: label,
            wall_decode_seconds: 0.1,
            audio_seconds: 1.0,
        }
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched_input() {
        assert!(aggregate(&[], &[]).is_err());
        let s = [stats(10, 10, 10, 10)];
        assert!(aggregate(&s, &[]).is_err());
    }

    #[test]
    fn aggregate_singleton_equals_per_utterance_values() {
        let s = [stats(10, 4, 8, 2)];
        let reference = [1usize, 2, 3];
        let hypothesis = [1usize, 9, 3];
        let summary = aggregate(&s, &[(&reference, &hypothesis)]).unwrap();
        assert!((summary.wer - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(summary.substitutions, 1);
        assert!((summary.nbp - 40.0).abs() < 1e-12);
        assert!((summary.jcr - 25.0).abs() < 1e-12);
        assert!((summary.rtf - 0.1).abs() < 1e-12);
        assert!((summary.oracle_nbp - 30.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_uses_ratios_of_sums() {
        let s = [stats(10, 10, 12, 12), stats(30, 10, 8, 3)];
        let r1 = [1usize, 2];
        let h1 = [1usize, 2];
        let r2 = [3usize, 1, 2];
        let h2 = [3usize];
        let summary = aggregate(&s, &[(&r1, &h1), (&r2, &h2)]).unwrap();
        assert!((summary.wer - 100.0 * 2.0 / 5.0).abs() < 1e-12);
        assert_eq!(summary.deletions, 2);
        assert!((summary.nbp - 50.0).abs() < 1e-12);
        assert!((summary.jcr - 75.0).abs() < 1e-12);
        assert!((summary.rtf - 0.1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let s1 = stats(10, 7, 9, 4);
        let s2 = stats(20, 11, 30, 30);
        let r1 = [1usize, 2];
        let h1 = [2usize];
        let r2 = [3usize; 4];
        let h2 = [3usize; 5];
        let fwd = aggregate(&[s1, s2], &[(&r1, &h1), (&r2, &h2)]).unwrap();
        let rev = aggregate(&[s2, s1], &[(&r2, &h2), (&r1, &h1)]).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn unthresholded_corpus_reports_full_ratios() {
        let s = [stats(12, 12, 40, 40), stats(9, 9, 31, 31)];
        let r = [1usize];
        let h = [1usize];
        let summary = aggregate(&s, &[(&r, &h), (&r, &h)]).unwrap();
        assert_eq!(summary.nbp, 100.0);
        assert_eq!(summary.jcr, 100.0);
        assert_eq!(summary.wer, 0.0);
    }
}
