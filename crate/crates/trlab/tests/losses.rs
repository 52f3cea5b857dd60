//! Alignment and per-frame losses checked against brute-force enumeration
//! oracles on randomly generated instances.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trlab::loss::{ctc_loss, ctc_min_frames, rnnt_loss};
use trlab::model::{CtcHeadKind, JointLattice, TokenId, TransducerMode};
use trlab::numkit::{log_softmax, Matrix};

const TOL: f64 = 1e-9;

fn random_log_prob_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let logits: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        m.row_mut(r).copy_from_slice(&log_softmax(&logits));
    }
    m
}

#[test]
fn alignment_loss_matches_enumeration_on_model_lattices() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut checked = 0;
    for case in 0..120 {
        let mode = if case % 2 == 0 {
            TransducerMode::Hat
        } else {
            TransducerMode::Rnnt
        };
        let params = tiny_params(mode, CtcHeadKind::None, 500 + case);
        let rows = rng.gen_range(2..=8);
        let features = random_features(&mut rng, rows, 3);
        let u_len = rng.gen_range(0..=3);
        let labels = random_labels(&mut rng, u_len, 5);
        let lattice = params.lattice(&features, &labels).unwrap();
        let (loss, _) = rnnt_loss(&lattice, &labels, 0).unwrap();
        let oracle = enumerate_alignment_log_likelihood(&lattice, &labels, 0);
        assert!(
            (loss + oracle).abs() < TOL,
            "case {case}: loss {loss} vs oracle {oracle}"
        );
        checked += 1;
    }
    assert!(checked >= 100);
}

#[test]
fn alignment_loss_matches_enumeration_on_synthetic_lattices() {
    // Unnormalized random lattices: the forward recursion never assumes
    // its input sums to one, and neither does the oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    for case in 0..120 {
        let t_len = rng.gen_range(1..=4);
        let u_len = rng.gen_range(0..=3);
        let vocab = 5;
        let labels: Vec<TokenId> = random_labels(&mut rng, u_len, vocab);
        let mut lattice = JointLattice::zeros(t_len, u_len + 1, vocab);
        for t in 0..t_len {
            for u in 0..=u_len {
                for k in 0..vocab {
                    let v = rng.gen_range(-3.0..0.0);
                    lattice.slice_mut(t, u)[k] = v;
                }
            }
        }
        let (loss, _) = rnnt_loss(&lattice, &labels, 0).unwrap();
        let oracle = enumerate_alignment_log_likelihood(&lattice, &labels, 0);
        assert!(
            (loss + oracle).abs() < TOL,
            "case {case}: loss {loss} vs oracle {oracle}"
        );
    }
}

#[test]
fn alignment_loss_gradient_closes_every_path_through_the_last_frame() {
    // -dL/d(log p(blank | T-1, u)) is the posterior mass of alignments
    // that leave the last frame from prediction state u. Every alignment
    // does so exactly once, so the masses sum to one.
    let mut rng = ChaCha8Rng::seed_from_u64(403);
    let params = tiny_params(TransducerMode::Hat, CtcHeadKind::None, 77);
    let features = random_features(&mut rng, 6, 3);
    let labels = vec![1, 3];
    let lattice = params.lattice(&features, &labels).unwrap();
    let (_, grad) = rnnt_loss(&lattice, &labels, 0).unwrap();
    let t_len = grad.t_len();
    let closing_mass: f64 = (0..grad.u_len()).map(|u| -grad.get(t_len - 1, u, 0)).sum();
    assert!((closing_mass - 1.0).abs() < 1e-9, "{closing_mass}");
}

#[test]
fn empty_lattice_has_unit_probability_for_empty_reference() {
    let lattice = JointLattice::zeros(0, 1, 5);
    let (loss, _) = rnnt_loss(&lattice, &[], 0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(enumerate_alignment_log_likelihood(&lattice, &[], 0), 0.0);
}

#[test]
fn frame_loss_matches_enumeration_on_random_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0;
    while checked < 110 {
        let t_len = rng.gen_range(1..=5);
        let vocab = rng.gen_range(3..=5);
        let u_len = rng.gen_range(0..=3);
        let labels = random_labels(&mut rng, u_len, vocab);
        if ctc_min_frames(&labels) > t_len {
            continue;
        }
        let log_probs = random_log_prob_matrix(&mut rng, t_len, vocab);
        let res = ctc_loss(&log_probs, &labels, 0).unwrap();
        assert!(res.admissible);
        let oracle = enumerate_collapse_log_likelihood(&log_probs, &labels, 0);
        assert!(
            (res.loss + oracle).abs() < TOL,
            "case {checked}: loss {} vs oracle {oracle}",
            res.loss
        );
        checked += 1;
    }
}

#[test]
fn frame_loss_matches_enumeration_through_every_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let heads = [CtcHeadKind::Ctc, CtcHeadKind::Fctc, CtcHeadKind::Iam];
    let mut checked = 0;
    for case in 0..200 {
        let head = heads[case % heads.len()];
        let params = tiny_params(TransducerMode::Hat, head, 700 + case as u64);
        let rows = rng.gen_range(2..=8);
        let features = random_features(&mut rng, rows, 3);
        let dists = params.frame_forward(&features).unwrap();
        let t_len = dists.distributions().frames();
        let u_len = rng.gen_range(0..=2);
        let labels = random_labels(&mut rng, u_len, 5);
        if ctc_min_frames(&labels) > t_len {
            continue;
        }
        let log_probs = dists.distributions().log_probs();
        let res = ctc_loss(log_probs, &labels, 0).unwrap();
        let oracle = enumerate_collapse_log_likelihood(log_probs, &labels, 0);
        assert!(
            (res.loss + oracle).abs() < TOL,
            "case {case} head {head:?}: loss {} vs oracle {oracle}",
            res.loss
        );
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} admissible cases");
}

#[test]
fn frame_loss_is_infinite_when_too_few_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(406);
    let log_probs = random_log_prob_matrix(&mut rng, 2, 5);
    // Three labels cannot fit in two frames.
    let res = ctc_loss(&log_probs, &[1, 2, 3], 0).unwrap();
    assert!(!res.admissible);
    assert_eq!(res.loss, f64::INFINITY);
    assert_eq!(
        enumerate_collapse_log_likelihood(&log_probs, &[1, 2, 3], 0),
        f64::NEG_INFINITY
    );
    // A repeated label needs a separating frame.
    let res = ctc_loss(&log_probs, &[2, 2], 0).unwrap();
    assert!(!res.admissible);
    assert_eq!(
        enumerate_collapse_log_likelihood(&log_probs, &[2, 2], 0),
        f64::NEG_INFINITY
    );
}

#[test]
fn min_frames_counts_labels_plus_repeats() {
    assert_eq!(ctc_min_frames(&[]), 0);
    assert_eq!(ctc_min_frames(&[1, 2, 3]), 3);
    assert_eq!(ctc_min_frames(&[2, 2]), 3);
    assert_eq!(ctc_min_frames(&[2, 2, 2]), 5);
}
