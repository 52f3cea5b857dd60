//! Shared helpers for the integration tests: brute-force likelihood
//! oracles built by path enumeration, a central finite-difference harness
//! for gradient checks, and small random model/input generators.
#![allow(dead_code)]

use rand::Rng;

use trlab::loss::joint_loss;
use trlab::model::{
    CtcHeadKind, JointLattice, ModelConfig, ModelParameters, TokenId, TransducerMode,
};
use trlab::numkit::{log_add, Matrix};

/// Log-likelihood of `labels` by explicit enumeration of every monotonic
/// alignment through the joint lattice: blank consumes a frame, a label
/// consumes a reference position, and the path must end with the blank
/// that closes the last frame.
pub fn enumerate_alignment_log_likelihood(
    lattice: &JointLattice,
    labels: &[TokenId],
    blank_id: usize,
) -> f64 {
    let t_len = lattice.t_len();
    let u_len = labels.len();
    if t_len == 0 {
        return if u_len == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let mut total = f64::NEG_INFINITY;
    // Iterative depth-first walk; the stack holds (t, u, log-prob so far).
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if t == t_len {
            if u == u_len {
                total = log_add(total, acc);
            }
            continue;
        }
        stack.push((t + 1, u, acc + lattice.get(t, u, blank_id)));
        if u < u_len {
            stack.push((t, u + 1, acc + lattice.get(t, u, labels[u])));
        }
    }
    total
}

/// Log-likelihood of `labels` under per-frame distributions by enumerating
/// every frame labelling in `K^T` and keeping those that collapse to the
/// reference (merge repeats, then drop blanks).
pub fn enumerate_collapse_log_likelihood(
    log_probs: &Matrix,
    labels: &[TokenId],
    blank_id: usize,
) -> f64 {
    let t_len = log_probs.rows();
    let vocab = log_probs.cols();
    if t_len == 0 {
        return if labels.is_empty() {
            0.0
        } else {
            f64::NEG_INFINITY
        };
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    loop {
        if collapses_to(&path, labels, blank_id) {
            let acc: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs.get(t, k))
                .sum();
            total = log_add(total, acc);
        }
        // Advance the odometer over K^T.
        let mut pos = 0;
        loop {
            if pos == t_len {
                return total;
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

fn collapses_to(path: &[usize], labels: &[TokenId], blank_id: usize) -> bool {
    let mut collapsed = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev != Some(k) && k != blank_id {
            collapsed.push(k);
        }
        prev = Some(k);
    }
    collapsed == labels
}

/// Central finite differences of the combined training loss with respect
/// to every parameter.
pub fn fd_gradient(
    params: &ModelParameters,
    features: &Matrix,
    labels: &[TokenId],
    alpha: f64,
    beta: f64,
    h: f64,
) -> Vec<f64> {
    let base = params.flatten();
    let mut work = params.clone();
    let mut fd = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        work.assign_flat(&probe).unwrap();
        let (plus, _) = joint_loss(&work, features, labels, alpha, beta).unwrap();
        probe[i] = base[i] - h;
        work.assign_flat(&probe).unwrap();
        let (minus, _) = joint_loss(&work, features, labels, alpha, beta).unwrap();
        probe[i] = base[i];
        fd.push((plus.joint - minus.joint) / (2.0 * h));
    }
    fd
}

/// Worst guarded relative error between two gradient vectors:
/// `|a - b| / max(1, |a|, |b|)` element-wise.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / 1.0_f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// A deliberately tiny architecture so enumeration oracles and
/// finite-difference sweeps stay fast.
pub fn tiny_config(mode: TransducerMode, head: CtcHeadKind) -> ModelConfig {
    ModelConfig {
        mode,
        ctc_head: head,
        feature_dim: 3,
        hidden_dim: 4,
        vocab_size: 5,
        blank_id: 0,
        stride: 2,
        causal: false,
        encoder_layers: 1,
    }
}

pub fn tiny_params(mode: TransducerMode, head: CtcHeadKind, seed: u64) -> ModelParameters {
    ModelParameters::init(tiny_config(mode, head), seed).unwrap()
}

pub fn random_features(rng: &mut impl Rng, rows: usize, dim: usize) -> Matrix {
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, dim, data).unwrap()
}

/// Random non-blank labels drawn from `1..vocab`.
pub fn random_labels(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(1..vocab)).collect()
}
