//! Per-frame alignment loss with blank-separated label collapsing.
//!
//! Frame label sequences collapse by removing repeats and then blanks,
//! so a reference needs at least one frame per label plus one separator
//! frame between adjacent equal labels. References that cannot fit in
//! the available frames are reported as inadmissible with an infinite
//! loss instead of failing.

use crate::model::TokenId;
use crate::numkit::{log_add, Matrix};
use crate::{Error, Result};

/// Result of [`ctc_loss`]. `grad` is w.r.t. the per-frame
/// log-probabilities and is all-zero when the pair is inadmissible.
#[derive(Debug, Clone)]
pub struct CtcLossResult {
    pub loss: f64,
    pub grad: Matrix,
    pub admissible: bool,
}

/// Fewest frames that can emit `labels` under the collapse rule:
/// one per label plus one per adjacent repeated pair.
pub fn ctc_min_frames(labels: &[TokenId]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate(log_probs: &Matrix, labels: &[TokenId], blank_id: usize) -> Result<()> {
    if blank_id >= log_probs.cols() {
        return Err(Error::InvalidArgument("blank index out of range".into()));
    }
    for &l in labels {
        if l == blank_id || l >= log_probs.cols() {
            return Err(Error::InvalidArgument(format!(
                "label {l} is blank or out of vocabulary"
            )));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `labels` given per-frame log-distributions
/// (`T x K`), with the gradient w.r.t. every entry.
pub fn ctc_loss(log_probs: &Matrix, labels: &[TokenId], blank_id: usize) -> Result<CtcLossResult> {
    validate(log_probs, labels, blank_id)?;
    let t_len = log_probs.rows();
    let grad_zero = Matrix::zeros(t_len, log_probs.cols());
    if t_len < ctc_min_frames(labels) {
        return Ok(CtcLossResult {
            loss: f64::INFINITY,
            grad: grad_zero,
            admissible: false,
        });
    }
    if t_len == 0 {
        // No frames and an empty reference: nothing to emit.
        return Ok(CtcLossResult {
            loss: 0.0,
            grad: grad_zero,
            admissible: true,
        });
    }

    // Extended reference: blanks interleaved around every label.
    let m = 2 * labels.len() + 1;
    let ext = |i: usize| -> TokenId {
        if i % 2 == 0 {
            blank_id
        } else {
            labels[i / 2]
        }
    };
    // A skip from i-2 to i is allowed when it does not jump over a
    // mandatory separator: target must be a label differing from ext(i-2).
    let skip_ok = |i: usize| -> bool { i >= 2 && ext(i) != blank_id && ext(i) != ext(i - 2) };
    let lp = |t: usize, i: usize| log_probs.get(t, ext(i));

    let neg = f64::NEG_INFINITY;
    let mut alpha = Matrix::zeros(t_len, m);
    for v in alpha.data_mut() {
        *v = neg;
    }
    alpha.set(0, 0, lp(0, 0));
    if m > 1 {
        alpha.set(0, 1, lp(0, 1));
    }
    for t in 1..t_len {
        for i in 0..m {
            let mut acc = alpha.get(t - 1, i);
            if i >= 1 {
                acc = log_add(acc, alpha.get(t - 1, i - 1));
            }
            if skip_ok(i) {
                acc = log_add(acc, alpha.get(t - 1, i - 2));
            }
            alpha.set(t, i, acc + lp(t, i));
        }
    }
    let mut log_lik = alpha.get(t_len - 1, m - 1);
    if m > 1 {
        log_lik = log_add(log_lik, alpha.get(t_len - 1, m - 2));
    }

    let mut beta = Matrix::zeros(t_len, m);
    for v in beta.data_mut() {
        *v = neg;
    }
    beta.set(t_len - 1, m - 1, lp(t_len - 1, m - 1));
    if m > 1 {
        beta.set(t_len - 1, m - 2, lp(t_len - 1, m - 2));
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..m {
            let mut acc = beta.get(t + 1, i);
            if i + 1 < m {
                acc = log_add(acc, beta.get(t + 1, i + 1));
            }
            if i + 2 < m && skip_ok(i + 2) {
                acc = log_add(acc, beta.get(t + 1, i + 2));
            }
            beta.set(t, i, acc + lp(t, i));
        }
    }
    debug_assert!({
        let mut b = beta.get(0, 0);
        if m > 1 {
            b = log_add(b, beta.get(0, 1));
        }
        (b - log_lik).abs() < 1e-6 || !log_lik.is_finite()
    });

    // State occupancy gamma(t, i) folded onto the shared symbol axis.
    let mut grad = grad_zero;
    for t in 0..t_len {
        for i in 0..m {
            let occ = (alpha.get(t, i) + beta.get(t, i) - lp(t, i) - log_lik).exp();
            if occ != 0.0 {
                let row = grad.row_mut(t);
                row[ext(i)] -= occ;
            }
        }
    }

    Ok(CtcLossResult {
        loss: -log_lik,
        grad,
        admissible: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, k: usize) -> Matrix {
        let mut m = Matrix::zeros(t, k);
        let lp = -(k as f64).ln();
        for v in m.data_mut() {
            *v = lp;
        }
        m
    }

    #[test]
    fn min_frames_counts_separators() {
        assert_eq!(ctc_min_frames(&[]), 0);
        assert_eq!(ctc_min_frames(&[1, 2, 3]), 3);
        assert_eq!(ctc_min_frames(&[1, 1]), 3);
        assert_eq!(ctc_min_frames(&[2, 2, 2]), 5);
    }

    #[test]
    fn empty_reference_is_all_blank() {
        let lp = uniform(3, 4);
        let r = ctc_loss(&lp, &[], 0).unwrap();
        assert!(r.admissible);
        // Only path: blank three times, each 1/4.
        assert!((r.loss - 3.0 * (4.0f64).ln()).abs() < 1e-12);
        for t in 0..3 {
            assert!((r.grad.get(t, 0) + 1.0).abs() < 1e-12);
            assert_eq!(r.grad.get(t, 1), 0.0);
        }
    }

    #[test]
    fn single_frame_single_label() {
        let lp = uniform(1, 4);
        let r = ctc_loss(&lp, &[2], 0).unwrap();
        assert!(r.admissible);
        assert!((r.loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((r.grad.get(0, 2) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_counts_three_paths() {
        // Frame sequences collapsing to [a]: aa, a-, -a. Each (1/K)^2.
        let k = 5;
        let lp = uniform(2, k);
        let r = ctc_loss(&lp, &[1], 0).unwrap();
        let expect = -(3.0 * (k as f64).powi(-2)).ln();
        assert!((r.loss - expect).abs() < 1e-12, "{} vs {expect}", r.loss);
    }

    #[test]
    fn repeated_label_requires_separator() {
        let lp = uniform(2, 4);
        let r = ctc_loss(&lp, &[1, 1], 0).unwrap();
        assert!(!r.admissible);
        assert!(r.loss.is_infinite());
        assert!(r.grad.data().iter().all(|&v| v == 0.0));

        let lp3 = uniform(3, 4);
        let r3 = ctc_loss(&lp3, &[1, 1], 0).unwrap();
        assert!(r3.admissible);
        // Only frame path: a, blank, a.
        assert!((r3.loss - 3.0 * (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn occupancy_mass_is_one_per_frame() {
        let lp = uniform(6, 5);
        let r = ctc_loss(&lp, &[2, 3, 2], 0).unwrap();
        for t in 0..6 {
            let mass: f64 = r.grad.row(t).iter().sum();
            assert!((mass + 1.0).abs() < 1e-9, "frame {t} mass {mass}");
        }
    }

    #[test]
    fn rejects_blank_label() {
        let lp = uniform(3, 4);
        assert!(ctc_loss(&lp, &[0], 0).is_err());
        assert!(ctc_loss(&lp, &[9], 0).is_err());
    }
}
