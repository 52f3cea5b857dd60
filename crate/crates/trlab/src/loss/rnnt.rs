//! Transducer alignment loss.
//!
//! The lattice holds one log-distribution per `(t, u)` cell. A monotone
//! alignment path starts at `(0, 0)`, moves to `(t+1, u)` by emitting
//! blank and to `(t, u+1)` by emitting the next reference label, and
//! ends with a blank from `(T-1, U)`. The loss is the negative log of
//! the summed probability of all such paths; the gradient is minus the
//! arc occupancy at every participating lattice entry.

use crate::model::{JointLattice, TokenId};
use crate::numkit::{log_add, Matrix};
use crate::{Error, Result};

fn validate(lattice: &JointLattice, labels: &[TokenId], blank_id: usize) -> Result<()> {
    if blank_id >= lattice.vocab() {
        return Err(Error::InvalidArgument("blank index out of range".into()));
    }
    if lattice.u_len() != labels.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "lattice has {} prediction states, labels need {}",
            lattice.u_len(),
            labels.len() + 1
        )));
    }
    for &l in labels {
        if l == blank_id || l >= lattice.vocab() {
            return Err(Error::InvalidArgument(format!(
                "label {l} is blank or out of vocabulary"
            )));
        }
    }
    if lattice.t_len() == 0 && !labels.is_empty() {
        return Err(Error::InvalidArgument(
            "no encoder frames but a non-empty reference".into(),
        ));
    }
    Ok(())
}

/// Negative log-likelihood of the reference given the lattice, plus the
/// gradient w.r.t. every lattice log-probability.
pub fn rnnt_loss(
    lattice: &JointLattice,
    labels: &[TokenId],
    blank_id: usize,
) -> Result<(f64, JointLattice)> {
    validate(lattice, labels, blank_id)?;
    let t_len = lattice.t_len();
    let u_len = lattice.u_len();
    let mut grad = JointLattice::zeros(t_len, u_len, lattice.vocab());
    if t_len == 0 {
        // Zero frames, empty reference: the empty alignment has
        // probability one.
        return Ok((0.0, grad));
    }

    let pb = |t: usize, u: usize| lattice.get(t, u, blank_id);
    let pl = |t: usize, u: usize| lattice.get(t, u, labels[u]);

    let mut alpha = Matrix::zeros(t_len, u_len);
    for v in alpha.data_mut() {
        *v = f64::NEG_INFINITY;
    }
    alpha.set(0, 0, 0.0);
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = log_add(acc, alpha.get(t - 1, u) + pb(t - 1, u));
            }
            if u > 0 {
                acc = log_add(acc, alpha.get(t, u - 1) + pl(t, u - 1));
            }
            alpha.set(t, u, acc);
        }
    }
    let log_lik = alpha.get(t_len - 1, u_len - 1) + pb(t_len - 1, u_len - 1);

    let mut beta = Matrix::zeros(t_len, u_len);
    for v in beta.data_mut() {
        *v = f64::NEG_INFINITY;
    }
    beta.set(t_len - 1, u_len - 1, pb(t_len - 1, u_len - 1));
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            if t == t_len - 1 && u == u_len - 1 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len {
                acc = log_add(acc, pb(t, u) + beta.get(t + 1, u));
            }
            if u + 1 < u_len {
                acc = log_add(acc, pl(t, u) + beta.get(t, u + 1));
            }
            beta.set(t, u, acc);
        }
    }
    debug_assert!(
        (beta.get(0, 0) - log_lik).abs() < 1e-6 || !log_lik.is_finite(),
        "forward and backward disagree: {} vs {log_lik}",
        beta.get(0, 0)
    );

    // d(-log_lik)/d log p = -occupancy of the arc using that entry.
    for t in 0..t_len {
        for u in 0..u_len {
            let a = alpha.get(t, u);
            if t + 1 < t_len {
                let occ = (a + pb(t, u) + beta.get(t + 1, u) - log_lik).exp();
                grad.slice_mut(t, u)[blank_id] -= occ;
            }
            if u + 1 < u_len {
                let occ = (a + pl(t, u) + beta.get(t, u + 1) - log_lik).exp();
                grad.slice_mut(t, u)[labels[u]] -= occ;
            }
        }
    }
    let final_occ = (alpha.get(t_len - 1, u_len - 1) + pb(t_len - 1, u_len - 1) - log_lik).exp();
    grad.slice_mut(t_len - 1, u_len - 1)[blank_id] -= final_occ;

    Ok((-log_lik, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Uniform lattice: every cell gives probability `1/K` to each symbol.
    fn uniform_lattice(t: usize, u: usize, k: usize) -> JointLattice {
        let mut lat = JointLattice::zeros(t, u, k);
        let lp = -(k as f64).ln();
        for t_i in 0..t {
            for u_i in 0..u {
                for v in lat.slice_mut(t_i, u_i) {
                    *v = lp;
                }
            }
        }
        lat
    }

    #[test]
    fn single_frame_empty_reference() {
        // Only one path: the final blank. Loss = -log p_blank.
        let lat = uniform_lattice(1, 1, 4);
        let (loss, grad) = rnnt_loss(&lat, &[], 0).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((grad.get(0, 0, 0) + 1.0).abs() < 1e-12);
        assert_eq!(grad.get(0, 0, 1), 0.0);
    }

    #[test]
    fn two_frames_one_label_path_count() {
        // Paths: label then two blanks, or blank, label, blank.
        // Uniform 1/K per emission, 3 emissions each: 2 * K^-3.
        let k = 5;
        let lat = uniform_lattice(2, 2, k);
        let (loss, _) = rnnt_loss(&lat, &[2], 0).unwrap();
        let expect = -((2.0) * (k as f64).powi(-3)).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn gradient_entries_sum_to_path_length() {
        // Total occupancy equals the number of emissions, T + U.
        let lat = uniform_lattice(4, 3, 6);
        let (_, grad) = rnnt_loss(&lat, &[1, 5], 0).unwrap();
        let mut total = 0.0;
        for t in 0..4 {
            for u in 0..3 {
                total -= grad.slice(t, u).iter().sum::<f64>();
            }
        }
        assert!((total - 6.0).abs() < 1e-9, "occupancy mass {total}");
    }

    #[test]
    fn rejects_empty_time_axis_with_labels() {
        let lat = uniform_lattice(0, 2, 4);
        assert!(rnnt_loss(&lat, &[1], 0).is_err());
    }

    #[test]
    fn empty_lattice_empty_reference_is_free() {
        let lat = uniform_lattice(0, 1, 4);
        let (loss, _) = rnnt_loss(&lat, &[], 0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn rejects_blank_in_reference() {
        let lat = uniform_lattice(2, 2, 4);
        assert!(rnnt_loss(&lat, &[0], 0).is_err());
    }

    #[test]
    fn rejects_mismatched_state_count() {
        let lat = uniform_lattice(2, 2, 4);
        assert!(rnnt_loss(&lat, &[1, 2], 0).is_err());
    }
}
