//! Training losses.
//!
//! Three terms share one model: the alignment loss over the full joint
//! lattice, an auxiliary per-frame loss through the configured CTC-style
//! head (or the parameter-free internal acoustic model), and a label-only
//! internal language model loss. [`joint_loss`] combines them as
//! `L = L_align + alpha * L_frame + beta * L_label` with exact gradient
//! additivity, and [`train`] runs Adam over that objective.

mod ctc;
mod ilm;
mod rnnt;
mod train;

pub use ctc::{ctc_loss, ctc_min_frames, CtcLossResult};
pub use ilm::ilm_loss;
pub use rnnt::rnnt_loss;
pub use train::{train, Split, TraceRow, TrainConfig, TrainOutcome};

use crate::model::{CtcHeadKind, ModelParameters, TokenId};
use crate::numkit::Matrix;
use crate::{Error, Result};

/// Per-utterance loss components.
///
/// `joint` is formed by the weighted sum below, except that a term whose
/// weight is exactly zero is skipped outright — an infinite inadmissible
/// per-frame loss then cannot poison the total.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub rnnt: f64,
    pub ctc: f64,
    pub ilm: f64,
    pub joint: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ctc_admissible: bool,
}

impl LossReport {
    /// Recompute `joint` from the components; equals the stored value
    /// bit for bit.
    pub fn recombine(&self) -> f64 {
        let mut total = self.rnnt;
        if self.alpha != 0.0 {
            total += self.alpha * self.ctc;
        }
        if self.beta != 0.0 {
            total += self.beta * self.ilm;
        }
        total
    }
}

/// Full training objective for one utterance: loss components plus the
/// combined parameter gradient.
pub fn joint_loss(
    params: &ModelParameters,
    features: &Matrix,
    labels: &[TokenId],
    alpha: f64,
    beta: f64,
) -> Result<(LossReport, ModelParameters)> {
    if params.config.ctc_head == CtcHeadKind::None && alpha != 0.0 {
        return Err(Error::Config(
            "per-frame loss weight is non-zero but the model has no per-frame head".into(),
        ));
    }
    let blank = params.config.blank_id;

    let lattice_fwd = params.lattice_forward(features, labels)?;
    let (l_rnnt, dlat) = rnnt_loss(lattice_fwd.lattice(), labels, blank)?;
    let mut grads = params.zeros_like();
    lattice_fwd.backprop(params, &dlat, &mut grads)?;

    let (l_ctc, ctc_admissible) = if params.config.ctc_head == CtcHeadKind::None {
        (0.0, true)
    } else {
        let frame_fwd = params.frame_forward(features)?;
        let res = ctc_loss(frame_fwd.distributions().log_probs(), labels, blank)?;
        if res.admissible && alpha != 0.0 {
            let mut g_ctc = params.zeros_like();
            frame_fwd.backprop(params, &res.grad, &mut g_ctc)?;
            grads.add_scaled(&g_ctc, alpha);
        }
        (res.loss, res.admissible)
    };

    let (l_ilm, g_ilm) = ilm_loss(params, labels)?;
    if beta != 0.0 {
        grads.add_scaled(&g_ilm, beta);
    }

    let report = LossReport {
        rnnt: l_rnnt,
        ctc: l_ctc,
        ilm: l_ilm,
        joint: 0.0,
        alpha,
        beta,
        ctc_admissible,
    };
    let report = LossReport {
        joint: report.recombine(),
        ..report
    };
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TransducerMode};
    use rand::{Rng, SeedableRng};

    fn setup(head: CtcHeadKind) -> (ModelParameters, Matrix) {
        let p = ModelParameters::init(
            ModelConfig {
                mode: TransducerMode::Hat,
                ctc_head: head,
                feature_dim: 3,
                hidden_dim: 5,
                vocab_size: 6,
                blank_id: 0,
                stride: 2,
                causal: false,
                encoder_layers: 1,
            },
            31,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(32);
        let mut x = Matrix::zeros(10, 3);
        for v in x.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        (p, x)
    }

    #[test]
    fn combination_identity_is_exact() {
        let (p, x) = setup(CtcHeadKind::Iam);
        let (report, _) = joint_loss(&p, &x, &[2, 4], 0.75, 0.1).unwrap();
        assert_eq!(report.joint.to_bits(), report.recombine().to_bits());
        assert!(report.rnnt > 0.0 && report.ctc > 0.0 && report.ilm > 0.0);
    }

    #[test]
    fn missing_head_with_weight_is_a_config_error() {
        let (p, x) = setup(CtcHeadKind::None);
        assert!(matches!(
            joint_loss(&p, &x, &[2], 0.5, 0.0),
            Err(Error::Config(_))
        ));
        // Zero weight is fine without a head.
        let (report, _) = joint_loss(&p, &x, &[2], 0.0, 0.0).unwrap();
        assert_eq!(report.ctc, 0.0);
        assert_eq!(report.joint, report.rnnt);
    }

    #[test]
    fn gradients_combine_additively() {
        let (p, x) = setup(CtcHeadKind::Iam);
        let labels = [1usize, 3];
        let (_, g_joint) = joint_loss(&p, &x, &labels, 0.5, 0.25).unwrap();

        let (_, g_rnnt) = joint_loss(&p, &x, &labels, 0.0, 0.0).unwrap();
        let frame_fwd = p.frame_forward(&x).unwrap();
        let res = ctc_loss(frame_fwd.distributions().log_probs(), &labels, 0).unwrap();
        let mut g_ctc = p.zeros_like();
        frame_fwd.backprop(&p, &res.grad, &mut g_ctc).unwrap();
        let (_, g_ilm) = ilm_loss(&p, &labels).unwrap();

        let mut expect = g_rnnt;
        expect.add_scaled(&g_ctc, 0.5);
        expect.add_scaled(&g_ilm, 0.25);
        for (a, b) in g_joint.flatten().iter().zip(expect.flatten()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn inadmissible_frame_loss_is_flagged_not_fatal() {
        let (p, _) = setup(CtcHeadKind::Iam);
        // Two frames after subsampling cannot carry four labels.
        let x = Matrix::zeros(4, 3);
        let (report, _) = joint_loss(&p, &x, &[1, 2, 3, 4], 0.75, 0.1).unwrap();
        assert!(!report.ctc_admissible);
        assert!(report.ctc.is_infinite());
        assert!(report.joint.is_infinite());
    }
}
