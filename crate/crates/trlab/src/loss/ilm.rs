//! Internal language model loss.
//!
//! Mean negative log-probability of each reference label under the
//! joint network with the encoder input zeroed; a label-only language
//! model with no extra parameters. An empty reference contributes zero
//! by convention.

use crate::model::{ModelParameters, TokenId};
use crate::Result;

/// Mean per-label negative log-likelihood plus parameter gradients.
/// Encoder tensors receive exactly zero gradient.
pub fn ilm_loss(params: &ModelParameters, labels: &[TokenId]) -> Result<(f64, ModelParameters)> {
    let mut grads = params.zeros_like();
    if labels.is_empty() {
        return Ok((0.0, grads));
    }
    let fwd = params.ilm_forward(labels)?;
    let inv_u = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    let mut dsteps = Vec::with_capacity(labels.len());
    for (u, &label) in labels.iter().enumerate() {
        // Label heads index the non-blank vocabulary, which starts at 1.
        let target = label - 1;
        let row = &fwd.step_log_probs()[u];
        loss -= inv_u * row[target];
        let mut d = vec![0.0; row.len()];
        d[target] = -inv_u;
        dsteps.push(d);
    }
    fwd.backprop(params, &dsteps, &mut grads)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CtcHeadKind, ModelConfig, TransducerMode};

    fn params(mode: TransducerMode) -> ModelParameters {
        ModelParameters::init(
            ModelConfig {
                mode,
                ctc_head: CtcHeadKind::None,
                feature_dim: 3,
                hidden_dim: 5,
                vocab_size: 6,
                blank_id: 0,
                stride: 2,
                causal: false,
                encoder_layers: 1,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn empty_reference_costs_nothing() {
        let p = params(TransducerMode::Hat);
        let (loss, grads) = ilm_loss(&p, &[]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_stepwise_eval() {
        for mode in [TransducerMode::Rnnt, TransducerMode::Hat] {
            let p = params(mode);
            let labels = [2usize, 5, 1];
            let (loss, _) = ilm_loss(&p, &labels).unwrap();
            let mut expect = 0.0;
            for u in 0..labels.len() {
                let dist = p.ilm_eval(&labels[..u]).unwrap();
                expect -= dist[labels[u] - 1].ln();
            }
            expect /= labels.len() as f64;
            assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        }
    }

    #[test]
    fn gradients_skip_the_encoder() {
        let p = params(TransducerMode::Hat);
        let (_, grads) = ilm_loss(&p, &[3, 3, 2]).unwrap();
        for layer in &grads.encoder {
            assert!(layer.weight.data().iter().all(|&v| v == 0.0));
        }
        assert!(grads.joint.enc_proj.data().iter().all(|&v| v == 0.0));
        assert!(grads.joint.pred_proj.data().iter().any(|&v| v != 0.0));
    }
}
