//! Trace the accuracy/effort trade-off curves for both blank thresholds.
//!
//! Sweeping the frame threshold moves the non-blank percentage (NBP);
//! sweeping the step threshold moves the joint call ratio (JCR). Both
//! curves should approach the unthresholded operating point as lambda
//! grows, with word error rate intact until the thresholds start
//! clipping real label activity.
//!
//! ```bash
//! cargo run --example sweep_curves
//! ```

use trlab::data::{generate, SyntheticTaskConfig};
use trlab::decode::{decode_utterance, DecodeConfig, DecodeStats, ThresholdConfig, ThresholdMode};
use trlab::error::Result;
use trlab::loss::{train, TrainConfig};
use trlab::metrics::aggregate;
use trlab::model::{ModelConfig, ModelParameters, TokenId};

fn main() -> Result<()> {
    let data = SyntheticTaskConfig {
        vocab_size: 9,
        silence_prob: 1.0,
        noise_sigma: 0.15,
        train_utterances: 160,
        dev_utterances: 20,
        test_utterances: 30,
        seed: 17,
        ..SyntheticTaskConfig::default()
    };
    let splits = generate(&data)?;
    let model = ModelConfig {
        vocab_size: data.vocab_size,
        ..ModelConfig::default()
    };
    let init = ModelParameters::init(model, 1)?;
    let params = train(
        &init,
        &splits.train.utterances,
        &splits.dev.utterances,
        &TrainConfig {
            epochs: 40,
            learning_rate: 3e-3,
            alpha: 0.75,
            beta: 0.1,
            ..TrainConfig::default()
        },
    )?
    .params;

    let decode = DecodeConfig::default();
    let evaluate = |thresholds: &ThresholdConfig| -> Result<(f64, f64, f64, f64)> {
        let mut stats: Vec<DecodeStats> = Vec::new();
        let mut hyps: Vec<Vec<TokenId>> = Vec::new();
        for utt in &splits.test.utterances {
            let out = decode_utterance(
                &params,
                &utt.features,
                utt.audio_seconds,
                &decode,
                thresholds,
            )?;
            stats.push(out.stats);
            hyps.push(out.best.tokens);
        }
        let pairs: Vec<(&[TokenId], &[TokenId])> = splits
            .test
            .utterances
            .iter()
            .zip(&hyps)
            .map(|(u, h)| (u.reference.as_slice(), h.as_slice()))
            .collect();
        let summary = aggregate(&stats, &pairs)?;
        Ok((summary.wer, summary.nbp, summary.jcr, summary.rtf))
    };

    let (wer, nbp, jcr, rtf) = evaluate(&ThresholdConfig::default())?;
    println!("unthresholded: WER {wer:.2}  NBP {nbp:.1}  JCR {jcr:.1}  RTF {rtf:.4}\n");

    for (mode, label) in [
        (ThresholdMode::Ctc, "frame filter (lambda_ctc)"),
        (ThresholdMode::Hat, "step gate (lambda_hat)"),
    ] {
        println!("{label}");
        println!("  lambda    WER    NBP    JCR     RTF");
        for i in 0..=8 {
            let lambda = (2 * i) as f64;
            let thresholds = match mode {
                ThresholdMode::Ctc => ThresholdConfig {
                    mode,
                    lambda_ctc: lambda,
                    ..ThresholdConfig::default()
                },
                _ => ThresholdConfig {
                    mode,
                    lambda_hat: lambda,
                    ..ThresholdConfig::default()
                },
            };
            let (wer, nbp, jcr, rtf) = evaluate(&thresholds)?;
            println!("  {lambda:>6}  {wer:>5.2}  {nbp:>5.1}  {jcr:>5.1}  {rtf:.4}");
        }
        println!();
    }
    Ok(())
}
