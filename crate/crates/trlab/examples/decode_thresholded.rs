//! Decode with and without dual blank thresholding and compare effort.
//!
//! Two thresholds, both in blank-logit space, cut decoding work from
//! opposite ends. The frame filter drops encoder frames whose per-frame
//! blank log-odds reach `lambda_ctc` before search starts; the step gate
//! skips the label head whenever the joint blank logit reaches
//! `lambda_hat` during search. The printed counters show where the
//! savings come from: non-blank percentage (NBP) for frames kept, joint
//! call ratio (JCR) for label-head calls per blank-head call.
//!
//! ```bash
//! cargo run --example decode_thresholded
//! ```

use trlab::data::{generate, SyntheticTaskConfig};
use trlab::decode::{decode_utterance, DecodeConfig, ThresholdConfig, ThresholdMode};
use trlab::error::Result;
use trlab::loss::{train, TrainConfig};
use trlab::model::{ModelConfig, ModelParameters, Vocabulary};

fn transcript(vocabulary: &Vocabulary, tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| vocabulary.name(t))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> Result<()> {
    let data = SyntheticTaskConfig {
        vocab_size: 9,
        silence_prob: 1.0,
        noise_sigma: 0.15,
        train_utterances: 160,
        dev_utterances: 20,
        test_utterances: 5,
        seed: 13,
        ..SyntheticTaskConfig::default()
    };
    let splits = generate(&data)?;
    let model = ModelConfig {
        vocab_size: data.vocab_size,
        ..ModelConfig::default()
    };
    let init = ModelParameters::init(model, 1)?;
    let outcome = train(
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
    )?;
    let params = outcome.params;

    let decode = DecodeConfig::default();
    let plain = ThresholdConfig::default();
    let dual = ThresholdConfig {
        mode: ThresholdMode::Dual,
        lambda_ctc: 0.0,
        lambda_hat: 4.0,
        ..ThresholdConfig::default()
    };

    for utt in &splits.test.utterances {
        let full = decode_utterance(&params, &utt.features, utt.audio_seconds, &decode, &plain)?;
        let cheap = decode_utterance(&params, &utt.features, utt.audio_seconds, &decode, &dual)?;
        println!("{}", utt.id);
        println!(
            "  reference    [{}]",
            transcript(&splits.test.vocabulary, &utt.reference)
        );
        println!(
            "  full search  [{}]  NBP {:>5.1}  JCR {:>5.1}  label calls {}",
            transcript(&splits.test.vocabulary, &full.best.tokens),
            full.stats.non_blank_percentage(),
            full.stats.joint_call_ratio(),
            full.stats.label_head_calls
        );
        println!(
            "  dual gated   [{}]  NBP {:>5.1}  JCR {:>5.1}  label calls {}",
            transcript(&splits.test.vocabulary, &cheap.best.tokens),
            cheap.stats.non_blank_percentage(),
            cheap.stats.joint_call_ratio(),
            cheap.stats.label_head_calls
        );
    }
    Ok(())
}
