//! Measure the decoding real-time factor with warm-up runs excluded.
//!
//! RTF divides wall-clock decoding time by the audio duration the
//! features represent; values below 1 mean faster than real time. The
//! first runs of a process pay cache and allocator warm-up costs, so the
//! harness discards them and reports the mean over timed repeats as a
//! ratio of summed wall time to summed audio time.
//!
//! ```bash
//! cargo run --example benchmark_rtf
//! ```

use std::time::Instant;

use trlab::data::{generate, SyntheticTaskConfig};
use trlab::decode::{decode_utterance, DecodeConfig, ThresholdConfig, ThresholdMode};
use trlab::error::Result;
use trlab::loss::{train, TrainConfig};
use trlab::model::{ModelConfig, ModelParameters};

fn main() -> Result<()> {
    let data = SyntheticTaskConfig {
        vocab_size: 9,
        silence_prob: 1.0,
        noise_sigma: 0.15,
        train_utterances: 160,
        dev_utterances: 20,
        test_utterances: 25,
        seed: 19,
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
    let configs = [
        ("unthresholded", ThresholdConfig::default()),
        (
            "dual thresholds",
            ThresholdConfig {
                mode: ThresholdMode::Dual,
                lambda_ctc: 0.0,
                lambda_hat: 4.0,
                ..ThresholdConfig::default()
            },
        ),
    ];

    const WARMUP: usize = 1;
    const REPEATS: usize = 3;
    for (label, thresholds) in &configs {
        let run = || -> Result<f64> {
            let mut audio = 0.0;
            for utt in &splits.test.utterances {
                let out = decode_utterance(
                    &params,
                    &utt.features,
                    utt.audio_seconds,
                    &decode,
                    thresholds,
                )?;
                audio += out.stats.audio_seconds;
            }
            Ok(audio)
        };
        for _ in 0..WARMUP {
            run()?;
        }
        let mut wall_total = 0.0;
        let mut audio_total = 0.0;
        for repeat in 0..REPEATS {
            let started = Instant::now();
            let audio = run()?;
            let wall = started.elapsed().as_secs_f64();
            println!(
                "{label}: repeat {repeat} decoded {audio:.2} s of audio in {wall:.3} s (RTF {:.4})",
                wall / audio
            );
            wall_total += wall;
            audio_total += audio;
        }
        println!("{label}: mean RTF {:.4}\n", wall_total / audio_total);
    }
    Ok(())
}
