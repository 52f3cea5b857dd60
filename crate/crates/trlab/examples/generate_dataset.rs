//! Generate a synthetic corpus, look at its shape, and round-trip it
//! through the on-disk dataset format.
//!
//! Each non-blank token owns a fixed template vector; utterances string
//! together noisy template segments separated by silence. The printed
//! oracle non-blank percentage is the fraction of encoder frames a
//! perfect frame filter would keep — the floor for any threshold sweep.
//!
//! ```bash
//! cargo run --example generate_dataset
//! ```

use trlab::data::{generate, Dataset, SyntheticTaskConfig};
use trlab::error::Result;
use trlab::metrics::oracle_nbp;

fn main() -> Result<()> {
    let cfg = SyntheticTaskConfig {
        vocab_size: 9,
        silence_prob: 1.0,
        noise_sigma: 0.15,
        train_utterances: 20,
        dev_utterances: 5,
        test_utterances: 5,
        seed: 7,
        ..SyntheticTaskConfig::default()
    };
    let splits = generate(&cfg)?;

    println!(
        "splits: {} train / {} dev / {} test utterances",
        splits.train.utterances.len(),
        splits.dev.utterances.len(),
        splits.test.utterances.len()
    );
    println!(
        "oracle non-blank percentage at stride {}: {:.1}%",
        cfg.encoder_stride,
        oracle_nbp(&splits.test, cfg.encoder_stride)
    );

    for utt in splits.test.utterances.iter().take(3) {
        let tokens: Vec<&str> = utt
            .reference
            .iter()
            .map(|&t| splits.test.vocabulary.name(t))
            .collect();
        println!(
            "{}: {} frames, {:.2} s, reference [{}]",
            utt.id,
            utt.features.rows(),
            utt.audio_seconds,
            tokens.join(" ")
        );
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demo.ds");
    splits.test.save(&path)?;
    let loaded = Dataset::load(&path)?;
    assert_eq!(loaded, splits.test);
    println!(
        "round-trip through {} is bit-exact ({} bytes)",
        path.display(),
        std::fs::metadata(&path)?.len()
    );
    Ok(())
}
