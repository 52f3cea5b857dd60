//! Train a factorized-blank transducer with the internal acoustic model
//! as a zero-parameter per-frame auxiliary loss.
//!
//! The combined objective is `L = L_align + alpha * L_frame + beta *
//! L_label`: the transducer alignment loss, a CTC-style loss through the
//! prediction-zeroed joint network, and a label-only language-model
//! loss through the encoder-zeroed joint network. All three read the
//! same parameters, so the auxiliary terms add supervision without
//! adding tensors.
//!
//! ```bash
//! cargo run --example train_hat_iam
//! ```

use trlab::data::{generate, SyntheticTaskConfig};
use trlab::error::Result;
use trlab::loss::{train, Split, TrainConfig};
use trlab::model::{ModelConfig, ModelParameters};

fn main() -> Result<()> {
    let data = SyntheticTaskConfig {
        vocab_size: 9,
        silence_prob: 1.0,
        noise_sigma: 0.15,
        train_utterances: 160,
        dev_utterances: 20,
        test_utterances: 20,
        seed: 11,
        ..SyntheticTaskConfig::default()
    };
    let splits = generate(&data)?;

    let model = ModelConfig {
        vocab_size: data.vocab_size,
        ..ModelConfig::default()
    };
    let init = ModelParameters::init(model, 1)?;
    println!("model has {} parameters", init.num_params());

    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 3e-3,
        alpha: 0.75,
        beta: 0.1,
        ..TrainConfig::default()
    };
    let outcome = train(
        &init,
        &splits.train.utterances,
        &splits.dev.utterances,
        &cfg,
    )?;

    println!("epoch  split  alignment  frame(iam)  label(ilm)  combined");
    for row in outcome
        .trace
        .iter()
        .filter(|r| r.split == Split::Dev)
        .step_by(2)
    {
        println!(
            "{:>5}  {:>5}  {:>9.4}  {:>10.4}  {:>10.4}  {:>8.4}",
            row.epoch, "dev", row.rnnt, row.ctc, row.ilm, row.joint
        );
    }
    println!(
        "best epoch {} with dev combined loss {:.4}",
        outcome.best_epoch, outcome.best_dev_joint
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    outcome.params.save(&path)?;
    let reloaded = ModelParameters::load(&path)?;
    assert_eq!(reloaded.config, outcome.params.config);
    println!("checkpoint round-trips at {}", path.display());
    Ok(())
}
