//! The two zeroed-input views of a factorized transducer joint network.
//!
//! Zeroing the prediction input turns the joint network into a per-frame
//! acoustic model (the internal acoustic model, IAM) with no extra
//! parameters; zeroing the encoder input turns it into a label-only
//! autoregressive model (the internal language model, ILM). This example
//! trains a small model, then prints an IAM blank/label profile along one
//! utterance and ILM next-token distributions for a few prefixes.
//!
//! ```bash
//! cargo run --example iam_ilm_views
//! ```

use trlab::data::{generate, SyntheticTaskConfig};
use trlab::error::Result;
use trlab::loss::{train, TrainConfig};
use trlab::model::{ModelConfig, ModelParameters};

fn main() -> Result<()> {
    let data = SyntheticTaskConfig {
        vocab_size: 6,
        silence_prob: 1.0,
        noise_sigma: 0.15,
        train_utterances: 120,
        dev_utterances: 20,
        test_utterances: 5,
        seed: 23,
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
            epochs: 30,
            learning_rate: 3e-3,
            alpha: 0.75,
            beta: 0.1,
            ..TrainConfig::default()
        },
    )?
    .params;
    let vocabulary = &splits.test.vocabulary;

    let utt = &splits.test.utterances[0];
    let reference: Vec<&str> = utt.reference.iter().map(|&t| vocabulary.name(t)).collect();
    println!(
        "IAM per-frame view of {} (reference [{}])",
        utt.id,
        reference.join(" ")
    );
    let enc = params.encode(&utt.features)?;
    let iam = params.iam_from_encoder(&enc)?;
    println!("frame  p(blank)  best label");
    for t in 0..iam.frames() {
        let row = iam.log_probs().row(t);
        let p_blank = row[0].exp();
        let (best, lp) = row
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        println!(
            "{t:>5}  {p_blank:>8.3}  {} ({:.3})",
            vocabulary.name(best),
            lp.exp()
        );
    }

    println!("\nILM next-token view");
    let prefixes: [&[usize]; 3] = [&[], &[1], &[1, 4]];
    for prefix in prefixes {
        let dist = params.ilm_eval(prefix)?;
        let names: Vec<String> = dist
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{} {:.3}", vocabulary.name(i + 1), p))
            .collect();
        let shown: Vec<&str> = prefix.iter().map(|&t| vocabulary.name(t)).collect();
        println!("  after [{}]: {}", shown.join(" "), names.join("  "));
        let total: f64 = dist.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    Ok(())
}
