//! Synthetic corpus generation and dataset persistence.
//!
//! Every non-blank token owns a fixed random template vector. An
//! utterance concatenates per-token template repetitions (random
//! duration), optional all-zero silence segments at token boundaries,
//! and Gaussian noise on top. The task is separable at zero noise, and
//! silence gives trained models the blank-dominated stretches that
//! frame filtering exploits.
//!
//! Datasets persist to a single versioned file with length-prefixed
//! per-utterance records; features round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss::ctc_min_frames;
use crate::model::{TokenId, Vocabulary};
use crate::numkit::Matrix;
use crate::{Error, Result};

/// Seconds of audio represented by one acoustic frame.
pub const FRAME_SECONDS: f64 = 0.01;

const MAGIC: &[u8; 8] = b"TRLABDAT";
const VERSION: u32 = 1;
const MAX_RETRIES: usize = 20;

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    /// Vocabulary size including blank.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Frames per emitted token, inclusive range.
    pub min_duration: usize,
    pub max_duration: usize,
    /// Tokens per utterance, inclusive range.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Chance of a silence segment at each token boundary.
    pub silence_prob: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Encoder subsampling assumed by the admissibility check.
    pub encoder_stride: usize,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            vocab_size: 17,
            feature_dim: 8,
            min_duration: 3,
            max_duration: 8,
            min_tokens: 2,
            max_tokens: 10,
            silence_prob: 0.3,
            noise_sigma: 0.25,
            encoder_stride: 2,
            train_utterances: 160,
            dev_utterances: 40,
            test_utterances: 50,
            seed: 2024,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::InvalidArgument(
                "synthetic task needs blank plus at least two labels".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be >= 1".into(),
            ));
        }
        if self.min_duration == 0 || self.max_duration < self.min_duration {
            return Err(Error::InvalidArgument("bad token duration range".into()));
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(Error::InvalidArgument("bad utterance length range".into()));
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return Err(Error::InvalidArgument(
                "silence probability must lie in [0, 1]".into(),
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidArgument("noise level must be >= 0".into()));
        }
        if self.encoder_stride == 0 {
            return Err(Error::InvalidArgument("encoder stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Matrix,
    pub reference: Vec<TokenId>,
    pub audio_seconds: f64,
}

/// A named split with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub utterances: Vec<Utterance>,
}

/// The three disjoint splits produced by [`generate`].
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

fn derive_seed(seed: u64, ordinal: u64) -> u64 {
    // Distinct, well-separated streams per utterance.
    seed ^ ordinal
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x5851_F42D_4C95_7F2D)
}

fn token_templates(cfg: &SyntheticTaskConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.vocab_size - 1)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

fn synthesize(
    cfg: &SyntheticTaskConfig,
    templates: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<TokenId>) {
    let n_tokens = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    // No adjacent repeats: a repeated token reuses the same template, and
    // when the segments touch, the boundary carries no acoustic evidence,
    // making the reference unrecoverable in principle. Keeping references
    // repeat-free keeps the task separable.
    let mut reference: Vec<TokenId> = Vec::with_capacity(n_tokens);
    while reference.len() < n_tokens {
        let tok = rng.gen_range(1..cfg.vocab_size);
        if reference.last() != Some(&tok) {
            reference.push(tok);
        }
    }
    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut push_segment = |template: Option<&[f64]>, frames: usize, rng: &mut ChaCha8Rng| {
        for _ in 0..frames {
            let mut row = match template {
                Some(t) => t.to_vec(),
                None => vec![0.0; cfg.feature_dim],
            };
            if let Some(noise) = &noise {
                for v in row.iter_mut() {
                    *v += noise.sample(rng);
                }
            }
            rows.push(row);
        }
    };
    for &tok in &reference {
        if rng.gen_bool(cfg.silence_prob) {
            let frames = rng.gen_range(cfg.min_duration..=cfg.max_duration);
            push_segment(None, frames, rng);
        }
        let frames = rng.gen_range(cfg.min_duration..=cfg.max_duration);
        push_segment(Some(&templates[tok - 1]), frames, rng);
    }
    if rng.gen_bool(cfg.silence_prob) {
        let frames = rng.gen_range(cfg.min_duration..=cfg.max_duration);
        push_segment(None, frames, rng);
    }
    let mut features = Matrix::zeros(rows.len(), cfg.feature_dim);
    for (t, row) in rows.iter().enumerate() {
        features.row_mut(t).copy_from_slice(row);
    }
    (features, reference)
}

fn generate_utterance(
    cfg: &SyntheticTaskConfig,
    templates: &[Vec<f64>],
    id: String,
    ordinal: u64,
) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ordinal));
    for _ in 0..MAX_RETRIES {
        let (features, reference) = synthesize(cfg, templates, &mut rng);
        let enc_frames = features.rows().div_ceil(cfg.encoder_stride);
        if enc_frames >= ctc_min_frames(&reference) {
            let audio_seconds = features.rows() as f64 * FRAME_SECONDS;
            return Ok(Utterance {
                id,
                features,
                reference,
                audio_seconds,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "utterance `{id}`: no admissible draw in {MAX_RETRIES} attempts; \
         durations are too short for the encoder stride"
    )))
}

/// Generate the three splits deterministically from the config seed.
/// Utterances are independent given their derived seeds, so generation
/// runs in parallel without affecting the output.
pub fn generate(cfg: &SyntheticTaskConfig) -> Result<DatasetSplits> {
    cfg.validate()?;
    let templates = token_templates(cfg);
    let vocabulary = Vocabulary::synthetic(cfg.vocab_size);
    let mut base = 0u64;
    let split = |name: &str, count: usize, base: &mut u64| -> Result<Dataset> {
        let start = *base;
        *base += count as u64;
        let utterances: Vec<Utterance> = (0..count)
            .into_par_iter()
            .map(|i| {
                generate_utterance(cfg, &templates, format!("{name}-{i:04}"), start + i as u64)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            vocabulary: vocabulary.clone(),
            utterances,
        })
    };
    Ok(DatasetSplits {
        train: split("train", cfg.train_utterances, &mut base)?,
        dev: split("dev", cfg.dev_utterances, &mut base)?,
        test: split("test", cfg.test_utterances, &mut base)?,
    })
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("dataset file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(truncated)?;
    String::from_utf8(bytes).map_err(|_| Error::Format("string is not UTF-8".into()))
}

impl Dataset {
    /// Write the dataset to a single file; on failure no partial file is
    /// left at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument("dataset path has no file name".into()))?;
        let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
        let result = (|| -> Result<()> {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(self.vocabulary.size() as u32).to_le_bytes())?;
            for name in self.vocabulary.names() {
                w.write_all(&(name.len() as u16).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
            }
            w.write_all(&(self.utterances.len() as u32).to_le_bytes())?;
            for utt in &self.utterances {
                w.write_all(&(utt.id.len() as u16).to_le_bytes())?;
                w.write_all(utt.id.as_bytes())?;
                w.write_all(&(utt.features.rows() as u32).to_le_bytes())?;
                w.write_all(&(utt.features.cols() as u32).to_le_bytes())?;
                for &v in utt.features.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&(utt.reference.len() as u32).to_le_bytes())?;
                for &tok in &utt.reference {
                    w.write_all(&(tok as u32).to_le_bytes())?;
                }
                w.write_all(&utt.audio_seconds.to_le_bytes())?;
            }
            w.flush()?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                std::fs::rename(&tmp, path)?;
                Ok(())
            }
            Err(e) => {
                let _ = std::fs::remove_file(&tmp);
                Err(e)
            }
        }
    }

    /// Load a dataset written by [`Self::save`]; bit-exact round trip.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let vocab_size = read_u32(&mut r)? as usize;
        let mut names = Vec::with_capacity(vocab_size);
        for _ in 0..vocab_size {
            let len = read_u16(&mut r)? as usize;
            names.push(read_string(&mut r, len)?);
        }
        let vocabulary = Vocabulary::new(names, 0)
            .map_err(|e| Error::Format(format!("bad vocabulary block: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut utterances = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = read_u16(&mut r)? as usize;
            let id = read_string(&mut r, id_len)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            for v in data.iter_mut() {
                *v = read_f64(&mut r)?;
            }
            let features = Matrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Format(format!("bad feature block: {e}")))?;
            let ref_len = read_u32(&mut r)? as usize;
            let mut reference = Vec::with_capacity(ref_len);
            for _ in 0..ref_len {
                let tok = read_u32(&mut r)? as usize;
                if tok == 0 || tok >= vocabulary.size() {
                    return Err(Error::Format(format!(
                        "utterance `{id}` references invalid token {tok}"
                    )));
                }
                reference.push(tok);
            }
            let audio_seconds = read_f64(&mut r)?;
            utterances.push(Utterance {
                id,
                features,
                reference,
                audio_seconds,
            });
        }
        let mut extra = [0u8; 1];
        match r.read(&mut extra) {
            Ok(0) => {}
            Ok(_) => return Err(Error::Format("trailing bytes after utterances".into())),
            Err(e) => return Err(e.into()),
        }
        Ok(Dataset {
            vocabulary,
            utterances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            vocab_size: 5,
            feature_dim: 4,
            min_tokens: 2,
            max_tokens: 4,
            train_utterances: 12,
            dev_utterances: 4,
            test_utterances: 4,
            seed: 99,
            ..SyntheticTaskConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_ids_are_disjoint() {
        let s = generate(&tiny_config()).unwrap();
        let mut ids: Vec<&str> = s
            .train
            .utterances
            .iter()
            .chain(&s.dev.utterances)
            .chain(&s.test.utterances)
            .map(|u| u.id.as_str())
            .collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(n, 20);
    }

    #[test]
    fn references_are_admissible_after_subsampling() {
        let cfg = tiny_config();
        let s = generate(&cfg).unwrap();
        for u in s.train.utterances.iter().chain(&s.dev.utterances) {
            let enc = u.features.rows().div_ceil(cfg.encoder_stride);
            assert!(enc >= ctc_min_frames(&u.reference), "{}", u.id);
        }
    }

    #[test]
    fn frame_count_bounds_from_durations() {
        let cfg = SyntheticTaskConfig {
            min_tokens: 4,
            max_tokens: 4,
            silence_prob: 0.0,
            ..tiny_config()
        };
        let s = generate(&cfg).unwrap();
        for u in &s.train.utterances {
            assert!(u.features.rows() >= 4 * cfg.min_duration);
            assert!(u.features.rows() <= 4 * cfg.max_duration);
            let enc = u.features.rows().div_ceil(2);
            assert!((6..=16).contains(&enc), "{} frames", u.features.rows());
            assert!((u.audio_seconds - u.features.rows() as f64 * 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_fixed_durations_are_reproducible_per_token_sequence() {
        let cfg = SyntheticTaskConfig {
            vocab_size: 3,
            min_tokens: 1,
            max_tokens: 1,
            min_duration: 4,
            max_duration: 4,
            silence_prob: 0.0,
            noise_sigma: 0.0,
            train_utterances: 10,
            ..tiny_config()
        };
        let s = generate(&cfg).unwrap();
        for a in &s.train.utterances {
            for b in &s.train.utterances {
                if a.reference == b.reference {
                    assert_eq!(a.features, b.features, "{} vs {}", a.id, b.id);
                }
            }
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let s = generate(&tiny_config()).unwrap();
        let path = dir.path().join("train.trlabdat");
        s.train.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(s.train, loaded);
        for (a, b) in s.train.utterances.iter().zip(&loaded.utterances) {
            for (x, y) in a.features.data().iter().zip(b.features.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Saving the loaded copy reproduces the same bytes.
        let again = dir.path().join("again.trlabdat");
        loaded.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.trlabdat");
        std::fs::write(&bad, b"NOTADATASET").unwrap();
        assert!(matches!(Dataset::load(&bad), Err(Error::Format(_))));

        let s = generate(&tiny_config()).unwrap();
        let path = dir.path().join("dev.trlabdat");
        s.dev.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.trlabdat");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(Dataset::load(&cut), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny_config();
        cfg.vocab_size = 2;
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.max_duration = 1;
        assert!(generate(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.noise_sigma = -0.5;
        assert!(generate(&cfg).is_err());
    }
}
