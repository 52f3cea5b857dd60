//! Experiment orchestration: one resolved TOML configuration drives five
//! reproducible pipeline stages — dataset generation, training, decoding,
//! timing benchmarks, and threshold sweeps.
//!
//! Every stage first writes the fully resolved configuration under the work
//! directory, and every text artifact starts with a `# config <sha256>`
//! comment so outputs can be traced to the exact settings that produced
//! them. Binary artifacts (datasets, checkpoints) have fixed formats and are
//! covered by the resolved-config file next to them. All files are written
//! to a temporary name and renamed, so a failed run leaves no partial
//! artifact behind.

use std::env;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate, Dataset, SyntheticTaskConfig, Utterance};
use crate::decode::{
    decode_utterance, DecodeConfig, DecodeOutput, DecodeStats, ThresholdConfig, ThresholdMode,
};
use crate::error::{Error, Result};
use crate::loss::{train, TrainConfig};
use crate::metrics::{aggregate, oracle_nbp, EvalSummary};
use crate::model::{ModelConfig, ModelParameters, TokenId, Vocabulary};

/// Artifact locations. Everything lives under one work directory, which the
/// `TRLAB_WORK_DIR` environment variable may override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            work_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PathsConfig {
    pub fn train_set(&self) -> PathBuf {
        self.work_dir.join("train.ds")
    }

    pub fn dev_set(&self) -> PathBuf {
        self.work_dir.join("dev.ds")
    }

    pub fn test_set(&self) -> PathBuf {
        self.work_dir.join("test.ds")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.work_dir.join("model.ckpt")
    }

    pub fn loss_trace(&self) -> PathBuf {
        self.work_dir.join("loss_trace.csv")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.work_dir.join("resolved.toml")
    }

    pub fn decode_report(&self) -> PathBuf {
        self.work_dir.join("decode_report.tsv")
    }

    pub fn decode_summary(&self) -> PathBuf {
        self.work_dir.join("decode_summary.tsv")
    }

    pub fn bench_report(&self) -> PathBuf {
        self.work_dir.join("bench_report.tsv")
    }

    pub fn sweep_curve(&self) -> PathBuf {
        self.work_dir.join("sweep_curve.csv")
    }
}

/// Which threshold the sweep varies; `dual` walks the full grid of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepTarget {
    Hat,
    Ctc,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub target: SweepTarget,
    /// Threshold grid applied to each swept threshold.
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            target: SweepTarget::Hat,
            lambdas: (0..=8).map(|i| (2 * i) as f64).collect(),
        }
    }
}

/// The complete, self-contained description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for model parameter initialization.
    pub init_seed: u64,
    pub data: SyntheticTaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub threshold: ThresholdConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            init_seed: 1,
            data: SyntheticTaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            threshold: ThresholdConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a TOML experiment file, apply the environment path override,
    /// and validate the result. Unknown keys anywhere are rejected.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_path_override(&mut cfg, env::var_os("TRLAB_WORK_DIR"));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.threshold.validate(&self.model)?;
        if self.model.feature_dim != self.data.feature_dim {
            return Err(Error::Config(
                "model feature_dim must match the data feature_dim".into(),
            ));
        }
        if self.model.vocab_size != self.data.vocab_size {
            return Err(Error::Config(
                "model vocab_size must match the data vocab_size".into(),
            ));
        }
        if self.model.stride != self.data.encoder_stride {
            return Err(Error::Config(
                "model stride must match the data encoder_stride".into(),
            ));
        }
        if self.sweep.lambdas.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        if self.sweep.lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "sweep thresholds must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Canonical TOML rendering of the fully resolved configuration; field
    /// order is fixed, so equal configs render identically.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("render config: {e}")))
    }

    /// SHA-256 of the resolved rendering, in hex.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.resolved_toml()?.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

fn apply_path_override(cfg: &mut ExperimentConfig, work_dir: Option<std::ffi::OsString>) {
    if let Some(dir) = work_dir {
        if !dir.is_empty() {
            cfg.paths.work_dir = PathBuf::from(dir);
        }
    }
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", name.to_string_lossy()));
    let result = fs::write(&tmp, text).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Into::into)
}

/// Write the resolved configuration artifact; every stage starts here.
fn write_resolved(cfg: &ExperimentConfig) -> Result<String> {
    let hash = cfg.hash()?;
    let text = format!("# config {hash}\n{}", cfg.resolved_toml()?);
    write_text_atomic(&cfg.paths.resolved_config(), &text)?;
    Ok(hash)
}

/// Run `f` on a dedicated thread pool of `jobs` workers; 0 keeps the
/// default parallelism.
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(f)
    }
}

fn load_model(cfg: &ExperimentConfig) -> Result<ModelParameters> {
    let params = ModelParameters::load(&cfg.paths.checkpoint())?;
    if params.config != cfg.model {
        return Err(Error::Config(
            "checkpoint was trained with a different model configuration".into(),
        ));
    }
    Ok(params)
}

fn load_test_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    let set = Dataset::load(&cfg.paths.test_set())?;
    if set.vocabulary.size() != cfg.model.vocab_size {
        return Err(Error::Config(
            "dataset vocabulary does not match the model vocabulary".into(),
        ));
    }
    Ok(set)
}

fn transcript(vocabulary: &Vocabulary, tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| vocabulary.name(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The threshold values that were actually applied, for reporting; inactive
/// mechanisms report no value.
fn active_lambdas(t: &ThresholdConfig) -> (Option<f64>, Option<f64>) {
    (
        t.filters_frames().then_some(t.lambda_ctc),
        t.gates_steps().then_some(t.lambda_hat),
    )
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct GenDataReport {
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// Oracle non-blank percentage of the test split under the model stride.
    pub test_oracle_nbp: f64,
}

/// Generate and store the three dataset splits.
pub fn run_gen_data(cfg: &ExperimentConfig, jobs: usize) -> Result<GenDataReport> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let splits = with_pool(jobs, || generate(&cfg.data))?;
    splits.train.save(&cfg.paths.train_set())?;
    splits.dev.save(&cfg.paths.dev_set())?;
    splits.test.save(&cfg.paths.test_set())?;
    Ok(GenDataReport {
        train_utterances: splits.train.utterances.len(),
        dev_utterances: splits.dev.utterances.len(),
        test_utterances: splits.test.utterances.len(),
        test_oracle_nbp: oracle_nbp(&splits.test, cfg.model.stride),
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_dev_joint: f64,
    pub skipped_utterances: usize,
    pub checkpoint: PathBuf,
}

/// Train from a fresh initialization and write the best checkpoint plus the
/// per-epoch loss trace. Training is sequential by design so that equal
/// seeds give bit-equal parameters.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let hash = write_resolved(cfg)?;
    let train_set = Dataset::load(&cfg.paths.train_set())?;
    let dev_set = Dataset::load(&cfg.paths.dev_set())?;
    if train_set.vocabulary.size() != cfg.model.vocab_size {
        return Err(Error::Config(
            "dataset vocabulary does not match the model vocabulary".into(),
        ));
    }
    let init = ModelParameters::init(cfg.model.clone(), cfg.init_seed)?;
    let outcome = train(
        &init,
        &train_set.utterances,
        &dev_set.utterances,
        &cfg.train,
    )?;
    outcome.params.save(&cfg.paths.checkpoint())?;
    let mut trace = format!("# config {hash}\nepoch,split,rnnt,ctc,ilm,joint\n");
    for row in &outcome.trace {
        let _ = writeln!(
            trace,
            "{},{},{},{},{},{}",
            row.epoch, row.split, row.rnnt, row.ctc, row.ilm, row.joint
        );
    }
    write_text_atomic(&cfg.paths.loss_trace(), &trace)?;
    Ok(TrainReport {
        best_epoch: outcome.best_epoch,
        best_dev_joint: outcome.best_dev_joint,
        skipped_utterances: outcome.skipped_utterances,
        checkpoint: cfg.paths.checkpoint(),
    })
}

#[derive(Debug, Clone)]
pub struct DecodeRunReport {
    pub utterances: usize,
    pub summary: EvalSummary,
    pub report_path: PathBuf,
    pub summary_path: PathBuf,
}

fn decode_set(
    params: &ModelParameters,
    utterances: &[Utterance],
    decode: &DecodeConfig,
    thresholds: &ThresholdConfig,
    jobs: usize,
) -> Result<Vec<DecodeOutput>> {
    with_pool(jobs, || {
        utterances
            .par_iter()
            .map(|u| decode_utterance(params, &u.features, u.audio_seconds, decode, thresholds))
            .collect()
    })
}

fn summarize(utterances: &[Utterance], outputs: &[DecodeOutput]) -> Result<EvalSummary> {
    let stats: Vec<DecodeStats> = outputs.iter().map(|o| o.stats).collect();
    let pairs: Vec<(&[TokenId], &[TokenId])> = utterances
        .iter()
        .zip(outputs)
        .map(|(u, o)| (u.reference.as_slice(), o.best.tokens.as_slice()))
        .collect();
    aggregate(&stats, &pairs)
}

/// One summary line with the benchmark-table columns.
fn summary_row(
    summary: &EvalSummary,
    decode: &DecodeConfig,
    thresholds: &ThresholdConfig,
) -> String {
    let (lc, lh) = active_lambdas(thresholds);
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        summary.wer,
        decode.algorithm,
        opt_field(lc),
        opt_field(lh),
        summary.nbp,
        summary.jcr,
        summary.rtf
    )
}

/// Decode the test split and write the per-utterance report plus the corpus
/// summary.
pub fn run_decode(cfg: &ExperimentConfig, jobs: usize) -> Result<DecodeRunReport> {
    cfg.validate()?;
    let hash = write_resolved(cfg)?;
    let params = load_model(cfg)?;
    let test = load_test_set(cfg)?;
    let outputs = decode_set(&params, &test.utterances, &cfg.decode, &cfg.threshold, jobs)?;
    let (lc, lh) = active_lambdas(&cfg.threshold);
    let mut report = format!(
        "# config {hash}\nid\ttranscript\treference\talgorithm\tmode\tlambda_ctc\tlambda_hat\tnbp\tjcr\twall_seconds\taudio_seconds\n"
    );
    for (utt, out) in test.utterances.iter().zip(&outputs) {
        let _ = writeln!(
            report,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            utt.id,
            transcript(&test.vocabulary, &out.best.tokens),
            transcript(&test.vocabulary, &utt.reference),
            cfg.decode.algorithm,
            cfg.threshold.mode,
            opt_field(lc),
            opt_field(lh),
            out.stats.non_blank_percentage(),
            out.stats.joint_call_ratio(),
            out.stats.wall_decode_seconds,
            out.stats.audio_seconds
        );
    }
    write_text_atomic(&cfg.paths.decode_report(), &report)?;
    let summary = summarize(&test.utterances, &outputs)?;
    let summary_text = format!(
        "# config {hash}\nwer\talgorithm\tlambda_ctc\tlambda_hat\tnbp\tjcr\trtf\n{}\n",
        summary_row(&summary, &cfg.decode, &cfg.threshold)
    );
    write_text_atomic(&cfg.paths.decode_summary(), &summary_text)?;
    Ok(DecodeRunReport {
        utterances: test.utterances.len(),
        summary,
        report_path: cfg.paths.decode_report(),
        summary_path: cfg.paths.decode_summary(),
    })
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    /// Ratio of summed wall time to summed audio time over the timed runs.
    pub mean_rtf: f64,
    pub summary: EvalSummary,
    pub report_path: PathBuf,
}

/// Repeat timed decodes of the test split. Warm-up runs are excluded from
/// timing, and everything runs on the calling thread for stable numbers.
pub fn run_bench(cfg: &ExperimentConfig, warmup: usize, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("need at least one timed run".into()));
    }
    cfg.validate()?;
    let hash = write_resolved(cfg)?;
    let params = load_model(cfg)?;
    let test = load_test_set(cfg)?;
    let run_once = |_: usize| -> Result<Vec<DecodeOutput>> {
        test.utterances
            .iter()
            .map(|u| {
                decode_utterance(
                    &params,
                    &u.features,
                    u.audio_seconds,
                    &cfg.decode,
                    &cfg.threshold,
                )
            })
            .collect()
    };
    for i in 0..warmup {
        run_once(i)?;
    }
    let mut report = format!("# config {hash}\nrepeat\twall_seconds\taudio_seconds\trtf\n");
    let mut wall_total = 0.0;
    let mut audio_total = 0.0;
    let mut last_outputs = Vec::new();
    for repeat in 0..repeats {
        let started = Instant::now();
        let outputs = run_once(repeat)?;
        let wall = started.elapsed().as_secs_f64();
        let audio: f64 = outputs.iter().map(|o| o.stats.audio_seconds).sum();
        let _ = writeln!(report, "{repeat}\t{wall}\t{audio}\t{}", wall / audio);
        wall_total += wall;
        audio_total += audio;
        last_outputs = outputs;
    }
    let mean_rtf = wall_total / audio_total;
    let summary = summarize(&test.utterances, &last_outputs)?;
    let _ = writeln!(report, "mean\t{wall_total}\t{audio_total}\t{mean_rtf}");
    write_text_atomic(&cfg.paths.bench_report(), &report)?;
    Ok(BenchReport {
        warmup_runs: warmup,
        timed_runs: repeats,
        mean_rtf,
        summary,
        report_path: cfg.paths.bench_report(),
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub mode: ThresholdMode,
    pub lambda_ctc: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub wer: f64,
    pub nbp: f64,
    pub jcr: f64,
    pub rtf: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub curve_path: PathBuf,
}

fn sweep_grid(cfg: &ExperimentConfig) -> Vec<ThresholdConfig> {
    let base = &cfg.threshold;
    let lambdas = &cfg.sweep.lambdas;
    match cfg.sweep.target {
        SweepTarget::Hat => lambdas
            .iter()
            .map(|&l| ThresholdConfig {
                mode: ThresholdMode::Hat,
                lambda_hat: l,
                ..base.clone()
            })
            .collect(),
        SweepTarget::Ctc => lambdas
            .iter()
            .map(|&l| ThresholdConfig {
                mode: ThresholdMode::Ctc,
                lambda_ctc: l,
                ..base.clone()
            })
            .collect(),
        SweepTarget::Dual => lambdas
            .iter()
            .flat_map(|&lc| {
                lambdas.iter().map(move |&lh| ThresholdConfig {
                    mode: ThresholdMode::Dual,
                    lambda_ctc: lc,
                    lambda_hat: lh,
                    ..base.clone()
                })
            })
            .collect(),
    }
}

/// Decode the test split once per grid point and write the trade-off curve.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepReport> {
    cfg.validate()?;
    let hash = write_resolved(cfg)?;
    let params = load_model(cfg)?;
    let test = load_test_set(cfg)?;
    let grid = sweep_grid(cfg);
    for point in &grid {
        point.validate(&params.config)?;
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut curve = format!("# config {hash}\nmode,lambda_ctc,lambda_hat,wer,nbp,jcr,rtf\n");
    for thresholds in &grid {
        let outputs = decode_set(&params, &test.utterances, &cfg.decode, thresholds, jobs)?;
        let summary = summarize(&test.utterances, &outputs)?;
        let (lc, lh) = active_lambdas(thresholds);
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{},{}",
            thresholds.mode,
            opt_field(lc),
            opt_field(lh),
            summary.wer,
            summary.nbp,
            summary.jcr,
            summary.rtf
        );
        rows.push(SweepRow {
            mode: thresholds.mode,
            lambda_ctc: lc,
            lambda_hat: lh,
            wer: summary.wer,
            nbp: summary.nbp,
            jcr: summary.jcr,
            rtf: summary.rtf,
        });
    }
    write_text_atomic(&cfg.paths.sweep_curve(), &curve)?;
    Ok(SweepReport {
        rows,
        curve_path: cfg.paths.sweep_curve(),
    })
}
