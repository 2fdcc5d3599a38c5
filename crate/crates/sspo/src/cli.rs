//! Experiment orchestration: configuration, the end-to-end pipeline
//! (SFT -> sampling -> alignment -> evaluation), reports, histograms, and
//! ablation sweeps.
//!
//! Every artifact file name embeds the producing config hash, so re-running
//! an unchanged config overwrites files with identical bytes.

use crate::align::{
    train_dpo_vanilla, train_ppo, train_sspo, FormatControl, LossConfig, PpoReport, TrainReport,
};
use crate::corpus::{self, DatasetSplit, Document, QualityKey, SyntheticTaskSpec};
use crate::duration::{self, DurationOracle, LineDurations, MetricsReport};
use crate::policy::sample::{PrefixSampler, SamplerConfig};
use crate::policy::sft::{sft_train, SftConfig, SftReport};
use crate::policy::vocab::Vocabulary;
use crate::policy::{checkpoint, PolicyError, PolicyParams};
use crate::sampling::{
    coarse_sample, fine_sample, sspo_sample, DiversityThresholds, SampledDataset, SamplingContext,
    SamplingError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the default output root.
pub const OUT_DIR_ENV: &str = "SSPO_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

impl From<corpus::CorpusError> for CliError {
    fn from(e: corpus::CorpusError) -> Self {
        match e {
            corpus::CorpusError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Config(_) | PolicyError::Shape(_) => CliError::Config(e.to_string()),
            PolicyError::Diverged { .. } => CliError::Training(e.to_string()),
            PolicyError::Capacity { .. } | PolicyError::UnknownToken(_) => {
                CliError::Data(e.to_string())
            }
            PolicyError::Io(_) | PolicyError::Serde(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<SamplingError> for CliError {
    fn from(e: SamplingError) -> Self {
        match e {
            SamplingError::Policy(p) => p.into(),
            SamplingError::BadK(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<crate::align::AlignError> for CliError {
    fn from(e: crate::align::AlignError) -> Self {
        match e {
            crate::align::AlignError::Policy(p) => p.into(),
            crate::align::AlignError::Sampling(s) => s.into(),
            crate::align::AlignError::EmptyBatch => CliError::Data(e.to_string()),
        }
    }
}

impl From<duration::DurationError> for CliError {
    fn from(e: duration::DurationError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Which aligner the pipeline runs after SFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Sspo,
    DpoCoarse,
    DpoFine,
    Ppo,
}

impl std::fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainerKind::Sspo => write!(f, "sspo"),
            TrainerKind::DpoCoarse => write!(f, "dpo_coarse"),
            TrainerKind::DpoFine => write!(f, "dpo_fine"),
            TrainerKind::Ppo => write!(f, "ppo"),
        }
    }
}

/// The full experiment configuration. Serializes to a keyed TOML file; the
/// manifest embeds the exact config used.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment_id: String,
    pub seed: u64,
    /// Candidates sampled per line.
    pub k: usize,
    pub workers: usize,
    /// Also train an unconstrained variant during sspo pipelines and record
    /// its efficient rate in the manifest.
    pub compare_unconstrained: bool,
    pub task: SyntheticTaskSpec,
    pub sampler: SamplerConfig,
    pub sft: SftConfig,
    pub loss: LossConfig,
    pub thresholds: DiversityThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            experiment_id: "default".into(),
            seed: 7,
            k: 20,
            workers: 1,
            compare_unconstrained: false,
            task: SyntheticTaskSpec::default(),
            sampler: SamplerConfig::default(),
            sft: SftConfig::default(),
            loss: LossConfig::default(),
            thresholds: DiversityThresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("bad config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "config schema_version {} != expected {}",
                cfg.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| CliError::Data(e.to_string()))
    }

    /// Hash of the canonical JSON encoding; first 12 hex chars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.task.validate()?;
        self.sampler.validate()?;
        if self.k < 2 {
            return Err(CliError::Config(format!("k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// Default output root: $SSPO_OUT_DIR or ./out.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// One evaluated line: signed duration difference and format flag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LineDiff {
    pub diff: f64,
    pub efficient: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: MetricsReport,
    pub diffs: Vec<LineDiff>,
}

impl EvalResult {
    /// Variance of (dur_t - dur_s) over efficient lines (the histogram of
    /// actual translations).
    pub fn diff_variance(&self) -> f64 {
        let vals: Vec<f64> = self
            .diffs
            .iter()
            .filter(|d| d.efficient)
            .map(|d| d.diff)
            .collect();
        if vals.len() < 2 {
            return 0.0;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
    }
}

/// Greedy-decode the test split and score it. Non-efficient lines are
/// scored against the empty target (pause only), flagged via the metrics'
/// efficient-only variant rather than silently skipped.
pub fn evaluate_policy(
    policy: &PolicyParams,
    docs: &[Document],
    oracle: &DurationOracle,
) -> Result<EvalResult, CliError> {
    use rand_chacha::rand_core::SeedableRng;
    let cfg = SamplerConfig::greedy();
    let mut lines = Vec::new();
    let mut diffs = Vec::new();
    let empty_duration = oracle.pause;
    for doc in docs {
        let prompt = crate::policy::sft::encode_prompt(&policy.vocab, doc)?;
        let mut sampler = PrefixSampler::new(policy, &prompt)?;
        let budget = corpus::response_token_budget(doc);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let tokens = sampler.generate(&cfg, policy.vocab.eos(), budget, &mut rng)?;
        let text = policy.vocab.decode(&tokens);
        let (resp, flags) = corpus::parse_response(&text, doc);
        for (i, (line, flag)) in doc.lines.iter().zip(&flags).enumerate() {
            let dur_t = if *flag {
                oracle
                    .duration_of_text(&resp.entries[i].1)
                    .unwrap_or(empty_duration)
            } else {
                empty_duration
            };
            lines.push(LineDurations {
                dur_s: line.dur_s,
                dur_t,
                efficient: *flag,
            });
            diffs.push(LineDiff {
                diff: dur_t - line.dur_s,
                efficient: *flag,
            });
        }
    }
    Ok(EvalResult {
        metrics: duration::line_metrics(&lines)?,
        diffs,
    })
}

/// Metrics of the reference translations (every line is well-formed).
pub fn evaluate_gold(docs: &[Document]) -> Result<EvalResult, CliError> {
    let mut lines = Vec::new();
    let mut diffs = Vec::new();
    for doc in docs {
        for line in &doc.lines {
            lines.push(LineDurations {
                dur_s: line.dur_s,
                dur_t: line.dur_t,
                efficient: true,
            });
            diffs.push(LineDiff {
                diff: line.dur_t - line.dur_s,
                efficient: true,
            });
        }
    }
    Ok(EvalResult {
        metrics: duration::line_metrics(&lines)?,
        diffs,
    })
}

/// Metrics of the chosen translations over the sampled dataset (the
/// alignment-bound row).
pub fn evaluate_bound(sampled: &SampledDataset) -> Result<(f64, MetricsReport), CliError> {
    let bound = sampled.alignment_bound()?;
    let lines: Vec<LineDurations> = sampled
        .chosen_durations()
        .into_iter()
        .map(|(dur_s, dur_t)| LineDurations {
            dur_s,
            dur_t,
            efficient: true,
        })
        .collect();
    Ok((bound, duration::line_metrics(&lines)?))
}

// ---------------------------------------------------------------------------
// Histograms.
// ---------------------------------------------------------------------------

/// Bin centered counts: bin j covers [j*w - w/2, j*w + w/2).
pub fn histogram_bins(diffs: &[f64], width: f64) -> BTreeMap<i64, usize> {
    let mut bins = BTreeMap::new();
    for &d in diffs {
        let j = (d / width).round() as i64;
        *bins.entry(j).or_insert(0) += 1;
    }
    bins
}

pub fn write_histogram_csv(
    path: &Path,
    config_hash: &str,
    diffs: &[LineDiff],
    width: f64,
) -> Result<(), CliError> {
    let _ = config_hash;
    let mut out = String::from("diff,efficient\n");
    for d in diffs {
        out.push_str(&format!("{:.6},{}\n", d.diff, d.efficient));
    }
    std::fs::write(path, out).map_err(|e| CliError::Data(e.to_string()))?;

    let eff: Vec<f64> = diffs.iter().filter(|d| d.efficient).map(|d| d.diff).collect();
    let bins = histogram_bins(&eff, width);
    let mut out = String::from("bin_center,count\n");
    for (j, count) in bins {
        out.push_str(&format!("{:.3},{}\n", j as f64 * width, count));
    }
    let bin_path = path.with_file_name(format!(
        "{}_bins.csv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("histogram")
    ));
    std::fs::write(bin_path, out).map_err(|e| CliError::Data(e.to_string()))
}

// ---------------------------------------------------------------------------
// Pipeline.
// ---------------------------------------------------------------------------

/// Data + SFT + segment sampling shared by every aligner at one seed.
pub struct Workbench {
    pub config: RunConfig,
    pub split: DatasetSplit,
    pub oracle: DurationOracle,
    pub key: QualityKey,
    pub vocab: Vocabulary,
    pub sft: PolicyParams,
    pub sft_report: SftReport,
    pub sampled: SampledDataset,
}

impl Workbench {
    pub fn context(&self) -> SamplingContext<'_> {
        SamplingContext::new(&self.oracle, &self.key, &self.vocab)
    }
}

/// Generate data, train the SFT baseline, and run segment sampling.
pub fn prepare_workbench(config: &RunConfig) -> Result<Workbench, CliError> {
    config.validate()?;
    let (split, oracle, key) = corpus::generate_task(&config.task, config.seed)?;
    let vocab = Vocabulary::from_duration_table(&oracle);
    let dims = crate::policy::model::ModelDims::toy(vocab.len());
    let init = PolicyParams::init(vocab.clone(), dims, config.seed)?;
    let mut sft_cfg = config.sft.clone();
    sft_cfg.seed = config.seed;
    let (sft, sft_report) = sft_train(&init, &split.demonstration, &sft_cfg)
        .map_err(|e| CliError::Training(e.to_string()))?;
    let ctx = SamplingContext::new(&oracle, &key, &vocab);
    let sampled = sspo_sample(
        &sft,
        &split.query,
        config.k,
        &config.sampler,
        &ctx,
        config.thresholds,
        config.seed,
    )?;
    Ok(Workbench {
        config: config.clone(),
        split,
        oracle,
        key,
        vocab,
        sft,
        sft_report,
        sampled,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedOutcome {
    pub trainer: String,
    pub trained_eval: EvalResult,
    pub train_report: Option<TrainReport>,
    pub ppo_report: Option<PpoReport>,
    #[serde(skip)]
    pub trained: Option<PolicyParams>,
}

/// Run one aligner against a prepared workbench and evaluate on the test
/// split.
pub fn align_and_eval(
    wb: &Workbench,
    loss: &LossConfig,
    trainer: TrainerKind,
) -> Result<TrainedOutcome, CliError> {
    let ctx = wb.context();
    let mut loss = loss.clone();
    loss.seed = wb.config.seed;
    let (trained, train_report, ppo_report) = match trainer {
        TrainerKind::Sspo => {
            let (p, r) = train_sspo(&wb.sft, &wb.sampled, &wb.split.query, &loss, None)?;
            (p, Some(r), None)
        }
        TrainerKind::DpoCoarse => {
            let pairs = coarse_sample(
                &wb.sft,
                &wb.split.query,
                wb.config.k,
                &wb.config.sampler,
                &ctx,
                wb.config.seed,
            )?;
            let (p, r) = train_dpo_vanilla(&wb.sft, &pairs, &loss, None)?;
            (p, Some(r), None)
        }
        TrainerKind::DpoFine => {
            let pairs = fine_sample(
                &wb.sft,
                &wb.split.query,
                wb.config.k,
                &wb.config.sampler,
                &ctx,
                wb.config.seed,
            )?;
            let (p, r) = train_dpo_vanilla(&wb.sft, &pairs, &loss, None)?;
            (p, Some(r), None)
        }
        TrainerKind::Ppo => {
            let (p, _v, r) = train_ppo(&wb.sft, &wb.split.query, &wb.config.sampler, &ctx, &loss)?;
            (p, None, Some(r))
        }
    };
    let trained_eval = evaluate_policy(&trained, &wb.split.test, &wb.oracle)?;
    Ok(TrainedOutcome {
        trainer: trainer.to_string(),
        trained_eval,
        train_report,
        ppo_report,
        trained: Some(trained),
    })
}

/// Everything a full pipeline run produces, in memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub config_hash: String,
    pub trainer: String,
    pub gold: EvalResult,
    pub sft_eval: EvalResult,
    pub trained: TrainedOutcome,
    pub alignment_bound: f64,
    pub bound_metrics: MetricsReport,
    pub retained_lines: usize,
    pub total_lines: usize,
    pub sft_report: SftReport,
    pub unconstrained_efficient_rate: Option<f64>,
}

/// Deterministic run manifest (no wall-clock data, so reruns of the same
/// config byte-match).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub trainer: String,
    pub config: RunConfig,
    pub stages_completed: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub sft_epoch_losses: Vec<f64>,
    pub train_epoch_losses: Vec<f64>,
    pub retained_lines: usize,
    pub total_lines: usize,
    pub alignment_bound: Option<f64>,
    pub metrics: BTreeMap<String, MetricsReport>,
    pub diff_variance: BTreeMap<String, f64>,
    pub unconstrained_efficient_rate: Option<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Data(e.to_string()))
}

/// Table-style report: one metrics row per method plus the bound.
pub fn write_report_csv(
    path: &Path,
    rows: &[(&str, &MetricsReport)],
) -> Result<(), CliError> {
    let mut out = format!("Method,{}\n", MetricsReport::csv_header());
    for (name, m) in rows {
        out.push_str(&format!("{name},{}\n", m.to_csv_row()));
    }
    std::fs::write(path, out).map_err(|e| CliError::Data(e.to_string()))
}

/// Full pipeline: data, SFT, sampling, alignment, evaluation, reports.
/// When `out_dir` is given, artifacts and a manifest land there; stage
/// failures still write a partial manifest with the failed stage marked.
pub fn run_pipeline(
    config: &RunConfig,
    trainer: TrainerKind,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome, CliError> {
    let hash = config.hash();
    let mut manifest = new_manifest(config, trainer, &hash);
    manifest.failed_stage = Some("prepare".to_string());
    let wb = match prepare_workbench(config) {
        Ok(wb) => wb,
        Err(e) => {
            manifest.error = Some(e.to_string());
            if let Some(dir) = out_dir {
                let _ = std::fs::create_dir_all(dir);
                let _ = write_json(&dir.join(format!("manifest_{hash}.json")), &manifest);
            }
            return Err(e);
        }
    };
    run_pipeline_on(&wb, trainer, out_dir)
}

fn new_manifest(config: &RunConfig, trainer: TrainerKind, hash: &str) -> RunManifest {
    RunManifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        config_hash: hash.to_string(),
        trainer: trainer.to_string(),
        config: config.clone(),
        stages_completed: Vec::new(),
        failed_stage: None,
        error: None,
        sft_epoch_losses: Vec::new(),
        train_epoch_losses: Vec::new(),
        retained_lines: 0,
        total_lines: 0,
        alignment_bound: None,
        metrics: BTreeMap::new(),
        diff_variance: BTreeMap::new(),
        unconstrained_efficient_rate: None,
    }
}

/// Run alignment + evaluation + reporting against a prepared workbench.
pub fn run_pipeline_on(
    wb: &Workbench,
    trainer: TrainerKind,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome, CliError> {
    let config = &wb.config;
    let hash = config.hash();
    let mut manifest = new_manifest(config, trainer, &hash);
    manifest.stages_completed.push("prepare".to_string());
    let result = run_pipeline_inner(wb, trainer, out_dir, &hash, &mut manifest);
    if let Some(dir) = out_dir {
        let _ = std::fs::create_dir_all(dir);
        if let Err(e) = &result {
            manifest.error = Some(e.to_string());
        }
        let _ = write_json(&dir.join(format!("manifest_{hash}.json")), &manifest);
    }
    result
}

fn run_pipeline_inner(
    wb: &Workbench,
    trainer: TrainerKind,
    out_dir: Option<&Path>,
    hash: &str,
    manifest: &mut RunManifest,
) -> Result<PipelineOutcome, CliError> {
    let config = &wb.config;
    let stage = |m: &mut RunManifest, name: &str| m.failed_stage = Some(name.to_string());
    let done = |m: &mut RunManifest, name: &str| {
        m.stages_completed.push(name.to_string());
        m.failed_stage = None;
    };

    manifest.sft_epoch_losses = wb.sft_report.epoch_losses.clone();
    manifest.retained_lines = wb.sampled.retained_line_count();
    manifest.total_lines = wb.sampled.line_count();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(e.to_string()))?;
        corpus::write_split(&dir.join(format!("data_{hash}")), &wb.split)?;
        write_json(
            &dir.join(format!("data_{hash}")).join("duration_table.json"),
            &wb.oracle,
        )?;
        write_json(
            &dir.join(format!("data_{hash}")).join("quality_key.json"),
            &wb.key,
        )?;
        checkpoint::save(&dir.join(format!("sft_{hash}.ckpt.json")), &wb.sft)?;
        crate::sampling::write_sampled(
            &dir.join(format!("sampled_{hash}.jsonl")),
            &wb.sampled,
            &wb.vocab,
            &wb.split.query,
        )?;
    }

    stage(manifest, "evaluate-baselines");
    let gold = evaluate_gold(&wb.split.test)?;
    let sft_eval = evaluate_policy(&wb.sft, &wb.split.test, &wb.oracle)?;
    let (bound, bound_metrics) = evaluate_bound(&wb.sampled)?;
    manifest.alignment_bound = Some(bound);
    done(manifest, "evaluate-baselines");

    stage(manifest, "train");
    let trained = align_and_eval(&wb, &config.loss, trainer)?;
    if let Some(r) = &trained.train_report {
        manifest.train_epoch_losses = r.epoch_losses.clone();
    }
    done(manifest, "train");

    let mut unconstrained_rate = None;
    if config.compare_unconstrained
        && trainer == TrainerKind::Sspo
        && config.loss.format_control != FormatControl::None
    {
        stage(manifest, "train-unconstrained");
        let mut loss = config.loss.clone();
        loss.format_control = FormatControl::None;
        let unconstrained = align_and_eval(&wb, &loss, TrainerKind::Sspo)?;
        unconstrained_rate = Some(unconstrained.trained_eval.metrics.efficient_rate);
        done(manifest, "train-unconstrained");
    }
    manifest.unconstrained_efficient_rate = unconstrained_rate;

    stage(manifest, "report");
    manifest.metrics.insert("gold_reference".into(), gold.metrics.clone());
    manifest.metrics.insert("sft".into(), sft_eval.metrics.clone());
    manifest.metrics.insert(
        trained.trainer.clone(),
        trained.trained_eval.metrics.clone(),
    );
    manifest
        .metrics
        .insert("alignment_bound".into(), bound_metrics.clone());
    manifest
        .diff_variance
        .insert("sft".into(), sft_eval.diff_variance());
    manifest.diff_variance.insert(
        trained.trainer.clone(),
        trained.trained_eval.diff_variance(),
    );

    if let Some(dir) = out_dir {
        let rows: Vec<(&str, &MetricsReport)> = vec![
            ("Gold Reference", &gold.metrics),
            ("SFT", &sft_eval.metrics),
            (&trained.trainer, &trained.trained_eval.metrics),
            ("Alignment Bound", &bound_metrics),
        ];
        write_report_csv(&dir.join(format!("report_{hash}.csv")), &rows)?;
        if let Some(p) = &trained.trained {
            checkpoint::save(
                &dir.join(format!("trained_{}_{hash}.ckpt.json", trained.trainer)),
                p,
            )?;
        }
        write_histogram_csv(
            &dir.join(format!("histogram_sft_{hash}.csv")),
            hash,
            &sft_eval.diffs,
            duration::CONSISTENCY_THRESHOLD_SECS,
        )?;
        write_histogram_csv(
            &dir.join(format!("histogram_{}_{hash}.csv", trained.trainer)),
            hash,
            &trained.trained_eval.diffs,
            duration::CONSISTENCY_THRESHOLD_SECS,
        )?;
    }
    done(manifest, "report");

    Ok(PipelineOutcome {
        config_hash: hash.to_string(),
        trainer: trainer.to_string(),
        gold,
        sft_eval,
        trained,
        alignment_bound: bound,
        bound_metrics,
        retained_lines: manifest.retained_lines,
        total_lines: manifest.total_lines,
        sft_report: wb.sft_report.clone(),
        unconstrained_efficient_rate: unconstrained_rate,
    })
}

// ---------------------------------------------------------------------------
// Subcommand bodies (thin wrappers the binary dispatches to).
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(config: &RunConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    config.validate()?;
    let (split, oracle, key) = corpus::generate_task(&config.task, config.seed)?;
    let dir = out_dir.join(format!("data_{}", config.hash()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(e.to_string()))?;
    corpus::write_split(&dir, &split)?;
    write_json(&dir.join("duration_table.json"), &oracle)?;
    write_json(&dir.join("quality_key.json"), &key)?;
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "schema_version": CONFIG_SCHEMA_VERSION,
            "config_hash": config.hash(),
            "config": config,
            "documents": {
                "demonstration": split.demonstration.len(),
                "query": split.query.len(),
                "test": split.test.len(),
            },
        }),
    )?;
    Ok(dir)
}

pub fn cmd_sft(config: &RunConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    config.validate()?;
    let (split, oracle, _) = corpus::generate_task(&config.task, config.seed)?;
    let vocab = Vocabulary::from_duration_table(&oracle);
    let dims = crate::policy::model::ModelDims::toy(vocab.len());
    let init = PolicyParams::init(vocab, dims, config.seed)?;
    let mut sft_cfg = config.sft.clone();
    sft_cfg.seed = config.seed;
    let (sft, report) = sft_train(&init, &split.demonstration, &sft_cfg)
        .map_err(|e| CliError::Training(e.to_string()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let path = out_dir.join(format!("sft_{}.ckpt.json", config.hash()));
    checkpoint::save(&path, &sft)?;
    write_json(
        &out_dir.join(format!("sft_report_{}.json", config.hash())),
        &report,
    )?;
    Ok(path)
}

pub fn cmd_sample(
    config: &RunConfig,
    policy_path: Option<&Path>,
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    config.validate()?;
    let (split, oracle, key) = corpus::generate_task(&config.task, config.seed)?;
    let policy = match policy_path {
        Some(p) => checkpoint::load(p)?,
        None => {
            let wb_path = out_dir.join(format!("sft_{}.ckpt.json", config.hash()));
            checkpoint::load(&wb_path).map_err(|e| {
                CliError::Data(format!(
                    "no --policy given and {} unavailable: {e}",
                    wb_path.display()
                ))
            })?
        }
    };
    let vocab = policy.vocab.clone();
    let ctx = SamplingContext::new(&oracle, &key, &vocab);
    let sampled = sspo_sample(
        &policy,
        &split.query,
        config.k,
        &config.sampler,
        &ctx,
        config.thresholds,
        config.seed,
    )?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let path = out_dir.join(format!("sampled_{}.jsonl", config.hash()));
    crate::sampling::write_sampled(&path, &sampled, &vocab, &split.query)?;
    let bound = sampled.alignment_bound()?;
    write_json(
        &out_dir.join(format!("sampled_stats_{}.json", config.hash())),
        &serde_json::json!({
            "config_hash": config.hash(),
            "retained_lines": sampled.retained_line_count(),
            "total_lines": sampled.line_count(),
            "retained_fraction":
                sampled.retained_line_count() as f64 / sampled.line_count().max(1) as f64,
            "alignment_bound": bound,
            "segment_samples": sampled.segment_samples,
        }),
    )?;
    Ok(path)
}

pub fn cmd_eval(config: &RunConfig, ckpt: &Path, out_dir: &Path) -> Result<PathBuf, CliError> {
    config.validate()?;
    let (split, oracle, _) = corpus::generate_task(&config.task, config.seed)?;
    let policy = checkpoint::load(ckpt)?;
    let eval = evaluate_policy(&policy, &split.test, &oracle)?;
    let gold = evaluate_gold(&split.test)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let path = out_dir.join(format!("eval_{}.csv", config.hash()));
    write_report_csv(
        &path,
        &[
            ("Gold Reference", &gold.metrics),
            ("Model", &eval.metrics),
        ],
    )?;
    Ok(path)
}

pub fn cmd_histogram(config: &RunConfig, ckpt: &Path, out_dir: &Path) -> Result<PathBuf, CliError> {
    config.validate()?;
    let (split, oracle, _) = corpus::generate_task(&config.task, config.seed)?;
    let policy = checkpoint::load(ckpt)?;
    let eval = evaluate_policy(&policy, &split.test, &oracle)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let path = out_dir.join(format!("histogram_{}.csv", config.hash()));
    write_histogram_csv(
        &path,
        &config.hash(),
        &eval.diffs,
        duration::CONSISTENCY_THRESHOLD_SECS,
    )?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Beta,
    DataScale,
    FormatControl,
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepKind::Beta => write!(f, "beta"),
            SweepKind::DataScale => write!(f, "data_scale"),
            SweepKind::FormatControl => write!(f, "format_control"),
        }
    }
}

/// Ablation sweep: one pipeline per sweep value, reporting mean penalty and
/// efficient rate. Trend expectations are reported as notes, not enforced.
pub fn cmd_ablation(
    config: &RunConfig,
    sweep: SweepKind,
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    config.validate()?;
    let wb = prepare_workbench(config)?;
    let mut rows: Vec<(String, f64, f64)> = Vec::new();

    match sweep {
        SweepKind::Beta => {
            for beta in [0.1, 0.5, 1.0] {
                let mut loss = config.loss.clone();
                loss.beta = beta;
                let out = align_and_eval(&wb, &loss, TrainerKind::Sspo)?;
                rows.push((
                    format!("{beta}"),
                    out.trained_eval.metrics.mean_penalty,
                    out.trained_eval.metrics.efficient_rate,
                ));
            }
        }
        SweepKind::DataScale => {
            for frac in [0.25, 0.5, 1.0] {
                let take = ((wb.sampled.documents.len() as f64 * frac).ceil() as usize).max(1);
                let scaled = SampledDataset {
                    documents: wb.sampled.documents[..take].to_vec(),
                    segment_samples: 0,
                };
                let lines = scaled
                    .documents
                    .iter()
                    .map(|d| d.lines.len())
                    .sum::<usize>();
                let (p, _) = train_sspo(
                    &wb.sft,
                    &scaled,
                    &wb.split.query,
                    &config.loss,
                    None,
                )?;
                let eval = evaluate_policy(&p, &wb.split.test, &wb.oracle)?;
                rows.push((
                    format!("{lines}"),
                    eval.metrics.mean_penalty,
                    eval.metrics.efficient_rate,
                ));
            }
        }
        SweepKind::FormatControl => {
            for fc in [FormatControl::None, FormatControl::Tkld, FormatControl::LowRank] {
                let mut loss = config.loss.clone();
                loss.format_control = fc;
                let out = align_and_eval(&wb, &loss, TrainerKind::Sspo)?;
                rows.push((
                    fc.to_string(),
                    out.trained_eval.metrics.mean_penalty,
                    out.trained_eval.metrics.efficient_rate,
                ));
            }
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let path = out_dir.join(format!("ablation_{sweep}_{}.csv", config.hash()));
    let mut text = String::from("value,P,Efficient Rate\n");
    for (v, p, e) in &rows {
        text.push_str(&format!("{v},{p:.6},{e:.6}\n"));
    }
    std::fs::write(&path, text).map_err(|e| CliError::Data(e.to_string()))?;

    // Soft trend note for the data-scale sweep.
    let note = if sweep == SweepKind::DataScale {
        let monotone = rows.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
        Some(serde_json::json!({
            "expected_trend": "mean penalty decreases with more data",
            "observed_monotone_decreasing": monotone,
        }))
    } else {
        None
    };
    write_json(
        &out_dir.join(format!("ablation_{sweep}_{}_notes.json", config.hash())),
        &serde_json::json!({
            "config_hash": config.hash(),
            "sweep": sweep.to_string(),
            "rows": rows.iter().map(|(v, p, e)| serde_json::json!({
                "value": v, "mean_penalty": p, "efficient_rate": e
            })).collect::<Vec<_>>(),
            "trend_note": note,
        }),
    )?;
    Ok(path)
}
