//! Declarative experiment runner.
//!
//! An [`ExperimentConfig`] names a corpus, a pipeline configuration, the
//! protocols to run and the seeds. The runner expands that into training
//! units, one per (variant, budget, target, seed), each with its own
//! directory under `<output>/units`. A finished unit is never recomputed, so
//! an interrupted run resumes where it stopped.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_synthetic_corpus, load_corpus, SlotTypeRegistry, SynthSpec, Utterance};
use crate::error::{Error, Result};
use crate::eval::{evaluate_unit, render_csv, render_table, train_pipeline, unit_split, Budget, DomainEvaluation, EvalReport, PipelineConfig, Protocol, TrainedPipeline, UnitResult, UnitSpec, Variant};
use crate::model::{load_checkpoint, save_checkpoint, TrainingLog};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "SLOTPROMPT_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generate from a synthesis spec.
    Synth {
        spec: PathBuf,
        #[serde(default)]
        seed: u64,
    },
    /// Read a JSON-lines corpus.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    /// A domain name, or `all` for a leave-one-out sweep.
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    pub protocols: Vec<Protocol>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub few_shot_budgets: Vec<Budget>,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
    #[serde(default = "default_true")]
    pub save_predictions: bool,
}

fn default_target() -> String {
    "all".into()
}

fn default_dev_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// A validated config with its relative paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub corpus: CorpusSource,
    pub output_dir: PathBuf,
    pub hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() {
            return Err(Error::config("protocols", "at least one protocol must be selected"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.protocols.contains(&Protocol::FewShot) && self.few_shot_budgets.is_empty() {
            return Err(Error::config("few_shot_budgets", "the few_shot protocol needs at least one budget"));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::config("dev_fraction", format!("{} is not in (0, 1)", self.dev_fraction)));
        }
        if self.target.trim().is_empty() {
            return Err(Error::config("target", "must be a domain name or \"all\""));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.pipeline.validate()
    }

    /// SHA-256 of the canonical JSON of everything except the output
    /// location. Key order in the source file does not matter.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
    }

    /// Reads, validates and resolves a config file. Relative corpus paths
    /// are taken from the config's directory; a relative `output_dir` is
    /// placed under `$SLOTPROMPT_OUTPUT_ROOT` when set.
    pub fn load(path: impl AsRef<Path>) -> Result<LoadedConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let config = Self::from_json(&text)?;
        config.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let corpus = match &config.corpus {
            CorpusSource::Synth { spec, seed } => {
                let spec = base.join(spec);
                if !spec.is_file() {
                    return Err(Error::config("corpus.synth.spec", format!("{} does not exist", spec.display())));
                }
                CorpusSource::Synth { spec, seed: *seed }
            }
            CorpusSource::File { path } => {
                let path = base.join(path);
                if !path.is_file() {
                    return Err(Error::config("corpus.file.path", format!("{} does not exist", path.display())));
                }
                CorpusSource::File { path }
            }
        };
        let output_dir = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if config.output_dir.is_relative() => PathBuf::from(root).join(&config.output_dir),
            _ => base.join(&config.output_dir),
        };
        let hash = config.hash()?;
        Ok(LoadedConfig {
            config,
            corpus,
            output_dir,
            hash,
        })
    }
}

impl LoadedConfig {
    /// Loads or generates the corpus; also returns a digest of its source
    /// bytes.
    pub fn load_corpus(&self) -> Result<(Vec<Utterance>, SlotTypeRegistry, String)> {
        match &self.corpus {
            CorpusSource::Synth { spec, seed } => {
                let bytes = fs::read(spec)?;
                let parsed: SynthSpec = serde_json::from_slice(&bytes)?;
                let (corpus, registry) = generate_synthetic_corpus(&parsed, *seed)?;
                Ok((corpus, registry, sha256_hex(&bytes)))
            }
            CorpusSource::File { path } => {
                let (corpus, registry) = load_corpus(path)?;
                Ok((corpus, registry, sha256_hex(&fs::read(path)?)))
            }
        }
    }

    /// Target domains to sweep.
    pub fn targets(&self, registry: &SlotTypeRegistry, corpus: &[Utterance]) -> Result<Vec<String>> {
        let domains: BTreeSet<&str> = corpus.iter().map(|u| u.domain.as_str()).chain(registry.domains()).collect();
        if self.config.target == "all" {
            return Ok(domains.into_iter().map(String::from).collect());
        }
        if !domains.contains(self.config.target.as_str()) {
            return Err(Error::UnknownDomain(self.config.target.clone()));
        }
        Ok(vec![self.config.target.clone()])
    }

    /// Every unit the selected protocols need, in execution order: unbudgeted
    /// units first.
    pub fn units(&self, targets: &[String]) -> Vec<UnitSpec> {
        let protocols = &self.config.protocols;
        let mut specs = BTreeSet::new();
        let mut add = |variant: Variant, budget: Budget| {
            for target in targets {
                for &seed in &self.config.seeds {
                    specs.insert(UnitSpec {
                        target: target.clone(),
                        variant,
                        budget,
                        seed,
                    });
                }
            }
        };
        add(Variant::Full, Budget::All);
        if protocols.contains(&Protocol::InverseAnalysis) {
            add(Variant::WithoutRp, Budget::All);
        }
        if protocols.contains(&Protocol::Ablation) {
            for v in Variant::ALL {
                add(v, Budget::All);
            }
        }
        if protocols.contains(&Protocol::FewShot) {
            for &b in &self.config.few_shot_budgets {
                add(Variant::Full, b);
            }
        }
        let (all, counts): (Vec<_>, Vec<_>) = specs.into_iter().partition(|s| s.budget == Budget::All);
        all.into_iter().chain(counts).collect()
    }

    fn wants_robustness(&self, spec: &UnitSpec) -> bool {
        self.config.protocols.contains(&Protocol::Robustness) && spec.variant == Variant::Full && spec.budget == Budget::All
    }

    /// Digest of everything that determines a unit's result.
    fn unit_key(&self, corpus_digest: &str) -> Result<String> {
        let value = serde_json::json!({
            "corpus": corpus_digest,
            "pipeline": self.config.pipeline,
            "dev_fraction": self.config.dev_fraction,
        });
        Ok(sha256_hex(serde_json::to_string(&value)?.as_bytes()))
    }
}

pub fn unit_dir(output_dir: &Path, spec: &UnitSpec) -> PathBuf {
    output_dir
        .join("units")
        .join(spec.variant.key())
        .join(spec.budget.to_string())
        .join(&spec.target)
        .join(format!("seed-{}", spec.seed))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UnitRecord {
    unit_key: String,
    result: UnitResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingRecord {
    unit_key: String,
    warmup_log: Option<TrainingLog>,
    main_log: TrainingLog,
}

/// How a unit's result was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Computed,
    FromCheckpoint,
    Cached,
    /// A few-shot budget that kept every training utterance shares the
    /// result of the unbudgeted unit.
    Reused,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitEntry {
    pub spec: UnitSpec,
    pub status: UnitStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub unit: Option<UnitSpec>,
    pub error: String,
}

/// Run bookkeeping; unlike the report it records wall-clock times.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub protocols: Vec<Protocol>,
    pub targets: Vec<String>,
    pub units: Vec<UnitEntry>,
    pub wall_clock_seconds: f64,
    pub completed: bool,
    pub failures: Vec<Failure>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn write_predictions(path: &Path, evaluation: &DomainEvaluation) -> Result<()> {
    let mut out = String::new();
    for ((utterance_id, predictions), scored) in evaluation.predictions.iter().zip(&evaluation.utterances) {
        let line = serde_json::json!({
            "utterance_id": utterance_id,
            "predictions": predictions,
            "gold": scored.gold,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Paths of the artifacts a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub output_dir: PathBuf,
    pub report_path: PathBuf,
    pub report: EvalReport,
    pub manifest: Manifest,
}

struct Runner<'a> {
    loaded: &'a LoadedConfig,
    corpus: Vec<Utterance>,
    registry: SlotTypeRegistry,
    unit_key: String,
}

impl Runner<'_> {
    fn checkpoint_paths(&self, dir: &Path) -> (PathBuf, PathBuf) {
        (dir.join("model.ckpt"), dir.join("training.json"))
    }

    /// Loads a saved pipeline for `spec` if its checkpoint matches the
    /// current configuration.
    fn saved_pipeline(&self, spec: &UnitSpec, dir: &Path) -> Option<TrainedPipeline> {
        let (ckpt, training) = self.checkpoint_paths(dir);
        let record: TrainingRecord = read_json(&training)?;
        if record.unit_key != self.unit_key {
            return None;
        }
        let model = load_checkpoint(ckpt).ok()?;
        Some(TrainedPipeline {
            model,
            config: spec.variant.apply(&self.loaded.config.pipeline),
            warmup_log: record.warmup_log,
            main_log: record.main_log,
        })
    }

    fn train(&self, spec: &UnitSpec, dir: &Path) -> Result<(TrainedPipeline, bool)> {
        if let Some(pipeline) = self.saved_pipeline(spec, dir) {
            return Ok((pipeline, true));
        }
        let split = unit_split(&self.corpus, &self.registry, spec, self.loaded.config.dev_fraction)?;
        let pipeline = train_pipeline(&split, &self.registry, &spec.variant.apply(&self.loaded.config.pipeline), spec.seed)?;
        if self.loaded.config.save_checkpoints && spec.variant == Variant::Full && spec.budget == Budget::All {
            let (ckpt, training) = self.checkpoint_paths(dir);
            save_checkpoint(&pipeline.model, ckpt)?;
            write_json(
                &training,
                &TrainingRecord {
                    unit_key: self.unit_key.clone(),
                    warmup_log: pipeline.warmup_log.clone(),
                    main_log: pipeline.main_log.clone(),
                },
            )?;
        }
        Ok((pipeline, false))
    }

    fn cached(&self, spec: &UnitSpec, dir: &Path) -> Option<UnitResult> {
        let record: UnitRecord = read_json(&dir.join("unit.json"))?;
        let usable = record.unit_key == self.unit_key && &record.result.spec == spec && (record.result.robustness.is_some() || !self.loaded.wants_robustness(spec));
        usable.then_some(record.result)
    }

    fn run_unit(&self, spec: &UnitSpec) -> Result<(UnitResult, UnitStatus)> {
        let dir = unit_dir(&self.loaded.output_dir, spec);
        if let Some(result) = self.cached(spec, &dir) {
            return Ok((result, UnitStatus::Cached));
        }
        let split = unit_split(&self.corpus, &self.registry, spec, self.loaded.config.dev_fraction)?;
        if let Budget::Count(_) = spec.budget {
            let full_spec = UnitSpec {
                budget: Budget::All,
                ..spec.clone()
            };
            let full_split = unit_split(&self.corpus, &self.registry, &full_spec, self.loaded.config.dev_fraction)?;
            if full_split.train.len() == split.train.len() {
                let (full, _) = self.run_unit(&full_spec)?;
                let result = UnitResult {
                    spec: spec.clone(),
                    robustness: None,
                    ..full
                };
                fs::create_dir_all(&dir)?;
                write_json(
                    &dir.join("unit.json"),
                    &UnitRecord {
                        unit_key: self.unit_key.clone(),
                        result: result.clone(),
                    },
                )?;
                return Ok((result, UnitStatus::Reused));
            }
        }
        fs::create_dir_all(&dir)?;
        let (pipeline, from_checkpoint) = self.train(spec, &dir)?;
        let (result, evaluation) = evaluate_unit(&pipeline, &split, &self.registry, spec, self.loaded.wants_robustness(spec))?;
        if self.loaded.config.save_predictions {
            write_predictions(&dir.join("predictions.jsonl"), &evaluation)?;
        }
        write_json(
            &dir.join("unit.json"),
            &UnitRecord {
                unit_key: self.unit_key.clone(),
                result: result.clone(),
            },
        )?;
        let status = if from_checkpoint { UnitStatus::FromCheckpoint } else { UnitStatus::Computed };
        Ok((result, status))
    }
}

fn prepare_runner(loaded: &LoadedConfig) -> Result<(Runner<'_>, Vec<String>)> {
    let (corpus, registry, digest) = loaded.load_corpus()?;
    let targets = loaded.targets(&registry, &corpus)?;
    let unit_key = loaded.unit_key(&digest)?;
    Ok((
        Runner {
            loaded,
            corpus,
            registry,
            unit_key,
        },
        targets,
    ))
}

fn new_manifest(loaded: &LoadedConfig, targets: &[String]) -> Manifest {
    Manifest {
        config_hash: loaded.hash.clone(),
        seeds: loaded.config.seeds.clone(),
        protocols: loaded.config.protocols.clone(),
        targets: targets.to_vec(),
        units: Vec::new(),
        wall_clock_seconds: 0.0,
        completed: false,
        failures: Vec::new(),
    }
}

/// Runs every unit the config needs and writes `report.json`,
/// `report.txt`, `report.csv` and `manifest.json` to the output directory.
/// On failure the manifest records the failing unit and the error is
/// returned.
pub fn run_experiment(config_path: impl AsRef<Path>) -> Result<RunOutput> {
    let loaded = ExperimentConfig::load(config_path)?;
    run_loaded(&loaded)
}

pub fn run_loaded(loaded: &LoadedConfig) -> Result<RunOutput> {
    let start = Instant::now();
    fs::create_dir_all(&loaded.output_dir)?;
    let manifest_path = loaded.output_dir.join("manifest.json");
    let (runner, targets) = match prepare_runner(loaded) {
        Ok(ok) => ok,
        Err(e) => {
            let mut manifest = new_manifest(loaded, &[]);
            manifest.failures.push(Failure {
                unit: None,
                error: e.to_string(),
            });
            write_json(&manifest_path, &manifest)?;
            return Err(e);
        }
    };
    let mut manifest = new_manifest(loaded, &targets);
    let mut results = Vec::new();
    for spec in loaded.units(&targets) {
        let unit_start = Instant::now();
        match runner.run_unit(&spec) {
            Ok((result, status)) => {
                results.push(result);
                manifest.units.push(UnitEntry {
                    spec,
                    status,
                    seconds: unit_start.elapsed().as_secs_f64(),
                });
                manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
                write_json(&manifest_path, &manifest)?;
            }
            Err(e) => {
                manifest.failures.push(Failure {
                    unit: Some(spec),
                    error: e.to_string(),
                });
                manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
                write_json(&manifest_path, &manifest)?;
                return Err(e);
            }
        }
    }
    let report = EvalReport::build(loaded.hash.clone(), &loaded.config.protocols, results);
    let report_path = loaded.output_dir.join("report.json");
    write_atomic(&report_path, report.to_json()?.as_bytes())?;
    write_atomic(&loaded.output_dir.join("report.txt"), render_table(&report).as_bytes())?;
    write_atomic(&loaded.output_dir.join("report.csv"), render_csv(&report).as_bytes())?;
    manifest.completed = true;
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_json(&manifest_path, &manifest)?;
    Ok(RunOutput {
        output_dir: loaded.output_dir.clone(),
        report_path,
        report,
        manifest,
    })
}

/// Trains and checkpoints the full-configuration pipeline for every
/// (target, seed) without evaluating. Returns the checkpoint directories.
pub fn train_experiment(config_path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let loaded = ExperimentConfig::load(config_path)?;
    let (runner, targets) = prepare_runner(&loaded)?;
    let mut dirs = Vec::new();
    for target in &targets {
        for &seed in &loaded.config.seeds {
            let spec = UnitSpec {
                target: target.clone(),
                variant: Variant::Full,
                budget: Budget::All,
                seed,
            };
            let dir = unit_dir(&loaded.output_dir, &spec);
            fs::create_dir_all(&dir)?;
            if runner.saved_pipeline(&spec, &dir).is_none() {
                let split = unit_split(&runner.corpus, &runner.registry, &spec, loaded.config.dev_fraction)?;
                let pipeline = train_pipeline(&split, &runner.registry, &loaded.config.pipeline, seed)?;
                save_checkpoint(&pipeline.model, dir.join("model.ckpt"))?;
                write_json(
                    &dir.join("training.json"),
                    &TrainingRecord {
                        unit_key: runner.unit_key.clone(),
                        warmup_log: pipeline.warmup_log,
                        main_log: pipeline.main_log,
                    },
                )?;
            }
            dirs.push(dir);
        }
    }
    Ok(dirs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            other => Err(Error::config("format", format!("{other:?} is not one of json, table, csv"))),
        }
    }
}

/// Merges report files and renders them.
pub fn emit_report<P: AsRef<Path>>(paths: &[P], format: ReportFormat) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::config("paths", "no report files given"));
    }
    let reports = paths.iter().map(EvalReport::load).collect::<Result<Vec<_>>>()?;
    let merged = EvalReport::merge(&reports);
    match format {
        ReportFormat::Json => merged.to_json(),
        ReportFormat::Table => Ok(render_table(&merged)),
        ReportFormat::Csv => Ok(render_csv(&merged)),
    }
}
