//! Experiment configuration and the work behind each CLI subcommand.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camle::CalibrationConfig;
use crate::datagen::{self, DataError, DatasetSpec, FederatedDataset};
use crate::embeddings::{
    coarse_from_fine, load_coarse_mapping, load_embedding_file, make_state_embeddings,
    synth_embeddings, EmbeddingError, EmbeddingMatrix, StateEmbeddings, StateSource,
};
use crate::federation::{
    self, CalibrationSchedule, FederationConfig, FederationError, Mode, RoundReport, Sampling,
};
use crate::metrics::MetricsReport;
use crate::model::{
    read_checkpoint, write_checkpoint, BackboneKind, Checkpoint, CheckpointError, LabelGuide,
    LabelGuidedTransformer, ModelConfig, ModelError,
};
use crate::params::ParameterSet;
use crate::seed;

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "FEDLGT_OUT";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read config {path}: {source}")]
    ConfigMissing {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where the dataset comes from. `gen-data` needs `spec`; `train` loads
/// `dir` when given and otherwise generates from `spec` in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
}

/// Architecture knobs; class count and feature width come from the data
/// and the label-token mode from the training arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_feature_tokens: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub backbone: BackboneKind,
    #[serde(default = "yes")]
    pub positional_encoding: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub mode: Mode,
    pub rounds: usize,
    pub local_epochs: usize,
    pub active_fraction: f64,
    pub sampling: Sampling,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_fraction: (f64, f64),
    #[serde(default = "per_batch")]
    pub calibration_schedule: CalibrationSchedule,
}

fn per_batch() -> CalibrationSchedule {
    CalibrationSchedule::PerBatch
}

/// Exactly one label-embedding source. Width mismatches with the model
/// are bridged by a seeded projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingSection {
    /// Seeded orthonormal rows; the seed defaults to the run seed.
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A `ULE1` file; its `STATES` section supplies the state embeddings
    /// when `states_from_file` is set.
    File {
        path: PathBuf,
        #[serde(default)]
        states_from_file: bool,
    },
    /// Coarse classes averaged from a fine-grained `ULE1` file.
    Averaged {
        path: PathBuf,
        mapping: PathBuf,
        #[serde(default)]
        states_from_file: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Evaluate on the test split every this many rounds; 0 only at the end.
    pub eval_every: usize,
    /// Write a checkpoint every this many rounds; 0 only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub federation: FederationSection,
    pub calibration: CalibrationConfig,
    pub embeddings: EmbeddingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; referenced embedding files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::ConfigMissing {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::from_toml(&text)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dir.is_none() && self.data.spec.is_none() {
            return Err(ExperimentError::Config(
                "[data] needs `dir`, a [data.spec] table, or both".into(),
            ));
        }
        if let Some(spec) = &self.data.spec {
            spec.validate()?;
        }
        if let Some(a) = &self.ablation {
            if a.seeds.is_empty() {
                return Err(ExperimentError::Config("[ablation] seeds is empty".into()));
            }
        }
        self.calibration
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.federation_config(self.federation.mode, self.seed, 1)
            .validate()?;
        Ok(())
    }

    fn check_paths(&self) -> Result<()> {
        let paths: Vec<&PathBuf> = match &self.embeddings {
            EmbeddingSection::Synthetic { .. } => vec![],
            EmbeddingSection::File { path, .. } => vec![path],
            EmbeddingSection::Averaged { path, mapping, .. } => vec![path, mapping],
        };
        for p in paths {
            if !p.exists() {
                return Err(ExperimentError::Config(format!(
                    "embedding path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn federation_config(
        &self,
        mode: Mode,
        seed: u64,
        total_clients: usize,
    ) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            total_clients,
            active_fraction: f.active_fraction,
            sampling: f.sampling,
            seed,
            mode,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            mask_fraction: f.mask_fraction,
            calibration: self.calibration,
            calibration_schedule: f.calibration_schedule,
            eval_every: self.eval_every,
        }
    }

    pub fn model_config(&self, mode: Mode, num_classes: usize, feature_dim: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_classes,
            embed_dim: m.embed_dim,
            feature_dim,
            num_feature_tokens: m.num_feature_tokens,
            transformer_layers: m.transformer_layers,
            attention_heads: m.attention_heads,
            ffn_dim: m.ffn_dim,
            backbone: m.backbone,
            label_tokens: mode.label_tokens(),
            positional_encoding: m.positional_encoding,
        }
    }

    /// `--out`, then the environment override, then the config.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    fn generated_spec(&self, data_seed: Option<u64>) -> Result<DatasetSpec> {
        let mut spec = self
            .data
            .spec
            .clone()
            .ok_or_else(|| ExperimentError::Config("[data.spec] is required here".into()))?;
        if let Some(s) = data_seed {
            spec.seed = s;
        }
        Ok(spec)
    }

    /// Loads `[data] dir` if set, otherwise generates from the spec.
    pub fn dataset(&self) -> Result<FederatedDataset> {
        match &self.data.dir {
            Some(dir) => Ok(datagen::load_dataset(dir)?),
            None => Ok(datagen::generate(&self.generated_spec(None)?)?),
        }
    }

    /// Universal label embeddings and state embeddings at model width.
    pub fn label_side(
        &self,
        num_classes: usize,
        run_seed: u64,
    ) -> Result<(EmbeddingMatrix, StateEmbeddings)> {
        let d = self.model.embed_dim;
        let proj_seed = seed::derive_str(run_seed, "embedding-projection");
        let state_seed = seed::derive_str(run_seed, "state-embeddings");
        let (labels, file_states) = match &self.embeddings {
            EmbeddingSection::Synthetic { seed } => (
                synth_embeddings(num_classes, d, seed.unwrap_or(run_seed)),
                None,
            ),
            EmbeddingSection::File {
                path,
                states_from_file,
            } => {
                let f = load_embedding_file(path)?;
                (f.labels, if *states_from_file { f.states } else { None })
            }
            EmbeddingSection::Averaged {
                path,
                mapping,
                states_from_file,
            } => {
                let f = load_embedding_file(path)?;
                let map = load_coarse_mapping(mapping, &f.labels)?;
                let states = if *states_from_file {
                    f.states.clone()
                } else {
                    None
                };
                (coarse_from_fine(&f.labels, &map)?, states)
            }
        };
        if labels.num_classes() != num_classes {
            return Err(ExperimentError::Config(format!(
                "label embeddings have {} classes, the data has {num_classes}",
                labels.num_classes()
            )));
        }
        let wants_file_states = matches!(
            self.embeddings,
            EmbeddingSection::File {
                states_from_file: true,
                ..
            } | EmbeddingSection::Averaged {
                states_from_file: true,
                ..
            }
        );
        if wants_file_states && file_states.is_none() {
            return Err(EmbeddingError::MissingStates.into());
        }
        let states = match file_states {
            Some(s) => s,
            None => {
                make_state_embeddings(labels.dim(), StateSource::Synthetic { seed: state_seed })?
            }
        };
        if labels.dim() == d {
            Ok((labels, states))
        } else {
            Ok((labels.project(d, proj_seed), states.project(d, proj_seed)))
        }
    }

    /// The model for one arm. Learned-token arms carry no frozen label matrix.
    pub fn build_model(
        &self,
        mode: Mode,
        data: &FederatedDataset,
        run_seed: u64,
    ) -> Result<LabelGuidedTransformer> {
        let cfg = self.model_config(mode, data.num_classes, data.feature_dim);
        let (labels, states) = self.label_side(data.num_classes, run_seed)?;
        let labels = (cfg.label_tokens == crate::model::LabelTokens::Fixed).then_some(labels);
        Ok(LabelGuidedTransformer::new(
            cfg,
            LabelGuide { labels, states },
        )?)
    }
}

/// Per-line JSON writer for round logs.
fn append_line(file: &mut fs::File, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).expect("serializable");
    writeln!(file, "{line}").map_err(io_err(path))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// What `gen-data` reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub dir: PathBuf,
    pub num_clients: usize,
    pub num_classes: usize,
    pub sizes: Vec<usize>,
    pub test_size: usize,
}

impl DataSummary {
    /// Client count, class count and a size histogram with ten bins.
    pub fn render(&self) -> String {
        let mut out = format!(
            "clients: {}\nclasses: {}\ntrain samples: {}\ntest samples: {}\nclient sizes:\n",
            self.num_clients,
            self.num_classes,
            self.sizes.iter().sum::<usize>(),
            self.test_size
        );
        let (lo, hi) = (
            *self.sizes.iter().min().unwrap_or(&0),
            *self.sizes.iter().max().unwrap_or(&0),
        );
        let bins = 10usize;
        let width = ((hi - lo) / bins).max(1);
        let mut counts = vec![0usize; bins];
        for &n in &self.sizes {
            counts[((n - lo) / width).min(bins - 1)] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            if *c == 0 {
                continue;
            }
            let start = lo + i * width;
            let end = if i + 1 == bins { hi } else { start + width - 1 };
            out.push_str(&format!(
                "  {start:>6}-{end:<6} {:>4} {}\n",
                c,
                "#".repeat(*c)
            ));
        }
        out
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DataSummary> {
    let spec = cfg.generated_spec(None)?;
    let ds = datagen::generate(&spec)?;
    let dir = cfg.data.dir.clone().unwrap_or_else(|| out_dir.join("data"));
    datagen::save_dataset(&ds, &dir)?;
    Ok(DataSummary {
        dir,
        num_clients: ds.num_clients(),
        num_classes: ds.num_classes,
        sizes: ds.client_sizes(),
        test_size: ds.test.len(),
    })
}

/// Files written by `train`.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ROUND_LOG_FILE: &str = "rounds.jsonl";
pub const METRICS_LOG_FILE: &str = "metrics.jsonl";
pub const FINAL_METRICS_FILE: &str = "final_metrics.json";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub reports: Vec<RoundReport>,
    pub final_metrics: MetricsReport,
    pub checkpoint: Checkpoint,
}

/// Trains one arm and writes checkpoint, round logs and final metrics.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainSummary> {
    let data = cfg.dataset()?;
    let mode = cfg.federation.mode;
    let model = cfg.build_model(mode, &data, cfg.seed)?;
    let fed = cfg.federation_config(mode, cfg.seed, data.num_clients());
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;

    let round_path = out_dir.join(ROUND_LOG_FILE);
    let metrics_path = out_dir.join(METRICS_LOG_FILE);
    let mut round_log = create(&round_path)?;
    let mut metrics_log = create(&metrics_path)?;
    let mut io_failure = None;
    let init = federation::initial_params(&model, cfg.seed)?;
    let outcome = federation::run_training_from(&fed, &data, &model, init, |report, global| {
        if io_failure.is_some() {
            return;
        }
        let res = append_line(&mut round_log, &round_path, report)
            .and_then(|_| append_line(&mut metrics_log, &metrics_path, &report.deterministic()))
            .and_then(|_| {
                let every = cfg.checkpoint_every;
                if every > 0 && (report.round + 1) % every == 0 {
                    let path = out_dir.join(format!("checkpoint_round_{}.bin", report.round + 1));
                    write_checkpoint(&path, &checkpoint_of(&model, global))?;
                }
                Ok(())
            });
        if let Err(e) = res {
            io_failure = Some(e);
        }
    })?;
    if let Some(e) = io_failure {
        return Err(e);
    }
    let checkpoint = checkpoint_of(&model, &outcome.params);
    write_checkpoint(&out_dir.join(CHECKPOINT_FILE), &checkpoint)?;
    let final_metrics = match outcome.reports.last().and_then(|r| r.metrics) {
        Some(m) => m,
        None => federation::evaluate_global(&model, &outcome.params, &data.test)?,
    };
    write_text(
        &out_dir.join(FINAL_METRICS_FILE),
        &(serde_json::to_string_pretty(&final_metrics).expect("serializable") + "\n"),
    )?;
    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        reports: outcome.reports,
        final_metrics,
        checkpoint,
    })
}

pub fn checkpoint_of(model: &LabelGuidedTransformer, params: &ParameterSet) -> Checkpoint {
    Checkpoint {
        config: model.config.clone(),
        params: params.clone(),
        guide: model.guide.clone(),
    }
}

/// Evaluates a checkpoint on a dataset's test split.
pub fn eval(checkpoint: &Path, data_dir: &Path) -> Result<MetricsReport> {
    let ckpt = read_checkpoint(checkpoint)?;
    let data = datagen::load_dataset(data_dir)?;
    eval_checkpoint(&ckpt, &data)
}

pub fn eval_checkpoint(ckpt: &Checkpoint, data: &FederatedDataset) -> Result<MetricsReport> {
    if ckpt.config.num_classes != data.num_classes || ckpt.config.feature_dim != data.feature_dim {
        return Err(ExperimentError::Config(format!(
            "checkpoint expects {} classes and {} features, dataset has {} and {}",
            ckpt.config.num_classes, ckpt.config.feature_dim, data.num_classes, data.feature_dim
        )));
    }
    let model = LabelGuidedTransformer::new(ckpt.config.clone(), ckpt.guide.clone())?;
    Ok(federation::evaluate_global(
        &model,
        &ckpt.params,
        &data.test,
    )?)
}

/// One arm at one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub mode: Mode,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub reports: Vec<RoundReport>,
    pub params: ParameterSet,
    pub model: LabelGuidedTransformer,
}

/// Runs `mode` at `seed`. Generated data is regenerated with the same seed
/// so every arm at a given seed sees the same dataset and client sequence.
pub fn run_arm(cfg: &ExperimentConfig, mode: Mode, seed: u64) -> Result<ArmRun> {
    run_arm_on(cfg, mode, seed, &arm_dataset(cfg, seed)?)
}

fn arm_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<FederatedDataset> {
    match (&cfg.data.dir, &cfg.data.spec) {
        (None, Some(_)) => Ok(datagen::generate(&cfg.generated_spec(Some(seed))?)?),
        _ => cfg.dataset(),
    }
}

pub fn run_arm_on(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    data: &FederatedDataset,
) -> Result<ArmRun> {
    let model = cfg.build_model(mode, data, seed)?;
    let fed = cfg.federation_config(mode, seed, data.num_clients());
    let outcome = federation::run_training(&fed, data, &model)?;
    let metrics = match outcome.reports.last().and_then(|r| r.metrics) {
        Some(m) => m,
        None => federation::evaluate_global(&model, &outcome.params, &data.test)?,
    };
    Ok(ArmRun {
        mode,
        seed,
        metrics,
        reports: outcome.reports,
        params: outcome.params,
        model,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    /// `runs[arm][seed]`, arms in table order.
    pub runs: Vec<Vec<ArmRun>>,
}

impl AblationResult {
    pub fn mean(&self, arm: usize) -> [f64; 8] {
        let mut acc = [0.0; 8];
        for r in &self.runs[arm] {
            for (a, v) in acc.iter_mut().zip(r.metrics.values()) {
                *a += v;
            }
        }
        acc.map(|v| v / self.runs[arm].len() as f64)
    }

    /// Table rows (mean over seeds, scaled by 100) followed by per-seed C-AP.
    pub fn render(&self) -> String {
        let mut out = format!("{:<20}", "Method");
        for c in MetricsReport::COLUMNS {
            out.push_str(&format!("{c:>8}"));
        }
        out.push('\n');
        for (i, arm) in self.runs.iter().enumerate() {
            out.push_str(&format!("{:<20}", arm[0].mode.table_label()));
            for v in self.mean(i) {
                out.push_str(&format!("{:>8.2}", v * 100.0));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\nC-AP per seed ({} seeds)\n{:<20}",
            self.seeds.len(),
            "Method"
        ));
        for s in &self.seeds {
            out.push_str(&format!("{:>8}", format!("s{s}")));
        }
        out.push('\n');
        for arm in &self.runs {
            out.push_str(&format!("{:<20}", arm[0].mode.table_label()));
            for r in arm {
                out.push_str(&format!("{:>8.2}", r.metrics.c_ap * 100.0));
            }
            out.push('\n');
        }
        out
    }
}

pub fn ablate(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<AblationResult> {
    let mut runs: Vec<Vec<ArmRun>> = Mode::ABLATION.iter().map(|_| Vec::new()).collect();
    for &s in seeds {
        let data = arm_dataset(cfg, s)?;
        for (i, &mode) in Mode::ABLATION.iter().enumerate() {
            runs[i].push(run_arm_on(cfg, mode, s, &data)?);
        }
    }
    Ok(AblationResult {
        seeds: seeds.to_vec(),
        runs,
    })
}

/// Seeds for `ablate`: the config's list, else three seeds from the run seed.
pub fn ablation_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    match &cfg.ablation {
        Some(a) => a.seeds.clone(),
        None => (0..3).map(|i| cfg.seed + i).collect(),
    }
}
