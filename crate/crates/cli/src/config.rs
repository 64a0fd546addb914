//! Run configuration: TOML file, `--set` overrides, validation.

use std::path::{Path, PathBuf};

use octopus_core::datasets::{load_mnist, split, synth_content_style, GroupedDataset, SplitSpec, Splits, SynthConfig};
use octopus_core::downstream::{AdversaryConfig, ClassifierConfig, LatentEncoding};
use octopus_core::dvqae::{Architecture, DvqaeConfig, FineTuneConfig, FineTuneMode, LossWeights, TrainConfig};
use octopus_core::fedsim::{BaselineCosts, FedAvgConfig, PartitionLabel, PartitionScheme};
use octopus_core::CodebookConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "OCTOPUS_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    /// IDX image/label pair, optionally gzipped; `limit` keeps the first samples.
    Mnist {
        images: Option<PathBuf>,
        labels: Option<PathBuf>,
        limit: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    #[default]
    Conv,
    Mlp,
}

/// Model hyperparameters. The latent grid follows from the input shape for
/// the conv architecture; `H`/`W`, when given, must agree with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub architecture: ArchKind,
    pub hidden: usize,
    #[serde(rename = "H")]
    pub h: Option<usize>,
    #[serde(rename = "W")]
    pub w: Option<usize>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub n_c: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub ema_decay: f64,
    pub in_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let w = LossWeights::default();
        let cb = CodebookConfig::new(10, 64);
        ModelSpec {
            architecture: ArchKind::Conv,
            hidden: 16,
            h: None,
            w: None,
            m: 64,
            k: 10,
            g: 1,
            n_c: 1,
            alpha: w.alpha,
            beta: w.beta,
            lambda: w.lambda,
            ema_decay: cb.ema_decay,
            in_eps: octopus_core::dvqae::DEFAULT_IN_EPS,
        }
    }
}

impl ModelSpec {
    /// Full model configuration for samples of `input` shape.
    pub fn build(&self, input: &[usize]) -> Result<DvqaeConfig, CliError> {
        let architecture = match self.architecture {
            ArchKind::Conv => {
                let &[channels, height, width] = input else {
                    return Err(CliError::config("model.architecture", format!("conv needs [C, H, W] samples, got {input:?}")));
                };
                for (key, given, derived) in [("model.H", self.h, height / 4), ("model.W", self.w, width / 4)] {
                    if given.is_some_and(|g| g != derived) {
                        return Err(CliError::config(key, format!("conv grid is input / 4 = {derived}")));
                    }
                }
                Architecture::Conv { channels, height, width, hidden: self.hidden }
            }
            ArchKind::Mlp => Architecture::Mlp {
                inputs: input.iter().product(),
                hidden: self.hidden,
                grid_height: self.h.unwrap_or(1),
                grid_width: self.w.unwrap_or(1),
            },
        };
        let codebook = CodebookConfig::new(self.k, self.m).with_groups(self.g).with_slices(self.n_c).with_decay(self.ema_decay);
        let cfg = DvqaeConfig {
            architecture,
            codebook,
            weights: LossWeights { alpha: self.alpha, beta: self.beta, lambda: self.lambda },
            in_eps: self.in_eps,
        };
        cfg.validate().map_err(|e| CliError::config("model", e.to_string()))?;
        cfg.architecture.layer_specs(self.m).map_err(|e| CliError::config("model", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneSpec {
    pub mode: FineTuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FineTuneSpec {
    fn default() -> Self {
        let f = FineTuneConfig::default();
        FineTuneSpec { mode: FineTuneMode::Both, epochs: f.epochs, batch_size: f.batch_size, lr: f.lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSpec {
    pub nodes: usize,
    pub partition: PartitionScheme,
    pub partition_label: PartitionLabel,
    pub sync_period: usize,
    pub download_model: bool,
    pub baseline_costs: BaselineCosts,
    /// Write every message payload under `<out>/messages`.
    pub dump_messages: bool,
    /// Also run the FedAvg baseline on the same node data.
    pub fedavg: Option<FedAvgConfig>,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        SimulateSpec {
            nodes: 4,
            partition: PartitionScheme::Iid,
            partition_label: PartitionLabel::Private,
            sync_period: 1,
            download_model: true,
            baseline_costs: BaselineCosts::default(),
            dump_messages: false,
            fedavg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub classifier: ClassifierConfig,
    pub encoding: LatentEncoding,
    /// Train the raw-data centralized baseline alongside.
    pub raw_baseline: bool,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        DownstreamSpec { classifier: ClassifierConfig::default(), encoding: LatentEncoding::AtomLookup, raw_baseline: true }
    }
}

/// Values of every cost parameter; the report covers their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSweep {
    pub n_c: Vec<f64>,
    pub n_m: Vec<f64>,
    pub n_d: Vec<f64>,
    pub n_e: Vec<f64>,
    pub n_z: Vec<f64>,
    pub n_s: Vec<f64>,
    pub eta: Vec<f64>,
    pub pi: Vec<f64>,
    pub n_b: Vec<f64>,
    pub n_a: Vec<f64>,
}

impl Default for CostSweep {
    fn default() -> Self {
        CostSweep {
            n_c: vec![10.0, 100.0],
            n_m: vec![1e6],
            n_d: vec![6e4],
            n_e: vec![100.0],
            n_z: vec![66.0],
            n_s: vec![4096.0],
            eta: vec![0.5],
            pi: vec![0.0, 10.0],
            n_b: vec![5.2e3],
            n_a: vec![1e5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Model file read by fine-tune, simulate, train-downstream and
    /// eval-privacy; defaults to `<out>/model.octm`.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Mixed into every seed below.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub fine_tune: FineTuneSpec,
    pub simulate: SimulateSpec,
    pub downstream: DownstreamSpec,
    pub privacy: AdversaryConfig,
    pub cost: CostSweep,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            fine_tune: FineTuneSpec::default(),
            simulate: SimulateSpec::default(),
            downstream: DownstreamSpec::default(),
            privacy: AdversaryConfig::default(),
            cost: CostSweep::default(),
            paths: Paths::default(),
        }
    }
}

/// Parses `a.b.c=value`; the value is read as TOML and falls back to a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::config(s, "override must look like key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = t.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(&path[..=i].join("."), "is not a table"))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `file` (if any), applies overrides, rejects unknown keys and
    /// validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::config("--config", e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        if let Some(toml::Value::Table(d)) = table.get_mut("dataset") {
            d.entry("kind").or_insert_with(|| toml::Value::String("synthetic".into()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match &self.dataset {
            DatasetSpec::Synthetic(config) => {
                if config.content_classes == 0 || config.style_classes == 0 || config.samples_per_cell == 0 {
                    return Err(CliError::config("dataset", "class counts and samples_per_cell must be >= 1"));
                }
            }
            DatasetSpec::Mnist { images, labels, limit } => {
                for (key, p) in [("dataset.images", images), ("dataset.labels", labels)] {
                    let p = p.as_ref().ok_or_else(|| CliError::config(key, "missing dataset path"))?;
                    if !p.exists() {
                        return Err(CliError::config(key, format!("{} does not exist", p.display())));
                    }
                }
                if *limit == Some(0) {
                    return Err(CliError::config("dataset.limit", "must be >= 1"));
                }
            }
        }
        let m = &self.model;
        if m.k == 0 || m.m == 0 || m.g == 0 || m.n_c == 0 || m.hidden == 0 {
            return Err(CliError::config("model", "K, M, G, n_c and hidden must be >= 1"));
        }
        CodebookConfig::new(m.k, m.m)
            .with_groups(m.g)
            .with_slices(m.n_c)
            .with_decay(m.ema_decay)
            .validate()
            .map_err(|e| CliError::config("model", e.to_string()))?;
        self.train.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        if self.fine_tune.batch_size == 0 || !(self.fine_tune.lr > 0.0) {
            return Err(CliError::config("fine_tune", "batch_size must be >= 1 and lr > 0"));
        }
        if self.simulate.nodes == 0 {
            return Err(CliError::config("simulate.nodes", "must be >= 1"));
        }
        if let PartitionScheme::NoniidModerate { fraction } = self.simulate.partition {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(CliError::config("simulate.partition.fraction", "must lie in [0, 1]"));
            }
        }
        if let Some(f) = &self.simulate.fedavg {
            f.validate().map_err(|e| CliError::config("simulate.fedavg", e.to_string()))?;
        }
        self.downstream.classifier.validate().map_err(|e| CliError::config("downstream.classifier", e.to_string()))?;
        self.privacy.classifier.validate().map_err(|e| CliError::config("privacy.classifier", e.to_string()))?;
        if !(self.privacy.test_fraction > 0.0 && self.privacy.test_fraction < 1.0) {
            return Err(CliError::config("privacy.test_fraction", "must lie in (0, 1)"));
        }
        for (key, values) in self.cost.fields() {
            if values.is_empty() {
                return Err(CliError::config(&format!("cost.{key}"), "needs at least one value"));
            }
            if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(CliError::config(&format!("cost.{key}"), format!("{v} is not a finite non-negative number")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed ^ self.train.seed, ..self.train }
    }

    pub fn fine_tune_config(&self) -> FineTuneConfig {
        let f = &self.fine_tune;
        FineTuneConfig { epochs: f.epochs, batch_size: f.batch_size, lr: f.lr, seed: self.seed ^ 0xf1e7 }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let c = &self.downstream.classifier;
        ClassifierConfig { seed: self.seed ^ c.seed, ..c.clone() }
    }

    pub fn adversary_config(&self) -> AdversaryConfig {
        let mut a = self.privacy.clone();
        a.classifier.seed ^= self.seed;
        a
    }

    pub fn load_dataset(&self) -> Result<GroupedDataset, CliError> {
        match &self.dataset {
            DatasetSpec::Synthetic(config) => {
                Ok(synth_content_style(&SynthConfig { seed: self.seed ^ config.seed, ..*config })?)
            }
            DatasetSpec::Mnist { images, labels, limit } => {
                let (Some(images), Some(labels)) = (images, labels) else {
                    return Err(CliError::config("dataset", "missing dataset path"));
                };
                let data = load_mnist(images, labels)?;
                match limit {
                    Some(n) if *n < data.len() => Ok(data.subset(&(0..*n).collect::<Vec<_>>())?),
                    _ => Ok(data),
                }
            }
        }
    }

    pub fn splits(&self) -> Result<Splits, CliError> {
        Ok(split(&self.load_dataset()?, &self.split, self.seed)?)
    }
}

impl CostSweep {
    pub fn fields(&self) -> [(&'static str, &[f64]); 10] {
        [
            ("n_c", &self.n_c),
            ("n_m", &self.n_m),
            ("n_d", &self.n_d),
            ("n_e", &self.n_e),
            ("n_z", &self.n_z),
            ("n_s", &self.n_s),
            ("eta", &self.eta),
            ("pi", &self.pi),
            ("n_b", &self.n_b),
            ("n_a", &self.n_a),
        ]
    }
}
