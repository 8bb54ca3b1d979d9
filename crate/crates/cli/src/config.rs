use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scsi_core::experiments::RestorationConfig;
use scsi_core::nn::Activation;
use scsi_core::{ChannelSpec, Schedule, TrainConfig, TransportConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Clean data source for a restoration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    TwoMoon {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_eval")]
        n_eval: usize,
    },
    /// Clean points, one per row; the first `n_train` are corrupted for
    /// training and the next `n_eval` for evaluation.
    Csv {
        path: PathBuf,
        n_train: usize,
        n_eval: usize,
    },
}

fn default_n_train() -> usize {
    10_000
}

fn default_n_eval() -> usize {
    2000
}

impl DataSpec {
    pub fn sizes(&self) -> (usize, usize) {
        match self {
            DataSpec::TwoMoon { n_train, n_eval } | DataSpec::Csv { n_train, n_eval, .. } => (*n_train, *n_eval),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], activation: Activation::Gelu }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate W2 on the held-out split every this many outer iterations.
    pub every: usize,
}

/// An experiment file as written by the user. Sections are optional here so
/// that a missing one can be reported by name.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    data: Option<DataSpec>,
    schedule: Option<Schedule>,
    channel: Option<ChannelSpec>,
    transport: Option<TransportConfig>,
    train: Option<TrainConfig>,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub data: DataSpec,
    pub schedule: Schedule,
    pub channel: ChannelSpec,
    pub transport: TransportConfig,
    pub train: TrainConfig,
    pub model: ModelSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        fn need<T>(v: Option<T>, section: &str) -> Result<T> {
            v.with_context(|| format!("missing required section [{section}]"))
        }
        let cfg = Self {
            name: raw.name.unwrap_or_else(|| "experiment".into()),
            seed: raw.seed,
            output: raw.output,
            data: need(raw.data, "data")?,
            schedule: need(raw.schedule, "schedule")?,
            channel: need(raw.channel, "channel")?,
            transport: need(raw.transport, "transport")?,
            train: need(raw.train, "train")?,
            model: raw.model,
            eval: raw.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.transport.validate()?;
        self.train.validate()?;
        let (n_train, n_eval) = self.data.sizes();
        if n_train == 0 || n_eval == 0 {
            bail!("data.n_train and data.n_eval must be positive");
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            bail!("model.hidden must list positive widths");
        }
        Ok(())
    }

    pub fn restoration(&self) -> RestorationConfig {
        let (n_train, n_eval) = self.data.sizes();
        RestorationConfig {
            n_train,
            n_eval,
            channel: self.channel.clone(),
            schedule: self.schedule,
            transport: self.transport,
            train: self.train.clone(),
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            eval_every: self.eval.every,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Hex SHA-256 of `blob <len>\0<bytes>`, the way git names file contents.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
