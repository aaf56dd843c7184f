//! Run configuration: defaults, optional TOML file, CLI-flag overrides,
//! in that precedence order (flags win).

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use phsa_core::attention::VariantId;
use phsa_core::encoder::EncoderConfig;
use phsa_core::phoneme::DatasetConfig;
use phsa_core::trainer::{ClassifierConfig, TrainConfig};

use crate::error::{CliError, CliResult};

pub const OUT_ROOT_ENV: &str = "PHSA_OUT_ROOT";

/// Everything a run needs. Serialized next to generated artifacts so any
/// run can be reproduced from its config file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: String,
    /// Held-out utterances generated after the training split.
    pub dev_utterances: usize,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: "out".to_string(),
            dev_utterances: 60,
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            d_in: self.dataset.d_in,
            num_classes: self.dataset.inventory.num_classes,
            encoder: self.encoder.clone(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset
            .validate()
            .and_then(|_| self.encoder.validate())
            .and_then(|_| self.train.validate())
            .map_err(CliError::from)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Flags shared by the data/model/train subcommands. Every field overrides
/// the corresponding config entry.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML config file (defaults come first, then this file, then flags)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Score variant: M1..M4 select the variant for all (upper) layers,
    /// M5 makes the whole stack phonetic unless --phsa-layers narrows it
    #[arg(long)]
    pub variant: Option<String>,
    /// How many lower layers run the phonetic variant
    #[arg(long)]
    pub phsa_layers: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Disable the absolute positional encoding entirely
    #[arg(long)]
    pub no_pe: bool,
    /// Disable 1/sqrt(d_h) score scaling
    #[arg(long)]
    pub no_scale: bool,

    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model-init and training seed (dataset seed is --data-seed)
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub dev_utterances: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub t_min: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
}

impl Overrides {
    /// defaults -> config file -> flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut run)?;
        run.validate()?;
        Ok(run)
    }

    fn apply(&self, run: &mut RunConfig) -> CliResult<()> {
        if let Some(n) = self.layers {
            run.encoder.num_layers = n;
            run.encoder.num_phsa_layers = run.encoder.num_phsa_layers.min(n);
        }
        if let Some(n) = self.heads {
            run.encoder.num_heads = n;
        }
        if let Some(n) = self.d_model {
            run.encoder.d_model = n;
        }
        if let Some(n) = self.d_h {
            run.encoder.d_h = n;
        } else if self.d_model.is_some() || self.heads.is_some() {
            if run.encoder.num_heads == 0 || run.encoder.d_model % run.encoder.num_heads != 0 {
                return Err(CliError::Usage(format!(
                    "d_model {} not divisible by {} heads; pass --d-h",
                    run.encoder.d_model, run.encoder.num_heads
                )));
            }
            run.encoder.d_h = run.encoder.d_model / run.encoder.num_heads;
        }
        if let Some(n) = self.ffn_dim {
            run.encoder.ffn_dim = n;
        }

        if let Some(variant) = &self.variant {
            let variant: VariantId = variant.parse()?;
            if variant == VariantId::M5 {
                run.encoder.num_phsa_layers = run.encoder.num_layers;
            } else {
                run.encoder.variant_for_upper = variant;
                run.encoder.num_phsa_layers = 0;
            }
        }
        if let Some(n) = self.phsa_layers {
            run.encoder.num_phsa_layers = n;
        }
        if self.no_pe {
            run.encoder.use_abs_pe = false;
        }
        if self.no_scale {
            run.encoder.scale_scores = false;
        }

        if let Some(v) = self.lr {
            run.train.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            run.train.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            run.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            run.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            run.train.seed = v;
            run.encoder.seed = v;
        }

        if let Some(v) = self.utterances {
            run.dataset.n_utterances = v;
        }
        if let Some(v) = self.dev_utterances {
            run.dev_utterances = v;
        }
        if let Some(v) = self.data_seed {
            run.dataset.seed = v;
        }
        if let Some(v) = self.t_min {
            run.dataset.t_min = v;
        }
        if let Some(v) = self.t_max {
            run.dataset.t_max = v;
        }
        if let Some(v) = self.d_in {
            run.dataset.d_in = v;
        }
        if let Some(v) = self.classes {
            run.dataset.inventory.num_classes = v;
        }
        Ok(())
    }
}

/// Resolves an output directory against `PHSA_OUT_ROOT` when relative.
pub fn resolve_out_dir(dir: &str) -> PathBuf {
    let path = PathBuf::from(dir);
    if path.is_absolute() {
        return path;
    }
    match std::env::var(OUT_ROOT_ENV) {
        Ok(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path,
    }
}
