//! Run configuration plumbing: a JSON config file plus per-key flag
//! overrides, and the reproducibility stamp written next to artifacts.
//!
//! Precedence (lowest to highest): built-in defaults, the config file named
//! by `--config` or `$HODGEFORMER_CONFIG`, explicit command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use hodgeformer::model::config::{LayerConfig, ModelConfig, Precision, TaskKind};
use hodgeformer::nn::Element;
use hodgeformer::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Model and run settings. Every config key has a matching flag; unset flags
/// keep the file (or default) value.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file mirroring the keys below; unknown keys are rejected.
    /// Falls back to $HODGEFORMER_CONFIG when the flag is absent.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Latent width shared by all element streams [key: d, default: 256]
    #[arg(long)]
    pub d: Option<usize>,

    /// Attention heads per operator [key: heads, default: 4]
    #[arg(long)]
    pub heads: Option<usize>,

    /// MLP hidden width [key: d_hidden, default: 512]
    #[arg(long = "d-hidden")]
    pub d_hidden: Option<usize>,

    /// Element streams to embed, comma list of v,e,f
    /// [key: elements, default: v,e]
    #[arg(long, value_delimiter = ',')]
    pub elements: Option<Vec<Element>>,

    /// Layer stack as JSON, e.g. '[{"kind":"hodge","updates":["v"]}]'
    /// [key: layers, default: 6 hodge + 2 vanilla, all updating v]
    #[arg(long, value_name = "JSON")]
    pub layers: Option<String>,

    /// classification | segmentation [key: task, default: classification]
    #[arg(long)]
    pub task: Option<TaskArg>,

    /// Number of output classes [key: num_classes, default: 3]
    #[arg(long = "num-classes")]
    pub num_classes: Option<usize>,

    /// Element stream pooled by the classification head (v, e, or f)
    /// [key: pool_element, default: v]
    #[arg(long = "pool-element")]
    pub pool_element: Option<Element>,

    /// Label smoothing in [0, 1) [key: label_smoothing, default: 0.2]
    #[arg(long = "label-smoothing")]
    pub label_smoothing: Option<f64>,

    /// Weight classes by inverse frequency [key: class_weighting,
    /// default: true]
    #[arg(long = "class-weighting", value_name = "BOOL")]
    pub class_weighting: Option<bool>,

    /// Dropout probability [key: dropout, default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,

    /// Peak cosine learning rate [key: lr_max, default: 5e-4]
    #[arg(long = "lr-max")]
    pub lr_max: Option<f64>,

    /// Final cosine learning rate [key: lr_min, default: 1e-6]
    #[arg(long = "lr-min")]
    pub lr_min: Option<f64>,

    /// Training epochs [key: epochs, default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Meshes per optimizer step [key: batch_size, default: 8]
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,

    /// Master seed for init, shuffling, augmentation, patterns, dropout
    /// [key: seed, default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// f32 | f64 [key: precision, default: f32]
    #[arg(long)]
    pub precision: Option<PrecisionArg>,

    /// Random rotation + jitter per epoch [key: augment, default: true]
    #[arg(long, value_name = "BOOL")]
    pub augment: Option<bool>,

    /// Redraw attention patterns every epoch [key: resample_patterns,
    /// default: true]
    #[arg(long = "resample-patterns", value_name = "BOOL")]
    pub resample_patterns: Option<bool>,

    /// Stop once train accuracy reaches this value
    /// [key: early_stop_train_acc, default: unset]
    #[arg(long = "early-stop-train-acc")]
    pub early_stop_train_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TaskArg {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl ConfigArgs {
    fn config_path(&self) -> Option<PathBuf> {
        self.config
            .clone()
            .or_else(|| std::env::var_os("HODGEFORMER_CONFIG").map(PathBuf::from))
    }

    /// Resolves defaults, file, and flags into a validated [`ModelConfig`].
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match self.config_path() {
            Some(path) => {
                let text = fs::read_to_string(&path).map_err(|e| {
                    Error::Config(format!("{}: {e}", path.display()))
                })?;
                ModelConfig::from_json(&text)?
            }
            None => ModelConfig::default(),
        };
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.d_hidden {
            cfg.d_hidden = v;
        }
        if let Some(v) = &self.elements {
            cfg.elements = v.clone();
        }
        if let Some(text) = &self.layers {
            cfg.layers = serde_json::from_str::<Vec<LayerConfig>>(text)
                .map_err(|e| Error::Config(format!("layers: {e}")))?;
        }
        if let Some(v) = self.task {
            cfg.task = match v {
                TaskArg::Classification => TaskKind::Classification,
                TaskArg::Segmentation => TaskKind::Segmentation,
            };
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        if let Some(v) = self.pool_element {
            cfg.pool_element = v;
        }
        if let Some(v) = self.label_smoothing {
            cfg.label_smoothing = v;
        }
        if let Some(v) = self.class_weighting {
            cfg.class_weighting = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.lr_max {
            cfg.lr_max = v;
        }
        if let Some(v) = self.lr_min {
            cfg.lr_min = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.precision {
            cfg.precision = match v {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(v) = self.augment {
            cfg.augment = v;
        }
        if let Some(v) = self.resample_patterns {
            cfg.resample_patterns = v;
        }
        if let Some(v) = self.early_stop_train_acc {
            cfg.early_stop_train_acc = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Stamp {
    config_hash: String,
    seed: u64,
    version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn version_string() -> String {
    match option_env!("GIT_COMMIT") {
        Some(commit) => format!("{}+{}", env!("CARGO_PKG_VERSION"), commit),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Writes `stamp.json` into `dir`: the sha256 of the run's effective config,
/// the seed, and the build version. Contains no timestamps, so reruns with
/// the same inputs produce identical stamps.
pub fn write_stamp<S: Serialize>(dir: &Path, config: &S, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let canonical = serde_json::to_string(config)?;
    let stamp = Stamp {
        config_hash: sha256_hex(canonical.as_bytes()),
        seed,
        version: version_string(),
    };
    let mut text = serde_json::to_string_pretty(&stamp)?;
    text.push('\n');
    fs::write(dir.join("stamp.json"), text)?;
    Ok(())
}
