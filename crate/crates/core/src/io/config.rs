//! Experiment configuration files (TOML).
//!
//! ```toml
//! name = "tr-sign-c"
//! seed = 1
//! output_dir = "runs/tr-sign-c"
//!
//! [model]
//! input = [1, 8, 8]
//! layers = [
//!   { kind = "conv2d", kernel_h = 3, kernel_w = 3, in_channels = 1, out_channels = 16, padding = 1 },
//!   { kind = "batch_norm", channels = 16 },
//!   { kind = "relu" },
//!   ...
//! ]
//!
//! [train]
//! epochs = 20
//! projection = "sign"
//! clip = { enabled = true, global_factor = 0.5 }
//!
//! [eval]
//! specs = ["none", "sign", "round"]
//!
//! [data]
//! source = "synthetic"
//! kind = "stripes"
//! classes = 4
//! train = 2000
//! test = 1000
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::cifar::{apply_whitening, load_cifar10_dir};
use super::dataset::{gcn_normalize, Dataset, Split};
use super::report::{config_hash, Provenance};
use super::synthetic::{synthetic_dataset, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::SweepSpec;
use crate::nn::{chain_shapes, LayerSpec, Network};
use crate::projections::ProjectionSpec;
use crate::trainer::{ClipPolicy, TrainConfig};

/// Named setups: `tr-<projection>-<c|nc>` on the synthetic toy task. Each
/// also exists as `cifar-tr-...` on CIFAR-10.
pub const PRESETS: [&str; 7] = [
    "tr-none-nc",
    "tr-none-c",
    "tr-sign-c",
    "tr-stoch-c",
    "tr-power-c",
    "tr-stochm-c",
    "tr-stochm3-c",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-sample input shape `[C, H, W]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn default_specs() -> Vec<ProjectionSpec> {
    vec![
        ProjectionSpec::None,
        ProjectionSpec::Sign,
        ProjectionSpec::Round,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_specs")]
    pub specs: Vec<ProjectionSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            specs: default_specs(),
        }
    }
}

fn default_size() -> usize {
    8
}
fn default_channels() -> usize {
    1
}
fn default_period() -> f64 {
    4.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        kind: SyntheticKind,
        classes: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_period")]
        period: f64,
        /// Dataset seed, independent of the model seed.
        #[serde(default)]
        seed: u64,
        train: usize,
        test: usize,
        #[serde(default)]
        gcn: bool,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default = "yes")]
        gcn: bool,
        /// Raw little-endian `f64` 3072×3072 matrix applied after GCN.
        #[serde(default)]
        whitening: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

const GCN_EPS: f64 = 1e-8;

impl DataConfig {
    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic {
                kind,
                classes,
                size,
                channels,
                noise,
                period,
                seed,
                train,
                test,
                gcn,
            } => {
                let spec = SyntheticSpec {
                    kind: *kind,
                    classes: *classes,
                    size: *size,
                    channels: *channels,
                    noise: *noise,
                    period: *period,
                    seed: *seed,
                };
                let tr = synthetic_dataset(&spec, *train, Split::Train)?;
                let te = synthetic_dataset(&spec, *test, Split::Test)?;
                Ok(if *gcn {
                    (gcn_normalize(&tr, GCN_EPS), gcn_normalize(&te, GCN_EPS))
                } else {
                    (tr, te)
                })
            }
            DataConfig::Cifar10 {
                dir,
                gcn,
                whitening,
                train_limit,
                test_limit,
            } => {
                let mut tr = load_cifar10_dir(dir, Split::Train)?;
                let mut te = load_cifar10_dir(dir, Split::Test)?;
                if let Some(n) = train_limit {
                    tr = tr.head(*n);
                }
                if let Some(n) = test_limit {
                    te = te.head(*n);
                }
                if *gcn {
                    tr = gcn_normalize(&tr, GCN_EPS);
                    te = gcn_normalize(&te, GCN_EPS);
                }
                if let Some(m) = whitening {
                    tr = apply_whitening(&tr, m)?;
                    te = apply_whitening(&te, m)?;
                }
                Ok((tr, te))
            }
        }
    }

    fn sample_shape(&self) -> (Vec<usize>, usize) {
        match self {
            DataConfig::Synthetic {
                size,
                channels,
                classes,
                ..
            } => (vec![*channels, *size, *size], *classes),
            DataConfig::Cifar10 { .. } => (vec![3, 32, 32], 10),
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Write an intermediate checkpoint every this many epochs; 0 writes
    /// only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub sweep: Vec<SweepSpec>,
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    Err(Error::config("empty override key"))
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parses and validates config text. Errors name the offending line and key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Like [`Self::from_toml_str`], then applies `key.path=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if !overrides.is_empty() {
            let mut table: toml::Table =
                toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
            for (k, v) in overrides {
                set_path(&mut table, k, override_value(v))?;
            }
            cfg = table
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(format!("after overrides: {e}")))?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.hash(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = chain_shapes(&self.model.input, &self.model.layers)?;
        let out = shapes.last().expect("non-empty");
        let (sample, classes) = self.data.sample_shape();
        if self.model.input != sample {
            return Err(Error::config(format!(
                "model input {:?} does not match data samples {:?}",
                self.model.input, sample
            )));
        }
        if out != &vec![classes] {
            return Err(Error::config(format!(
                "model output {out:?} does not match {classes} classes"
            )));
        }
        self.train.validate()?;
        for s in &self.eval.specs {
            s.validate().map_err(|e| Error::config(e.to_string()))?;
        }
        for s in &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    /// Training config with the experiment seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn init_network(&self) -> Result<Network> {
        Network::init(&self.model.input, self.model.layers.clone(), self.seed)
    }

    /// A named setup; see [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let (cifar, base) = match name.strip_prefix("cifar-") {
            Some(rest) => (true, rest),
            None => (false, name),
        };
        let (projection, clip) = match base {
            "tr-none-nc" => (ProjectionSpec::None, false),
            "tr-none-c" => (ProjectionSpec::None, true),
            "tr-sign-c" => (ProjectionSpec::Sign, true),
            "tr-stoch-c" => (ProjectionSpec::Stoch, true),
            "tr-power-c" => (ProjectionSpec::PowerSampled, true),
            "tr-stochm-c" => (ProjectionSpec::StochM { gamma: 0.5 }, true),
            "tr-stochm3-c" => (ProjectionSpec::StochM3 { gamma: 0.5 }, true),
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}`; known: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let clip = if clip {
            ClipPolicy::default()
        } else {
            ClipPolicy::disabled()
        };
        let cfg = if cifar {
            Self {
                name: name.to_string(),
                seed: 1,
                output_dir: PathBuf::from("runs").join(name),
                checkpoint_every: 10,
                model: ModelConfig {
                    input: vec![3, 32, 32],
                    layers: cifar_layers(),
                },
                train: TrainConfig {
                    epochs: 500,
                    projection,
                    clip,
                    seed: 1,
                    ..TrainConfig::default()
                },
                eval: EvalConfig::default(),
                data: DataConfig::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                    gcn: true,
                    whitening: None,
                    train_limit: None,
                    test_limit: None,
                },
                sweep: Vec::new(),
            }
        } else {
            Self {
                name: name.to_string(),
                seed: 1,
                output_dir: PathBuf::from("runs").join(name),
                checkpoint_every: 0,
                model: ModelConfig {
                    input: vec![1, 8, 8],
                    layers: toy_layers(4),
                },
                train: TrainConfig {
                    epochs: 15,
                    projection,
                    clip,
                    seed: 1,
                    ..TrainConfig::default()
                },
                eval: EvalConfig::default(),
                data: DataConfig::Synthetic {
                    kind: SyntheticKind::Stripes,
                    classes: 4,
                    size: 8,
                    channels: 1,
                    noise: 1.2,
                    period: 4.0,
                    seed: 0,
                    train: 2000,
                    test: 1000,
                    gcn: false,
                },
                sweep: Vec::new(),
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Conv-BN-ReLU stack for 1×8×8 inputs ending in a batch-normed dense layer.
pub fn toy_layers(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 1, 8, 1, 1),
        LayerSpec::batch_norm(8),
        LayerSpec::Relu,
        LayerSpec::conv(3, 8, 16, 2, 1),
        LayerSpec::batch_norm(16),
        LayerSpec::Relu,
        LayerSpec::conv(3, 16, 16, 2, 1),
        LayerSpec::batch_norm(16),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::dense(16 * 2 * 2, classes),
        LayerSpec::batch_norm(classes),
    ]
}

/// Six strided 3×3 convolutions and two dense layers for 3×32×32 inputs.
pub fn cifar_layers() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let widths = [
        (3, 128, 1),
        (128, 128, 2),
        (128, 256, 1),
        (256, 256, 2),
        (256, 512, 1),
        (512, 512, 2),
    ];
    for (i, o, s) in widths {
        layers.extend([
            LayerSpec::conv(3, i, o, s, 1),
            LayerSpec::batch_norm(o),
            LayerSpec::Relu,
        ]);
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(512 * 4 * 4, 1024),
        LayerSpec::batch_norm(1024),
        LayerSpec::Relu,
        LayerSpec::dense(1024, 10),
        LayerSpec::batch_norm(10),
    ]);
    layers
}
