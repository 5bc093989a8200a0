use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use snake_core::dataset::{IngestConfig, ShapeFamily, SynthConfig};
use snake_core::inference::InferenceConfig;
use snake_core::predictor::{Architecture, ConvNetConfig, InitConfig, MapModes, PredictorConfig};
use snake_core::ssvm::OptimizerKind;
use snake_core::train::{TrainConfig, UpdateRule};

/// Output root for relative output paths.
pub const OUT_ROOT_ENV: &str = "SNAKE_OUT_ROOT";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Every setting of a run; stored next to its outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    /// `synth.n` is replaced by `train + test`.
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    /// Test share of ingested instances.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 200,
            test: 100,
            synth: SynthConfig {
                n: 300,
                ..Default::default()
            },
            ingest: IngestConfig::default(),
            test_fraction: 0.405,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    #[default]
    ConvNet,
    DirectGrid,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: ArchKind,
    pub convnet: ConvNetConfig,
    pub modes: MapModes,
    pub init: InitConfig,
}

impl ModelConfig {
    /// Predictor layout for patches of the given shape; DirectGrid gets one
    /// grid per training instance.
    pub fn predictor(&self, width: usize, height: usize, channels: usize, n_train: usize) -> PredictorConfig {
        PredictorConfig {
            width,
            height,
            channels,
            architecture: match self.architecture {
                ArchKind::ConvNet => Architecture::ConvNet(self.convnet.clone()),
                ArchKind::DirectGrid => Architecture::DirectGrid { instances: n_train },
            },
            modes: self.modes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Command-line overrides shared by every verb.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON run config; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data, initialisation and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Contour nodes L.
    #[arg(long, global = true)]
    pub nodes: Option<usize>,
    /// Patch side in pixels.
    #[arg(long, global = true)]
    pub size: Option<usize>,
    #[arg(long, global = true)]
    pub n_train: Option<usize>,
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    /// Shape family (axis-rect, rotated-rect, l-shape); repeatable.
    #[arg(long = "shape", global = true, value_parser = parse_kebab::<ShapeFamily>)]
    pub shapes: Vec<ShapeFamily>,
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    /// ACM iterations for training and inference.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Hinge weight C.
    #[arg(long = "c", global = true)]
    pub c: Option<f64>,
    #[arg(long, global = true)]
    pub c_delta: Option<f64>,
    /// Weight decay λ.
    #[arg(long, global = true)]
    pub l2: Option<f64>,
    /// adam or sgd.
    #[arg(long, global = true, value_parser = parse_kebab::<OptimizerKind>)]
    pub optimizer: Option<OptimizerKind>,
    /// hinge or always.
    #[arg(long, global = true, value_parser = parse_kebab::<UpdateRule>)]
    pub update: Option<UpdateRule>,
    #[arg(long, global = true)]
    pub augment: Option<bool>,
    /// conv-net or direct-grid.
    #[arg(long, global = true, value_parser = parse_kebab::<ArchKind>)]
    pub arch: Option<ArchKind>,
    #[arg(long, global = true)]
    pub alpha_local: Option<bool>,
    #[arg(long, global = true)]
    pub beta_local: Option<bool>,
    #[arg(long, global = true)]
    pub kappa_local: Option<bool>,
    #[arg(long, global = true)]
    pub no_kappa: Option<bool>,
}

impl Overrides {
    /// Loads `--config` (or the defaults) and applies every given flag.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.data.synth.n = cfg.data.train + cfg.data.test;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.data.synth.seed = s;
            cfg.model.init.seed = s;
            cfg.train.seed = s;
        }
        if let Some(n) = self.nodes {
            cfg.data.synth.nodes = n;
            cfg.data.ingest.nodes = n;
        }
        if let Some(n) = self.size {
            cfg.data.synth.size = n;
            cfg.data.ingest.size = n;
        }
        set(&mut cfg.data.train, self.n_train);
        set(&mut cfg.data.test, self.n_test);
        if !self.shapes.is_empty() {
            cfg.data.synth.shapes = self.shapes.clone();
        }
        set(&mut cfg.data.synth.noise_sigma, self.noise);
        if let Some(n) = self.iterations {
            cfg.train.inference.iterations = n;
            cfg.infer.iterations = n;
        }
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        if self.max_steps.is_some() {
            cfg.train.max_steps = self.max_steps;
        }
        set(&mut cfg.train.optimizer.lr, self.lr);
        set(&mut cfg.train.c, self.c);
        set(&mut cfg.train.c_delta, self.c_delta);
        set(&mut cfg.train.optimizer.l2, self.l2);
        set(&mut cfg.train.optimizer.kind, self.optimizer);
        set(&mut cfg.train.update, self.update);
        set(&mut cfg.train.augment, self.augment);
        set(&mut cfg.model.architecture, self.arch);
        set(&mut cfg.model.modes.alpha_local, self.alpha_local);
        set(&mut cfg.model.modes.beta_local, self.beta_local);
        set(&mut cfg.model.modes.kappa_local, self.kappa_local);
        set(&mut cfg.model.modes.no_kappa, self.no_kappa);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(RUN_CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Relative output paths live under `$SNAKE_OUT_ROOT` when it is set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Creates the output directory. An existing non-empty directory is an
/// error unless `force` is set, in which case files are overwritten.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("{} already exists; pass --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
