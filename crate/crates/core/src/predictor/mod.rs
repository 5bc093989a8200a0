//! Energy map predictors and their model files.
//!
//! A predictor produces four raw channels per pixel which the heads turn
//! into [`EnergyMaps`]: `D` and `κ` pass through unchanged, `α` and `β` go
//! through softplus so the internal weights stay non-negative. [`MapModes`]
//! reduce a map to its spatial mean (broadcast back for `β` and `κ`) or
//! switch the balloon term off.

mod convnet;
mod store;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy::{Alpha, EnergyMaps};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::patch::Patch;
use crate::ssvm::MapGradients;

pub use convnet::{Activation, ConvNetConfig, PoolKind};
pub use store::{ParamStore, TensorSpec};

use convnet::{ConvCache, OUTPUTS};

const MAGIC: &[u8; 8] = b"SNAKEMDL";
const FORMAT_VERSION: u32 = 1;

/// Which maps vary per pixel. Non-local maps are the spatial mean of the
/// activated head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct MapModes {
    pub alpha_local: bool,
    pub beta_local: bool,
    pub kappa_local: bool,
    /// Forces `κ ≡ 0`.
    pub no_kappa: bool,
}

impl Default for MapModes {
    fn default() -> Self {
        MapModes {
            alpha_local: false,
            beta_local: true,
            kappa_local: true,
            no_kappa: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Free raw maps for each of `instances` training instances.
    DirectGrid { instances: usize },
    ConvNet(ConvNetConfig),
}

/// Everything that fixes the parameter layout and the forward function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub architecture: Architecture,
    #[serde(default)]
    pub modes: MapModes,
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 || self.channels == 0 {
            return Err(Error::Config(format!(
                "invalid patch shape {}x{}x{}",
                self.width, self.height, self.channels
            )));
        }
        match &self.architecture {
            Architecture::DirectGrid { instances } if *instances == 0 => {
                Err(Error::Config("direct grid needs at least one instance".into()))
            }
            Architecture::DirectGrid { .. } => Ok(()),
            Architecture::ConvNet(c) => c.validate(self.width, self.height),
        }
    }

    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match &self.architecture {
            Architecture::DirectGrid { instances } => vec![(
                "raw".into(),
                vec![*instances, OUTPUTS, self.height, self.width],
            )],
            Architecture::ConvNet(c) => c.tensor_shapes(self.channels),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

/// Initialisation settings; they do not affect the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub seed: u64,
    /// Initial raw value (bias) of the `D, α, β, κ` heads.
    pub head_bias: [f64; 4],
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            seed: 0,
            head_bias: [0.0, -3.0, -3.0, 0.0],
        }
    }
}

/// Gradient that is non-zero only on `offset..offset + values.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub offset: usize,
    pub values: Vec<f64>,
}

impl ParamGrad {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&g| g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    /// Dense vector of length `n`.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        out[self.offset..self.offset + self.values.len()].copy_from_slice(&self.values);
        out
    }

    /// `self += k·other`; the union of both ranges is kept.
    pub fn add_scaled(&mut self, other: &ParamGrad, k: f64) {
        if self.values.is_empty() {
            self.offset = other.offset;
        }
        let lo = self.offset.min(other.offset);
        let hi = (self.offset + self.values.len()).max(other.offset + other.values.len());
        if lo != self.offset || hi != self.offset + self.values.len() {
            let mut wide = vec![0.0; hi - lo];
            wide[self.offset - lo..self.offset - lo + self.values.len()].copy_from_slice(&self.values);
            self.values = wide;
            self.offset = lo;
        }
        let start = other.offset - self.offset;
        for (d, s) in self.values[start..].iter_mut().zip(&other.values) {
            *d += k * s;
        }
    }
}

/// Result of a forward pass, needed again by [`Predictor::backward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub maps: EnergyMaps,
    raw: Vec<f64>,
    instance: usize,
    cache: Option<Box<ConvCache>>,
}

impl Forward {
    /// Raw head outputs, `4 × V × U` in `D, α, β, κ` order.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    config: PredictorConfig,
    init: InitConfig,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: PredictorConfig,
    init: InitConfig,
    arch_hash: String,
    param_count: usize,
    tensors: Vec<TensorSpec>,
}

impl Predictor {
    /// Freshly initialised predictor. Convolution and hidden weights are
    /// uniform in `±sqrt(6 / fan_in)`, the output layer in
    /// `±0.1·sqrt(3 / fan_in)`, biases zero except for the heads.
    pub fn new(config: PredictorConfig, init: InitConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::zeros(&config.tensor_shapes());
        match &config.architecture {
            Architecture::DirectGrid { .. } => {
                let n = config.width * config.height;
                for (i, x) in params.as_mut_slice().iter_mut().enumerate() {
                    *x = init.head_bias[(i / n) % OUTPUTS] as f32;
                }
            }
            Architecture::ConvNet(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
                for spec in params.specs().to_vec() {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let bound = match spec.name.as_str() {
                        "head.w2" => 0.1 * (3.0 / fan_in as f64).sqrt(),
                        n if n.ends_with("weight") || n == "head.w1" => (6.0 / fan_in as f64).sqrt(),
                        _ => continue,
                    };
                    for x in &mut params.as_mut_slice()[spec.range()] {
                        *x = rng.random_range(-bound..bound) as f32;
                    }
                }
                let b2 = params.tensor_mut("head.b2").expect("head bias tensor");
                for (b, v) in b2.iter_mut().zip(init.head_bias) {
                    *b = v as f32;
                }
            }
        }
        Ok(Predictor {
            config,
            init,
            params,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn init_config(&self) -> &InitConfig {
        &self.init
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn ensure_compatible(&self, width: usize, height: usize, channels: usize) -> Result<()> {
        let c = &self.config;
        if (c.width, c.height, c.channels) != (width, height, channels) {
            return Err(Error::Model(format!(
                "model expects {}x{}x{} patches, got {width}x{height}x{channels}",
                c.width, c.height, c.channels
            )));
        }
        Ok(())
    }

    /// Maps for `patch`. DirectGrid ignores the patch and reads the raw
    /// grids of `instance`; the conv net ignores `instance`.
    pub fn forward(&self, patch: &Patch, instance: usize) -> Result<Forward> {
        let (raw, cache) = match &self.config.architecture {
            Architecture::DirectGrid { instances } => {
                if instance >= *instances {
                    return Err(Error::Shape(format!(
                        "instance {instance} out of range for {instances} direct grids"
                    )));
                }
                let len = OUTPUTS * self.config.width * self.config.height;
                let raw = self.params.as_slice()[instance * len..(instance + 1) * len]
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                (raw, None)
            }
            Architecture::ConvNet(cfg) => {
                self.ensure_compatible(patch.width(), patch.height(), patch.channels())?;
                let (raw, cache) = convnet::forward(cfg, &self.params, &self.params.to_f64(), patch);
                (raw, Some(Box::new(cache)))
            }
        };
        let maps = activate(&raw, self.config.width, self.config.height, self.config.modes);
        if !maps.is_finite() {
            return Err(Error::NonFinite("predicted energy maps".into()));
        }
        Ok(Forward {
            maps,
            raw,
            instance,
            cache,
        })
    }

    pub fn maps(&self, patch: &Patch, instance: usize) -> Result<EnergyMaps> {
        Ok(self.forward(patch, instance)?.maps)
    }

    /// Pulls `∂L/∂maps` back to the parameters.
    ///
    /// # Panics
    /// If the α gradient is per-pixel while the predictor's α is a scalar
    /// or vice versa.
    pub fn backward(&self, fwd: &Forward, grads: &MapGradients) -> ParamGrad {
        let (w, h) = (self.config.width, self.config.height);
        let draw = head_backward(&fwd.raw, w, h, self.config.modes, grads);
        match &self.config.architecture {
            Architecture::DirectGrid { .. } => ParamGrad {
                offset: fwd.instance * draw.len(),
                values: draw,
            },
            Architecture::ConvNet(cfg) => {
                let cache = fwd.cache.as_ref().expect("conv net forward keeps a cache");
                let values = convnet::backward(
                    cfg,
                    &self.params,
                    &self.params.to_f64(),
                    cache,
                    w,
                    h,
                    self.config.channels,
                    &draw,
                );
                ParamGrad { offset: 0, values }
            }
        }
    }

    /// Writes magic, header length, JSON header, little-endian `f32`
    /// parameters and a SHA-256 of everything before it. The file is
    /// written next to `path` and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            init: self.init.clone(),
            arch_hash: self.config.hash(),
            param_count: self.params.len(),
            tensors: self.params.specs().to_vec(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + json.len() + 4 * self.params.len() + 32);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        for x in self.params.as_slice() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Model(format!("{} is truncated", path.display())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        if &body[..8] != MAGIC {
            return Err(Error::Model(format!("{} is not a model file", path.display())));
        }
        let hlen = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let json = body
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Model("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported model version {} (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        header.config.validate()?;
        if header.arch_hash != header.config.hash() {
            return Err(Error::Model("architecture hash does not match the stored config".into()));
        }
        let expected = ParamStore::zeros(&header.config.tensor_shapes());
        if expected.specs() != header.tensors.as_slice() || header.param_count != expected.len() {
            return Err(Error::Model("tensor layout does not match the architecture".into()));
        }
        let raw = &body[12 + hlen..];
        if raw.len() != 4 * header.param_count {
            return Err(Error::CountMismatch {
                expected: 4 * header.param_count,
                got: raw.len(),
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Predictor {
            params: ParamStore::from_parts(header.tensors, data)?,
            config: header.config,
            init: header.init,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the head activations and map modes to raw `4 × h × w` outputs.
pub fn activate(raw: &[f64], width: usize, height: usize, modes: MapModes) -> EnergyMaps {
    let n = width * height;
    let ch = |k: usize| &raw[k * n..(k + 1) * n];
    let grid = |v: Vec<f64>| Grid::from_vec(width, height, v).expect("sized to the patch");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;

    let alpha_sp: Vec<f64> = ch(1).iter().map(|&x| softplus(x)).collect();
    let beta_sp: Vec<f64> = ch(2).iter().map(|&x| softplus(x)).collect();
    let alpha = if modes.alpha_local {
        Alpha::Local(grid(alpha_sp))
    } else {
        Alpha::Scalar(mean(&alpha_sp))
    };
    let beta = if modes.beta_local {
        grid(beta_sp)
    } else {
        Grid::filled(width, height, mean(&beta_sp))
    };
    let kappa = if modes.no_kappa {
        Grid::zeros(width, height)
    } else if modes.kappa_local {
        grid(ch(3).to_vec())
    } else {
        Grid::filled(width, height, mean(ch(3)))
    };
    EnergyMaps {
        data: grid(ch(0).to_vec()),
        alpha,
        beta,
        kappa,
    }
}

/// `∂L/∂raw` from `∂L/∂maps` for the same modes as [`activate`].
pub fn head_backward(
    raw: &[f64],
    width: usize,
    height: usize,
    modes: MapModes,
    grads: &MapGradients,
) -> Vec<f64> {
    let n = width * height;
    let mut out = vec![0.0; OUTPUTS * n];
    let (d_data, rest) = out.split_at_mut(n);
    let (d_alpha, rest) = rest.split_at_mut(n);
    let (d_beta, d_kappa) = rest.split_at_mut(n);

    d_data.copy_from_slice(grads.data.as_slice());

    let ra = &raw[n..2 * n];
    match (&grads.alpha, modes.alpha_local) {
        (Alpha::Local(g), true) => {
            for ((d, &x), &g) in d_alpha.iter_mut().zip(ra).zip(g.as_slice()) {
                *d = g * sigmoid(x);
            }
        }
        (Alpha::Scalar(g), false) => {
            for (d, &x) in d_alpha.iter_mut().zip(ra) {
                *d = g * sigmoid(x) / n as f64;
            }
        }
        _ => panic!("alpha gradient mode does not match the predictor's alpha mode"),
    }

    let rb = &raw[2 * n..3 * n];
    let beta_total = grads.beta.sum();
    for (i, (d, &x)) in d_beta.iter_mut().zip(rb).enumerate() {
        let g = if modes.beta_local {
            grads.beta.as_slice()[i]
        } else {
            beta_total / n as f64
        };
        *d = g * sigmoid(x);
    }

    if !modes.no_kappa {
        if modes.kappa_local {
            d_kappa.copy_from_slice(grads.kappa.as_slice());
        } else {
            d_kappa.fill(grads.kappa.sum() / n as f64);
        }
    }
    out
}
