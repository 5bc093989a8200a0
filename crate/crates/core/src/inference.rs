//! Semi-implicit contour evolution.
//!
//! Each step treats the internal terms implicitly and the external forces
//! explicitly:
//!
//! ```text
//! y^{t+1} = (I + A + B)^{-1} (y^t + γ F(y^t))
//! ```
//!
//! where `F = -∂E_ext/∂y` is the sum of the data and balloon forces and
//! `A`, `B` are rebuilt from the weights sampled at `y^t`. The `u` and `v`
//! columns share one factorisation.

use serde::{Deserialize, Serialize};

use crate::banded::{CyclicBanded, CyclicCholesky};
use crate::energy::{total_energy, EnergyMaps, ForceSet};
use crate::error::{Error, Result};
use crate::geometry::{Contour, RasterMask};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub iterations: usize,
    /// Scale applied to the external forces.
    pub step_gamma: f64,
    pub clamp: bool,
    pub record_trajectory: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            iterations: 50,
            step_gamma: 1.0,
            clamp: true,
            record_trajectory: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("inference needs at least one iteration".into()));
        }
        if !(self.step_gamma > 0.0) {
            return Err(Error::Config(format!(
                "step_gamma must be > 0, got {}",
                self.step_gamma
            )));
        }
        Ok(())
    }
}

/// Contours and energies of every iterate, including the initial one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub contours: Vec<Contour>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    fn push(&mut self, maps: &EnergyMaps, c: &Contour) {
        self.energies.push(total_energy(maps, c));
        self.contours.push(c.clone());
    }
}

/// One semi-implicit update.
pub fn acm_step(maps: &EnergyMaps, c: &Contour, cfg: &InferenceConfig) -> Result<Contour> {
    let forces = ForceSet::compute(maps, c)?;
    let system = CyclicBanded::identity(c.len())
        .plus(&forces.a)
        .plus(&forces.b);
    let chol = CyclicCholesky::factor(&system)?;
    let external = forces.external();
    let gamma = cfg.step_gamma;
    let (ru, rv): (Vec<f64>, Vec<f64>) = c
        .nodes()
        .iter()
        .zip(&external)
        .map(|(p, f)| (p.u + gamma * f[0], p.v + gamma * f[1]))
        .unzip();
    let next = Contour::from_columns(&chol.solve(&ru), &chol.solve(&rv))?;
    if !next.is_finite() {
        return Err(Error::NonFinite("contour update".into()));
    }
    Ok(if cfg.clamp {
        next.clamped(maps.width(), maps.height())
    } else {
        next
    })
}

/// Runs `cfg.iterations` updates from `init`.
pub fn run_inference(
    maps: &EnergyMaps,
    init: &Contour,
    cfg: &InferenceConfig,
) -> Result<(Contour, Option<Trajectory>)> {
    cfg.validate()?;
    let mut traj = cfg.record_trajectory.then(Trajectory::default);
    let mut c = init.clone();
    if let Some(t) = traj.as_mut() {
        t.push(maps, &c);
    }
    for _ in 0..cfg.iterations {
        c = acm_step(maps, &c, cfg)?;
        if let Some(t) = traj.as_mut() {
            t.push(maps, &c);
        }
    }
    Ok((c, traj))
}

/// κ shifted down by `c_delta` inside the ground truth and up by `c_delta`
/// outside it.
pub fn augment_kappa(kappa: &Grid, gt: &RasterMask, c_delta: f64) -> Grid {
    let mut out = kappa.clone();
    for v in 0..kappa.height() {
        for u in 0..kappa.width() {
            let shift = if gt.get(u, v) { -c_delta } else { c_delta };
            out.add(u, v, shift);
        }
    }
    out
}

/// Inference on the task-loss augmented energy: the contour is rewarded
/// for leaving the ground truth and for covering background, which
/// approximates the most violated output `argmax_y [Δ(y, gt) - E(y)]`.
pub fn run_loss_augmented(
    maps: &EnergyMaps,
    init: &Contour,
    gt: &RasterMask,
    c_delta: f64,
    cfg: &InferenceConfig,
) -> Result<(Contour, Option<Trajectory>)> {
    if !(c_delta >= 0.0) {
        return Err(Error::Config(format!("c_delta must be >= 0, got {c_delta}")));
    }
    if (gt.width(), gt.height()) != maps.kappa.dims() {
        return Err(Error::Shape("ground-truth mask does not match the maps".into()));
    }
    if c_delta == 0.0 {
        return run_inference(maps, init, cfg);
    }
    let augmented = maps.with_kappa(augment_kappa(&maps.kappa, gt, c_delta));
    run_inference(&augmented, init, cfg)
}
