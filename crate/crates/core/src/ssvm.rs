//! Max-margin structured loss and its subgradients with respect to the
//! energy maps, plus the parameter optimisers.
//!
//! For a ground-truth contour `gt` and the loss-augmented contour `ŷ` the
//! per-instance hinge is `max(0, Δ(ŷ, gt) - E(ŷ) + E(gt))` with
//! `Δ = 1 - IoU`. The energy is linear in each map, so while the hinge is
//! active its gradient with respect to a map is `∂E(gt)/∂map - ∂E(ŷ)/∂map`:
//!
//! * `D`: bilinear splats of the nodes, `splat(gt) - splat(ŷ)`;
//! * `α`: splats of `|y'_s|²` (summed to a scalar when α is global);
//! * `β`: splats of `|y''_s|²`;
//! * `κ`: the balloon sum enters the energy negatively, so the gradient is
//!   `[Ω(ŷ)] - [Ω(gt)]`, a grid of -1/0/+1.

use serde::{Deserialize, Serialize};

use crate::energy::{
    bilinear_stencil, membrane_terms, thin_plate_terms, total_energy, Alpha, EnergyMaps,
};
use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::grid::Grid;

/// Gradients of the structured loss with respect to the four maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MapGradients {
    pub data: Grid,
    pub alpha: Alpha,
    pub beta: Grid,
    pub kappa: Grid,
}

impl MapGradients {
    /// All-zero gradients shaped like `maps`.
    pub fn zeros_like(maps: &EnergyMaps) -> Self {
        let (w, h) = maps.data.dims();
        MapGradients {
            data: Grid::zeros(w, h),
            alpha: match maps.alpha {
                Alpha::Scalar(_) => Alpha::Scalar(0.0),
                Alpha::Local(_) => Alpha::Local(Grid::zeros(w, h)),
            },
            beta: Grid::zeros(w, h),
            kappa: Grid::zeros(w, h),
        }
    }

    pub fn is_zero(&self) -> bool {
        let alpha_zero = match &self.alpha {
            Alpha::Scalar(a) => *a == 0.0,
            Alpha::Local(g) => g.as_slice().iter().all(|&x| x == 0.0),
        };
        alpha_zero
            && [&self.data, &self.beta, &self.kappa]
                .iter()
                .all(|g| g.as_slice().iter().all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        let alpha_ok = match &self.alpha {
            Alpha::Scalar(a) => a.is_finite(),
            Alpha::Local(g) => g.is_finite(),
        };
        alpha_ok && self.data.is_finite() && self.beta.is_finite() && self.kappa.is_finite()
    }

    /// Multiplies every gradient by `k`.
    pub fn scale(&mut self, k: f64) {
        let grids: [&mut Grid; 3] = [&mut self.data, &mut self.beta, &mut self.kappa];
        for g in grids {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        }
        match &mut self.alpha {
            Alpha::Scalar(a) => *a *= k,
            Alpha::Local(g) => g.as_mut_slice().iter_mut().for_each(|x| *x *= k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub hinge: f64,
    pub task_loss: f64,
    pub energy_gt: f64,
    pub energy_hat: f64,
    pub margin_violated: bool,
}

impl LossReport {
    /// `E(ŷ) - E(gt)`; positive when the ground truth is preferred.
    pub fn energy_gap(&self) -> f64 {
        self.energy_hat - self.energy_gt
    }
}

/// Hinge `max(0, Δ - E(ŷ) + E(gt))` with `Δ = 1 - IoU(ŷ, gt)`.
pub fn hinge_loss(maps: &EnergyMaps, gt: &Contour, y_hat: &Contour) -> LossReport {
    let (w, h) = maps.data.dims();
    let task_loss = 1.0 - gt.rasterize(w, h).iou(&y_hat.rasterize(w, h));
    let energy_gt = total_energy(maps, gt);
    let energy_hat = total_energy(maps, y_hat);
    let slack = task_loss - energy_hat + energy_gt;
    LossReport {
        hinge: slack.max(0.0),
        task_loss,
        energy_gt,
        energy_hat,
        margin_violated: slack > 0.0,
    }
}

/// Deposits each node's weight onto its four neighbouring pixels with
/// bilinear coefficients; the grid total equals the weight total.
pub fn splat_nodes(c: &Contour, weights: &[f64], width: usize, height: usize) -> Grid {
    assert_eq!(weights.len(), c.len(), "one weight per node");
    let mut g = Grid::zeros(width, height);
    for (&p, &w) in c.nodes().iter().zip(weights) {
        for ((u, v), k) in bilinear_stencil(width, height, p) {
            g.add(u, v, w * k);
        }
    }
    g
}

/// `∂E(c)/∂maps` for every map; the building block of the subgradient.
pub fn energy_gradients(maps: &EnergyMaps, c: &Contour) -> MapGradients {
    let (w, h) = maps.data.dims();
    let ones = vec![1.0; c.len()];
    let membrane = membrane_terms(c);
    let alpha = match maps.alpha {
        Alpha::Scalar(_) => Alpha::Scalar(membrane.iter().sum()),
        Alpha::Local(_) => Alpha::Local(splat_nodes(c, &membrane, w, h)),
    };
    let mask = c.rasterize(w, h);
    let kappa = Grid::from_fn(w, h, |u, v| if mask.get(u, v) { -1.0 } else { 0.0 });
    MapGradients {
        data: splat_nodes(c, &ones, w, h),
        alpha,
        beta: splat_nodes(c, &thin_plate_terms(c), w, h),
        kappa,
    }
}

/// `∂E(gt)/∂maps - ∂E(ŷ)/∂maps`, regardless of whether the hinge is active.
pub fn margin_gradients(maps: &EnergyMaps, gt: &Contour, y_hat: &Contour) -> MapGradients {
    let g = energy_gradients(maps, gt);
    let h = energy_gradients(maps, y_hat);
    MapGradients {
        data: g.data.sub(&h.data),
        alpha: match (g.alpha, h.alpha) {
            (Alpha::Scalar(a), Alpha::Scalar(b)) => Alpha::Scalar(a - b),
            (Alpha::Local(a), Alpha::Local(b)) => Alpha::Local(a.sub(&b)),
            _ => unreachable!("both gradients follow the maps' alpha mode"),
        },
        beta: g.beta.sub(&h.beta),
        kappa: g.kappa.sub(&h.kappa),
    }
}

/// Hinge report and map subgradients in one pass; gradients are zero when
/// the margin is satisfied.
pub fn structured_loss(
    maps: &EnergyMaps,
    gt: &Contour,
    y_hat: &Contour,
) -> (LossReport, MapGradients) {
    let report = hinge_loss(maps, gt, y_hat);
    let grads = if report.margin_violated {
        margin_gradients(maps, gt, y_hat)
    } else {
        MapGradients::zeros_like(maps)
    };
    (report, grads)
}

pub fn loss_subgradients(maps: &EnergyMaps, gt: &Contour, y_hat: &Contour) -> MapGradients {
    structured_loss(maps, gt, y_hat).1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Weight decay `λ`: adds `λ·ω` to every gradient.
    pub l2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            l2: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimiser over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Result<Self> {
        if !(cfg.lr >= 0.0) || !(cfg.l2 >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate and l2 must be >= 0 (lr={}, l2={})",
                cfg.lr, cfg.l2
            )));
        }
        let state = if cfg.kind == OptimizerKind::Adam { n_params } else { 0 };
        Ok(Optimizer {
            cfg,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.step_range(params, 0, grads);
    }

    /// Updates only `params[offset..offset + grads.len()]`; parameters
    /// outside the range keep their values and optimiser state.
    pub fn step_range(&mut self, params: &mut [f32], offset: usize, grads: &[f64]) {
        let params = &mut params[offset..offset + grads.len()];
        self.t += 1;
        let OptimizerConfig {
            kind,
            lr,
            l2,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        match kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    let w = *p as f64;
                    *p = (w - lr * (g + l2 * w)) as f32;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                    let i = offset + k;
                    let w = *p as f64;
                    let g = g + l2 * w;
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p = (w - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                }
            }
        }
    }
}

/// One plain gradient step `ω - lr·(g + λω)`.
pub fn sgd_update(params: &[f32], grads: &[f64], lr: f64, l2: f64) -> Vec<f32> {
    params
        .iter()
        .zip(grads)
        .map(|(&p, &g)| {
            let w = p as f64;
            (w - lr * (g + l2 * w)) as f32
        })
        .collect()
}
