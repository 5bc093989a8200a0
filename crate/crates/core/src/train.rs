//! Max-margin training loop and batch prediction.
//!
//! Every step takes a batch of training instances and does, per instance:
//! predictor forward, loss-augmented inference from the instance's init,
//! hinge and map subgradients, and backward to the parameters. The batch
//! gradient is `C/|batch|` times the sum; the ℓ2 term is left to the
//! optimiser's weight decay.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::energy::{save_maps, EnergyMaps};
use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::inference::{run_inference, run_loss_augmented, InferenceConfig, Trajectory};
use crate::predictor::{Architecture, ParamGrad, Predictor};
use crate::ssvm::{hinge_loss, margin_gradients, structured_loss, LossReport, Optimizer, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Hinge weight `C`.
    pub c: f64,
    /// Size of the κ shift used for loss-augmented inference.
    pub c_delta: f64,
    pub batch_size: usize,
    /// Random quarter turns and flips; ignored by DirectGrid.
    pub augment: bool,
    pub seed: u64,
    /// Stops after this many optimiser steps when set.
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub inference: InferenceConfig,
    pub update: UpdateRule,
    /// Where to write maps and contours when a non-finite value shows up.
    pub dump_dir: Option<PathBuf>,
}

/// When a sample contributes a gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Only while the hinge is active.
    Hinge,
    /// Always apply `dE(gt) - dE(ŷ)`, even once the margin is met.
    #[default]
    Always,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            c: 1.0,
            c_delta: 1.0,
            batch_size: 1,
            augment: true,
            seed: 0,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
            inference: InferenceConfig::default(),
            update: UpdateRule::Always,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.c >= 0.0) || !(self.c_delta >= 0.0) {
            return Err(Error::Config("C and c_delta must be >= 0".into()));
        }
        self.inference.validate()
    }
}

/// One optimiser step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    pub epoch: usize,
    pub hinge: f64,
    pub task_loss: f64,
    pub energy_gap: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_hinge: f64,
    pub mean_task_loss: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    Epoch(&'a EpochSummary, &'a Predictor),
}

struct InstanceStep {
    report: LossReport,
    grad: ParamGrad,
}

fn instance_step(
    predictor: &Predictor,
    inst: &Instance,
    index: usize,
    cfg: &TrainConfig,
) -> std::result::Result<InstanceStep, (Error, Option<EnergyMaps>, Option<Contour>)> {
    let fwd = predictor.forward(&inst.patch, index).map_err(|e| (e, None, None))?;
    let gt_mask = inst.gt.rasterize(inst.width(), inst.height());
    let (y_hat, _) = run_loss_augmented(&fwd.maps, &inst.init, &gt_mask, cfg.c_delta, &cfg.inference)
        .map_err(|e| (e, Some(fwd.maps.clone()), None))?;
    let (report, grads) = match cfg.update {
        UpdateRule::Hinge => structured_loss(&fwd.maps, &inst.gt, &y_hat),
        UpdateRule::Always => (
            hinge_loss(&fwd.maps, &inst.gt, &y_hat),
            margin_gradients(&fwd.maps, &inst.gt, &y_hat),
        ),
    };
    if !report.hinge.is_finite() || !grads.is_finite() {
        return Err((
            Error::NonFinite(format!("loss or map gradients for {}", inst.id)),
            Some(fwd.maps),
            Some(y_hat),
        ));
    }
    let grad = predictor.backward(&fwd, &grads);
    if !grad.is_finite() {
        return Err((
            Error::NonFinite(format!("parameter gradient for {}", inst.id)),
            Some(fwd.maps),
            Some(y_hat),
        ));
    }
    Ok(InstanceStep { report, grad })
}

fn dump_failure(dir: &Path, inst: &Instance, maps: Option<&EnergyMaps>, y_hat: Option<&Contour>) -> Result<()> {
    let base = dir.join(inst.id.replace(['/', '#'], "_"));
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    if let Some(m) = maps {
        save_maps(m, &base.join("maps"))?;
    }
    let contours = serde_json::json!({
        "id": inst.id,
        "gt": inst.gt,
        "init": inst.init,
        "y_hat": y_hat,
    });
    let path = base.join("contours.json");
    fs::write(&path, serde_json::to_vec_pretty(&contours)?).map_err(|e| Error::io(&path, e))
}

/// Trains `predictor` in place. For DirectGrid, `instances[i]` owns raw
/// grid `i`. `on_event` sees every step and every finished epoch; an error
/// from it stops training.
pub fn train(
    predictor: &mut Predictor,
    instances: &[&Instance],
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Dataset("no training instances".into()));
    }
    let c = predictor.config();
    if let Architecture::DirectGrid { instances: n } = c.architecture {
        if n != instances.len() {
            return Err(Error::CountMismatch {
                expected: n,
                got: instances.len(),
            });
        }
    }
    for inst in instances {
        predictor.ensure_compatible(inst.width(), inst.height(), inst.patch.channels())?;
    }
    let augment = cfg.augment && matches!(c.architecture, Architecture::ConvNet(_));
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), predictor.param_count())?;
    let mut summaries = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng);
        let (mut hinge_sum, mut task_sum, mut count, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| iter >= m) {
                break;
            }
            let views: Vec<(usize, Instance)> = batch
                .iter()
                .map(|&i| {
                    let inst = if augment {
                        instances[i].augmented(rng.random_range(0..4), rng.random())
                    } else {
                        instances[i].clone()
                    };
                    (i, inst)
                })
                .collect();
            let model = &*predictor;
            let results: Vec<_> = views
                .par_iter()
                .map(|(i, inst)| instance_step(model, inst, *i, cfg))
                .collect();
            let weight = cfg.c / batch.len() as f64;
            let mut total = ParamGrad {
                offset: 0,
                values: Vec::new(),
            };
            let mut log = StepLog {
                iter,
                epoch,
                hinge: 0.0,
                task_loss: 0.0,
                energy_gap: 0.0,
                lr: cfg.optimizer.lr,
            };
            for ((_, inst), res) in views.iter().zip(results) {
                match res {
                    Ok(step) => {
                        total.add_scaled(&step.grad, weight);
                        let k = 1.0 / batch.len() as f64;
                        log.hinge += k * step.report.hinge;
                        log.task_loss += k * step.report.task_loss;
                        log.energy_gap += k * step.report.energy_gap();
                    }
                    Err((e, maps, y_hat)) => {
                        if let (Error::NonFinite(_), Some(dir)) = (&e, &cfg.dump_dir) {
                            dump_failure(dir, inst, maps.as_ref(), y_hat.as_ref())?;
                        }
                        return Err(e);
                    }
                }
            }
            if !total.values.is_empty() {
                optimizer.step_range(predictor.params_mut().as_mut_slice(), total.offset, &total.values);
            }
            if predictor.params().as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameters after step {iter}")));
            }
            hinge_sum += log.hinge * batch.len() as f64;
            task_sum += log.task_loss * batch.len() as f64;
            count += batch.len();
            steps += 1;
            iter += 1;
            on_event(TrainEvent::Step(&log))?;
        }
        if steps == 0 {
            break 'epochs;
        }
        let summary = EpochSummary {
            epoch,
            steps,
            mean_hinge: hinge_sum / count as f64,
            mean_task_loss: task_sum / count as f64,
        };
        on_event(TrainEvent::Epoch(&summary, predictor))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Plain inference on every instance. DirectGrid reads raw grid `i` for
/// `instances[i]`.
pub fn predict(
    predictor: &Predictor,
    instances: &[&Instance],
    cfg: &InferenceConfig,
) -> Result<Vec<(Contour, Option<Trajectory>)>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let maps = predictor.maps(&inst.patch, i)?;
            run_inference(&maps, &inst.init, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, ShapeFamily, SynthConfig};
    use crate::predictor::{InitConfig, MapModes, PredictorConfig};
    use crate::ssvm::OptimizerKind;

    fn one_rect() -> Vec<Instance> {
        generate_synthetic(&SynthConfig {
            n: 1,
            size: 32,
            nodes: 20,
            shapes: vec![ShapeFamily::AxisRect],
            ..Default::default()
        })
        .unwrap()
    }

    fn direct(n: usize) -> Predictor {
        Predictor::new(
            PredictorConfig {
                width: 32,
                height: 32,
                channels: 3,
                architecture: Architecture::DirectGrid { instances: n },
                modes: MapModes::default(),
            },
            InitConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let insts = one_rect();
        let refs: Vec<&Instance> = insts.iter().collect();
        let mut p = direct(1);
        let before = p.clone();
        let cfg = TrainConfig {
            epochs: 2,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Sgd,
                lr: 0.0,
                l2: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut steps = 0;
        train(&mut p, &refs, &cfg, |e| {
            if let TrainEvent::Step(_) = e {
                steps += 1;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, 2);
        assert_eq!(p, before);
    }

    #[test]
    fn direct_grid_count_must_match() {
        let insts = one_rect();
        let refs: Vec<&Instance> = insts.iter().collect();
        let mut p = direct(2);
        assert!(train(&mut p, &refs, &TrainConfig::default(), |_| Ok(())).is_err());
    }

    #[test]
    fn max_steps_stops_early() {
        let insts = one_rect();
        let refs: Vec<&Instance> = insts.iter().collect();
        let mut p = direct(1);
        let cfg = TrainConfig {
            epochs: 10,
            max_steps: Some(3),
            ..Default::default()
        };
        let s = train(&mut p, &refs, &cfg, |_| Ok(())).unwrap();
        assert_eq!(s.len(), 3);
    }
}
