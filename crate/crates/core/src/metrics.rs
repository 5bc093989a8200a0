//! Instance-level evaluation: raster IoU, world-unit area error and
//! area-weighted coverage.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::geometry::Contour;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub iou: f64,
    /// World units.
    pub area_pred: f64,
    pub area_gt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub area_rmse: f64,
    pub weighted_coverage: f64,
    pub per_instance: Vec<InstanceScore>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>12} {:>12}", "id", "iou", "area_pred", "area_gt");
        for r in &self.per_instance {
            let _ = writeln!(s, "{:<24} {:>8.4} {:>12.2} {:>12.2}", r.id, r.iou, r.area_pred, r.area_gt);
        }
        let _ = writeln!(s, "{}", "-".repeat(59));
        let _ = writeln!(s, "mean IoU           {:.4}", self.mean_iou);
        let _ = writeln!(s, "area RMSE          {:.4}", self.area_rmse);
        let _ = writeln!(s, "weighted coverage  {:.4}", self.weighted_coverage);
        s
    }
}

/// Area-weighted best-IoU coverage. `candidates` lists `(gt, pred, iou)`
/// pairs; they are matched greedily by decreasing IoU with each ground
/// truth and each prediction used at most once. Unmatched ground truths
/// count as zero.
pub fn weighted_coverage(gt_areas: &[f64], candidates: &[(usize, usize, f64)]) -> f64 {
    let total: f64 = gt_areas.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut order: Vec<&(usize, usize, f64)> = candidates.iter().collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut gt_used = vec![false; gt_areas.len()];
    let mut pred_used = std::collections::HashSet::new();
    let mut covered = 0.0;
    for &&(g, p, iou) in &order {
        if gt_used[g] || pred_used.contains(&p) {
            continue;
        }
        gt_used[g] = true;
        pred_used.insert(p);
        covered += gt_areas[g] * iou;
    }
    covered / total
}

/// Scores one prediction per instance. Each prediction lives in its own
/// patch, so it is the only matching candidate for that instance's ground
/// truth.
pub fn evaluate<I: std::borrow::Borrow<Instance> + Sync>(preds: &[Contour], instances: &[I]) -> Result<EvalReport> {
    if preds.len() != instances.len() {
        return Err(Error::CountMismatch {
            expected: instances.len(),
            got: preds.len(),
        });
    }
    let per_instance: Vec<InstanceScore> = preds
        .par_iter()
        .zip(instances.par_iter())
        .map(|(pred, inst)| {
            let inst = inst.borrow();
            let (w, h) = (inst.width(), inst.height());
            let gt_mask = crate::geometry::rasterize(&inst.gt_polygon, w, h);
            let s2 = inst.meta.scale_factor.powi(2);
            InstanceScore {
                id: inst.id.clone(),
                iou: gt_mask.iou(&pred.rasterize(w, h)),
                area_pred: pred.signed_area().abs() / s2,
                area_gt: inst.world_area(),
            }
        })
        .collect();
    let n = per_instance.len().max(1) as f64;
    let mean_iou = per_instance.iter().map(|r| r.iou).sum::<f64>() / n;
    let area_rmse = (per_instance
        .iter()
        .map(|r| (r.area_pred - r.area_gt).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let areas: Vec<f64> = per_instance.iter().map(|r| r.area_gt).collect();
    let candidates: Vec<(usize, usize, f64)> = per_instance.iter().enumerate().map(|(i, r)| (i, i, r.iou)).collect();
    Ok(EvalReport {
        mean_iou,
        area_rmse,
        weighted_coverage: weighted_coverage(&areas, &candidates),
        per_instance,
    })
}
