//! Contour energy terms and their forces.
//!
//! The energy of a contour `y` on maps `D, α, β, κ` is
//!
//! ```text
//! E(y) = Σ_s [ D(y_s) + α_s |y_{s+1} - y_s|² + β_s |y_{s+1} - 2y_s + y_{s-1}|² ]
//!        - Σ_{(u,v) ∈ Ω(y)} κ(u, v)
//! ```
//!
//! with `Δs = 1`, circular node indexing and `Ω(y)` the rasterised interior.
//! The balloon sum enters with a minus sign so that minimising `E`
//! maximises the κ mass enclosed by the contour: positive κ inflates.
//!
//! All maps are sampled at sub-pixel node positions by bilinear
//! interpolation. `α_s`, `β_s` are sampled at the current nodes and treated
//! as constants when differentiating the internal energy, which makes its
//! gradient the linear map `(A + B) y`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::banded::CyclicBanded;
use crate::error::{Error, Result};
use crate::geometry::{Contour, Point};
use crate::grid::Grid;

/// Per-node 2-D vectors (forces or gradients), one `[du, dv]` per node.
pub type NodeVectors = Vec<[f64; 2]>;

/// Membrane weight: one value for the whole patch or a per-pixel map.
#[derive(Clone, Debug, PartialEq)]
pub enum Alpha {
    Scalar(f64),
    Local(Grid),
}

impl Alpha {
    pub fn at(&self, p: Point) -> f64 {
        match self {
            Alpha::Scalar(a) => *a,
            Alpha::Local(g) => sample_bilinear(g, p),
        }
    }

    pub fn is_local(&self) -> bool {
        matches!(self, Alpha::Local(_))
    }
}

/// The four energy maps predicted for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMaps {
    pub data: Grid,
    pub alpha: Alpha,
    pub beta: Grid,
    pub kappa: Grid,
}

impl EnergyMaps {
    pub fn new(data: Grid, alpha: Alpha, beta: Grid, kappa: Grid) -> Result<Self> {
        let maps = EnergyMaps {
            data,
            alpha,
            beta,
            kappa,
        };
        maps.validate()?;
        Ok(maps)
    }

    /// Constant maps, handy for tests and synthetic experiments.
    pub fn constant(width: usize, height: usize, d: f64, alpha: f64, beta: f64, kappa: f64) -> Self {
        EnergyMaps {
            data: Grid::filled(width, height, d),
            alpha: Alpha::Scalar(alpha),
            beta: Grid::filled(width, height, beta),
            kappa: Grid::filled(width, height, kappa),
        }
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.data.dims();
        let mut grids = vec![("beta", &self.beta), ("kappa", &self.kappa)];
        if let Alpha::Local(g) = &self.alpha {
            grids.push(("alpha", g));
        }
        for (name, g) in &grids {
            if g.dims() != dims {
                return Err(Error::Shape(format!(
                    "{name} map is {:?}, data map is {:?}",
                    g.dims(),
                    dims
                )));
            }
        }
        let alpha_min = match &self.alpha {
            Alpha::Scalar(a) => *a,
            Alpha::Local(g) => g.min(),
        };
        if alpha_min < 0.0 {
            return Err(Error::NegativeWeight {
                term: "alpha",
                node: 0,
                value: alpha_min,
            });
        }
        if self.beta.min() < 0.0 {
            return Err(Error::NegativeWeight {
                term: "beta",
                node: 0,
                value: self.beta.min(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let alpha_ok = match &self.alpha {
            Alpha::Scalar(a) => a.is_finite(),
            Alpha::Local(g) => g.is_finite(),
        };
        alpha_ok && self.data.is_finite() && self.beta.is_finite() && self.kappa.is_finite()
    }

    pub fn with_kappa(&self, kappa: Grid) -> EnergyMaps {
        EnergyMaps {
            kappa,
            ..self.clone()
        }
    }

    /// `(α_s, β_s)` sampled at every node.
    pub fn node_weights(&self, c: &Contour) -> (Vec<f64>, Vec<f64>) {
        c.nodes()
            .iter()
            .map(|&p| (self.alpha.at(p), sample_bilinear(&self.beta, p)))
            .unzip()
    }
}

/// Bilinear interpolation between the four pixel centres around `p`;
/// points outside the grid are clamped onto its border.
pub fn sample_bilinear(g: &Grid, p: Point) -> f64 {
    let (i0, j0, fu, fv) = cell(g, p);
    let (w, h) = g.dims();
    let i1 = (i0 + 1).min(w - 1);
    let j1 = (j0 + 1).min(h - 1);
    let top = g.get(i0, j0) * (1.0 - fu) + g.get(i1, j0) * fu;
    let bottom = g.get(i0, j1) * (1.0 - fu) + g.get(i1, j1) * fu;
    top * (1.0 - fv) + bottom * fv
}

/// Exact gradient `[∂/∂u, ∂/∂v]` of the bilinear interpolant at `p`.
///
/// On a cell boundary the cell to the lower-right is used.
pub fn bilinear_gradient(g: &Grid, p: Point) -> [f64; 2] {
    let (i0, j0, fu, fv) = cell(g, p);
    let (w, h) = g.dims();
    let i1 = (i0 + 1).min(w - 1);
    let j1 = (j0 + 1).min(h - 1);
    let (a, b, c, d) = (g.get(i0, j0), g.get(i1, j0), g.get(i0, j1), g.get(i1, j1));
    let du = if i1 > i0 {
        (1.0 - fv) * (b - a) + fv * (d - c)
    } else {
        0.0
    };
    let dv = if j1 > j0 {
        (1.0 - fu) * (c - a) + fu * (d - b)
    } else {
        0.0
    };
    [du, dv]
}

/// Bilinear coefficients of the four pixels around `p`, as
/// `((u, v), weight)`. Pixels repeat for points on the last row/column.
pub fn bilinear_stencil(width: usize, height: usize, p: Point) -> [((usize, usize), f64); 4] {
    let (i0, j0, fu, fv) = cell_dims(width, height, p);
    let i1 = (i0 + 1).min(width - 1);
    let j1 = (j0 + 1).min(height - 1);
    [
        ((i0, j0), (1.0 - fu) * (1.0 - fv)),
        ((i1, j0), fu * (1.0 - fv)),
        ((i0, j1), (1.0 - fu) * fv),
        ((i1, j1), fu * fv),
    ]
}

#[inline]
fn cell(g: &Grid, p: Point) -> (usize, usize, f64, f64) {
    cell_dims(g.width(), g.height(), p)
}

#[inline]
fn cell_dims(width: usize, height: usize, p: Point) -> (usize, usize, f64, f64) {
    let (i0, fu) = axis_cell(p.u, width);
    let (j0, fv) = axis_cell(p.v, height);
    (i0, j0, fu, fv)
}

#[inline]
fn axis_cell(x: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let x = x.clamp(0.0, (n - 1) as f64);
    let i = (x.floor() as usize).min(n - 2);
    (i, x - i as f64)
}

/// Steepest-descent force of the data term, `-∇D(y_s)` per node.
pub fn data_force(d: &Grid, c: &Contour) -> NodeVectors {
    c.nodes()
        .iter()
        .map(|&p| {
            let [gu, gv] = bilinear_gradient(d, p);
            [-gu, -gv]
        })
        .collect()
}

pub fn data_energy(d: &Grid, c: &Contour) -> f64 {
    c.nodes().iter().map(|&p| sample_bilinear(d, p)).sum()
}

/// `|y_{s+1} - y_s|²` per node.
pub fn membrane_terms(c: &Contour) -> Vec<f64> {
    (0..c.len() as isize)
        .map(|s| {
            let (a, b) = (c.node(s), c.node(s + 1));
            (b.u - a.u).powi(2) + (b.v - a.v).powi(2)
        })
        .collect()
}

/// `|y_{s+1} - 2 y_s + y_{s-1}|²` per node.
pub fn thin_plate_terms(c: &Contour) -> Vec<f64> {
    (0..c.len() as isize)
        .map(|s| {
            let (p, q, r) = (c.node(s - 1), c.node(s), c.node(s + 1));
            (r.u - 2.0 * q.u + p.u).powi(2) + (r.v - 2.0 * q.v + p.v).powi(2)
        })
        .collect()
}

/// Internal energy with frozen per-node weights.
pub fn internal_energy(c: &Contour, alpha: &[f64], beta: &[f64]) -> f64 {
    let m = membrane_terms(c);
    let t = thin_plate_terms(c);
    (0..c.len()).map(|s| alpha[s] * m[s] + beta[s] * t[s]).sum()
}

/// Membrane matrix `A` (cyclic tri-diagonal) and thin-plate matrix `B`
/// (cyclic penta-diagonal) such that `∂E_int/∂y = (A + B) y` column-wise.
///
/// Row `s` of `A` is `2[-α_{s-1}, α_{s-1}+α_s, -α_s]` on columns
/// `s-1..=s+1`; row `s` of `B` is
/// `2[β_{s-1}, -2β_s-2β_{s-1}, β_{s-1}+4β_s+β_{s+1}, -2β_{s+1}-2β_s, β_{s+1}]`
/// on columns `s-2..=s+2`.
pub fn internal_matrices(alpha: &[f64], beta: &[f64]) -> Result<(CyclicBanded, CyclicBanded)> {
    let n = alpha.len();
    if beta.len() != n {
        return Err(Error::Shape(format!(
            "{} alpha weights vs {} beta weights",
            n,
            beta.len()
        )));
    }
    for (term, w) in [("alpha", alpha), ("beta", beta)] {
        if let Some((node, &value)) = w.iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
            return Err(Error::NegativeWeight { term, node, value });
        }
    }
    let prev = |s: usize| (s + n - 1) % n;
    let next = |s: usize| (s + 1) % n;
    let mut a = CyclicBanded::zeros(n, 1);
    let mut b = CyclicBanded::zeros(n, 2);
    for s in 0..n {
        let (am, a0) = (alpha[prev(s)], alpha[s]);
        a.set_band(s, -1, -2.0 * am);
        a.set_band(s, 0, 2.0 * (am + a0));
        a.set_band(s, 1, -2.0 * a0);

        let (bm, b0, bp) = (beta[prev(s)], beta[s], beta[next(s)]);
        b.set_band(s, -2, 2.0 * bm);
        b.set_band(s, -1, 2.0 * (-2.0 * b0 - 2.0 * bm));
        b.set_band(s, 0, 2.0 * (bm + 4.0 * b0 + bp));
        b.set_band(s, 1, 2.0 * (-2.0 * bp - 2.0 * b0));
        b.set_band(s, 2, 2.0 * bp);
    }
    Ok((a, b))
}

/// Outward normals `n_s = [v_{s+1} - v_{s-1}, u_{s-1} - u_{s+1}]` (for
/// counter-clockwise contours).
pub fn normals(c: &Contour) -> NodeVectors {
    (0..c.len() as isize)
        .map(|s| {
            let (p, r) = (c.node(s - 1), c.node(s + 1));
            [r.v - p.v, p.u - r.u]
        })
        .collect()
}

/// `uᵀ C v` with `C` cyclic tri-diagonal (0 on the diagonal, +1 above,
/// -1 below); equals twice the signed area.
pub fn shoelace_energy(c: &Contour) -> f64 {
    (0..c.len() as isize)
        .map(|s| c.node(s).u * (c.node(s + 1).v - c.node(s - 1).v))
        .sum()
}

/// κ mass over the rasterised interior of the contour.
pub fn balloon_energy(kappa: &Grid, c: &Contour) -> f64 {
    c.rasterize(kappa.width(), kappa.height())
        .iter_set()
        .map(|(u, v)| kappa.get(u, v))
        .sum()
}

/// `∫_0^1 (1-t) κ(a + t(b-a)) dt` and `∫_0^1 t κ(a + t(b-a)) dt`, with κ
/// sampled at `⌈|b-a|⌉ + 1` evenly spaced points and taken piecewise linear
/// in between; exact whenever κ is linear along the segment.
fn edge_moments(kappa: &Grid, a: Point, b: Point) -> (f64, f64) {
    let samples = (a.dist(b).ceil() as usize + 1).max(2);
    let h = 1.0 / (samples - 1) as f64;
    let mut near_a = 0.0;
    let mut near_b = 0.0;
    let mut t0 = 0.0;
    let mut k0 = sample_bilinear(kappa, a);
    for i in 1..samples {
        let t1 = i as f64 * h;
        let k1 = sample_bilinear(kappa, a.lerp(b, t1));
        let plain = h * (k0 + k1) / 2.0;
        let moment = h / 6.0 * ((2.0 * t0 + t1) * k0 + (t0 + 2.0 * t1) * k1);
        near_b += moment;
        near_a += plain - moment;
        t0 = t1;
        k0 = k1;
    }
    (near_a, near_b)
}

/// Gradient of the enclosed κ mass with respect to each node,
/// `[∂E_k/∂u_s, ∂E_k/∂v_s]`, i.e. the force that inflates the contour into
/// positive κ.
///
/// Moving node `s` sweeps two thin triangles along its incident edges; each
/// contributes its height times the κ average along the edge weighted
/// linearly towards node `s`. For constant κ = c this is `(c/2)·n_s`.
pub fn balloon_force(kappa: &Grid, c: &Contour) -> NodeVectors {
    let n = c.len();
    let nodes = c.nodes();
    let moments: Vec<(f64, f64)> = (0..n)
        .map(|s| edge_moments(kappa, nodes[s], nodes[(s + 1) % n]))
        .collect();
    let orientation = if c.signed_area() < 0.0 { -1.0 } else { 1.0 };
    (0..n)
        .map(|s| {
            let prev = nodes[(s + n - 1) % n];
            let cur = nodes[s];
            let next = nodes[(s + 1) % n];
            let incoming = moments[(s + n - 1) % n].1;
            let outgoing = moments[s].0;
            let fu = (cur.v - prev.v) * incoming + (next.v - cur.v) * outgoing;
            let fv = (prev.u - cur.u) * incoming + (cur.u - next.u) * outgoing;
            [orientation * fu, orientation * fv]
        })
        .collect()
}

/// Total energy of a contour on the given maps.
pub fn total_energy(maps: &EnergyMaps, c: &Contour) -> f64 {
    let (alpha, beta) = maps.node_weights(c);
    data_energy(&maps.data, c) + internal_energy(c, &alpha, &beta) - balloon_energy(&maps.kappa, c)
}

/// Everything the semi-implicit update needs at one iterate.
#[derive(Clone, Debug)]
pub struct ForceSet {
    pub data_force: NodeVectors,
    pub balloon_force: NodeVectors,
    pub a: CyclicBanded,
    pub b: CyclicBanded,
}

impl ForceSet {
    pub fn compute(maps: &EnergyMaps, c: &Contour) -> Result<Self> {
        let (alpha, beta) = maps.node_weights(c);
        let (a, b) = internal_matrices(&alpha, &beta)?;
        Ok(ForceSet {
            data_force: data_force(&maps.data, c),
            balloon_force: balloon_force(&maps.kappa, c),
            a,
            b,
        })
    }

    /// Sum of the external forces.
    pub fn external(&self) -> NodeVectors {
        self.data_force
            .iter()
            .zip(&self.balloon_force)
            .map(|(d, k)| [d[0] + k[0], d[1] + k[1]])
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapsHeader {
    #[serde(rename = "U")]
    width: usize,
    #[serde(rename = "V")]
    height: usize,
    alpha_mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

fn write_f32_grid(path: &Path, g: &Grid) -> Result<()> {
    let mut bytes = Vec::with_capacity(g.as_slice().len() * 4);
    for &x in g.as_slice() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32_grid(path: &Path, width: usize, height: usize) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != width * height * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            width * height * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Grid::from_vec(width, height, data)
}

/// Writes maps as `header.json` plus raw little-endian `f32` grids
/// (`D.f32`, `alpha.f32`, `beta.f32`, `kappa.f32`). A scalar α is
/// broadcast into its grid and also kept exactly in the header.
pub fn save_maps(maps: &EnergyMaps, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = MapsHeader {
        width: maps.width(),
        height: maps.height(),
        alpha_mode: if maps.alpha.is_local() { "local" } else { "scalar" }.into(),
        alpha: match maps.alpha {
            Alpha::Scalar(a) => Some(a),
            Alpha::Local(_) => None,
        },
    };
    let hp = dir.join("header.json");
    fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&hp, e))?;
    write_f32_grid(&dir.join("D.f32"), &maps.data)?;
    write_f32_grid(&dir.join("beta.f32"), &maps.beta)?;
    write_f32_grid(&dir.join("kappa.f32"), &maps.kappa)?;
    let alpha = match &maps.alpha {
        Alpha::Local(g) => g.clone(),
        Alpha::Scalar(a) => Grid::filled(maps.width(), maps.height(), *a),
    };
    write_f32_grid(&dir.join("alpha.f32"), &alpha)
}

pub fn load_maps(dir: &Path) -> Result<EnergyMaps> {
    let hp = dir.join("header.json");
    let header: MapsHeader =
        serde_json::from_slice(&fs::read(&hp).map_err(|e| Error::io(&hp, e))?)?;
    let (w, h) = (header.width, header.height);
    let alpha = match header.alpha_mode.as_str() {
        "scalar" => Alpha::Scalar(
            header
                .alpha
                .ok_or_else(|| Error::Config("scalar alpha mode without a value".into()))?,
        ),
        "local" => Alpha::Local(read_f32_grid(&dir.join("alpha.f32"), w, h)?),
        other => return Err(Error::Config(format!("unknown alpha mode {other:?}"))),
    };
    EnergyMaps::new(
        read_f32_grid(&dir.join("D.f32"), w, h)?,
        alpha,
        read_f32_grid(&dir.join("beta.f32"), w, h)?,
        read_f32_grid(&dir.join("kappa.f32"), w, h)?,
    )
}
