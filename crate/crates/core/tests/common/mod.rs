#![allow(dead_code)]

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snake_core::energy::{Alpha, EnergyMaps};
use snake_core::geometry::{Contour, Point};
use snake_core::grid::Grid;
use snake_core::patch::Patch;
use snake_core::predictor::{
    Activation, Architecture, ConvNetConfig, InitConfig, MapModes, PoolKind, Predictor, PredictorConfig,
};
use snake_core::ssvm::MapGradients;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sum of a few random low-frequency waves around `offset`.
pub fn smooth_grid(rng: &mut impl Rng, width: usize, height: usize, offset: f64, amplitude: f64) -> Grid {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..TAU),
                rng.random_range(0.2..1.0),
            ]
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w[3]).sum();
    Grid::from_fn(width, height, |u, v| {
        let s: f64 = waves
            .iter()
            .map(|[ku, kv, ph, a]| a * (ku * u as f64 + kv * v as f64 + ph).sin())
            .sum();
        offset + amplitude * s / norm
    })
}

/// Random maps with smooth `D`, `β`, `κ`, a random scalar α and values
/// safely away from the activation limits.
pub fn random_maps(rng: &mut impl Rng, width: usize, height: usize) -> EnergyMaps {
    let data = smooth_grid(rng, width, height, 0.0, 2.0);
    let beta = smooth_grid(rng, width, height, 0.3, 0.2);
    let kappa = smooth_grid(rng, width, height, 0.2, 1.0);
    let alpha = Alpha::Scalar(rng.random_range(0.01..0.3));
    EnergyMaps::new(data, alpha, beta, kappa).unwrap()
}

/// Star-shaped polygon with `nodes` vertices at random radii around
/// `center`; counter-clockwise in the `(u, v)` frame when `ccw`.
pub fn random_star(rng: &mut impl Rng, center: Point, r_min: f64, r_max: f64, nodes: usize, ccw: bool) -> Contour {
    let mut angles: Vec<f64> = (0..nodes)
        .map(|i| (i as f64 + rng.random_range(0.1..0.9)) * TAU / nodes as f64)
        .collect();
    if !ccw {
        angles.reverse();
    }
    let pts = angles
        .into_iter()
        .map(|t| {
            let r = rng.random_range(r_min..r_max);
            Point::new(center.u + r * t.cos(), center.v + r * t.sin())
        })
        .collect();
    Contour::new(pts).unwrap()
}

/// Value of `g` at `(u, v)` under bilinear interpolation, for points inside
/// the lattice.
fn bilinear(g: &Grid, u: f64, v: f64) -> f64 {
    let i = (u.floor() as usize).min(g.width() - 2);
    let j = (v.floor() as usize).min(g.height() - 2);
    let (x, y) = (u - i as f64, v - j as f64);
    (1.0 - x) * (1.0 - y) * g.get(i, j)
        + x * (1.0 - y) * g.get(i + 1, j)
        + (1.0 - x) * y * g.get(i, j + 1)
        + x * y * g.get(i + 1, j + 1)
}

/// `F(u, v) = ∫_0^u κ(s, v) ds` for the bilinear interpolant; exact, since
/// κ is linear in `s` within each column of cells.
fn primitive_u(g: &Grid, u: f64, v: f64) -> f64 {
    let full = (u.floor() as usize).min(g.width() - 1);
    let mut acc = 0.0;
    for i in 0..full {
        acc += 0.5 * (bilinear(g, i as f64, v) + bilinear(g, i as f64 + 1.0, v));
    }
    let rest = u - full as f64;
    if rest > 0.0 {
        let k0 = bilinear(g, full as f64, v);
        let k1 = bilinear(g, u, v);
        acc += 0.5 * rest * (k0 + k1);
    }
    acc
}

/// `∫ F dv` along the segment `a → b`. The segment is split at every
/// lattice line, where `F` restricted to the piece is a cubic in the
/// segment parameter, and each piece uses three-point Gauss-Legendre.
fn edge_flux(g: &Grid, a: Point, b: Point) -> f64 {
    let mut cuts = vec![0.0, 1.0];
    for (p, q) in [(a.u, b.u), (a.v, b.v)] {
        if p != q {
            let (lo, hi) = (p.min(q).ceil() as i64, p.max(q).floor() as i64);
            for k in lo..=hi {
                let t = (k as f64 - p) / (q - p);
                if t > 0.0 && t < 1.0 {
                    cuts.push(t);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
    let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
    let dv = b.v - a.v;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let half = 0.5 * (t1 - t0);
        let mid = 0.5 * (t0 + t1);
        for (x, wt) in nodes.iter().zip(weights) {
            let t = mid + half * x;
            let p = a.lerp(b, t);
            total += wt * half * primitive_u(g, p.u, p.v) * dv;
        }
    }
    total
}

/// Exact mass `∫_Ω κ dA` of the bilinear interpolant over the polygon, by
/// Green's theorem. The polygon must lie inside the lattice.
pub fn smoothed_balloon_energy(kappa: &Grid, c: &Contour) -> f64 {
    let n = c.len();
    let nodes = c.nodes();
    let signed: f64 = (0..n).map(|s| edge_flux(kappa, nodes[s], nodes[(s + 1) % n])).sum();
    if c.signed_area() < 0.0 {
        -signed
    } else {
        signed
    }
}

/// Central differences of `f` with respect to every node coordinate.
pub fn fd_node_gradient(c: &Contour, h: f64, f: impl Fn(&Contour) -> f64) -> Vec<[f64; 2]> {
    let nodes = c.nodes().to_vec();
    let eval = |s: usize, du: f64, dv: f64| {
        let mut m = nodes.clone();
        m[s].u += du;
        m[s].v += dv;
        f(&Contour::new(m).unwrap())
    };
    (0..nodes.len())
        .map(|s| {
            [
                (eval(s, h, 0.0) - eval(s, -h, 0.0)) / (2.0 * h),
                (eval(s, 0.0, h) - eval(s, 0.0, -h)) / (2.0 * h),
            ]
        })
        .collect()
}

/// `‖a - b‖ / ‖b‖` over all node vectors.
pub fn rel_error(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
        norm += y[0].powi(2) + y[1].powi(2);
    }
    (diff / norm.max(1e-300)).sqrt()
}

pub fn random_patch(size: usize, seed: u64) -> Patch {
    let mut rng = rng(seed);
    Patch::from_fn(size, size, 3, |_, _, _| rng.random::<f64>())
}

pub fn random_grads(maps: &EnergyMaps, seed: u64) -> MapGradients {
    let mut rng = rng(seed);
    let (w, h) = maps.data.dims();
    let mut g = MapGradients::zeros_like(maps);
    let mut rand_grid = || Grid::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
    g.data = rand_grid();
    g.beta = rand_grid();
    g.kappa = rand_grid();
    g.alpha = match maps.alpha {
        Alpha::Scalar(_) => Alpha::Scalar(0.37),
        Alpha::Local(_) => Alpha::Local(rand_grid()),
    };
    g
}

/// `Σ maps ⊙ grads`, whose parameter gradient is `backward(grads)`.
pub fn probe(maps: &EnergyMaps, g: &MapGradients) -> f64 {
    let dot = |a: &Grid, b: &Grid| -> f64 { a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum() };
    let alpha = match (&maps.alpha, &g.alpha) {
        (Alpha::Scalar(a), Alpha::Scalar(b)) => a * b,
        (Alpha::Local(a), Alpha::Local(b)) => dot(a, b),
        _ => unreachable!(),
    };
    alpha + dot(&maps.data, &g.data) + dot(&maps.beta, &g.beta) + dot(&maps.kappa, &g.kappa)
}

/// Relative errors of analytic vs central-difference gradients on a random
/// 200-parameter subsample of a conv net on a 32x32 patch.
pub fn gradient_check(pool: PoolKind, activation: Activation, modes: MapModes) -> Vec<f64> {
    let mut p = Predictor::new(
        PredictorConfig {
            width: 32,
            height: 32,
            channels: 3,
            architecture: Architecture::ConvNet(ConvNetConfig {
                pool,
                activation,
                ..Default::default()
            }),
            modes,
        },
        InitConfig {
            seed: 11,
            head_bias: [0.1, -1.0, -1.0, 0.2],
        },
    )
    .unwrap();
    // Larger output weights than the default init so every head matters.
    for x in p.params_mut().tensor_mut("head.w2").unwrap() {
        *x *= 10.0;
    }
    let patch = random_patch(32, 5);
    let fwd = p.forward(&patch, 0).unwrap();
    let g = random_grads(&fwd.maps, 6);
    let analytic = p.backward(&fwd, &g).to_dense(p.param_count());

    let mut rng = rng(7);
    let mut errors = Vec::with_capacity(200);
    for _ in 0..200 {
        let i = rng.random_range(0..p.param_count());
        let orig = p.params().as_slice()[i];
        let eps = 1e-4f32;
        p.params_mut().as_mut_slice()[i] = orig + eps;
        let hi = orig + eps;
        let lp = probe(&p.maps(&patch, 0).unwrap(), &g);
        p.params_mut().as_mut_slice()[i] = orig - eps;
        let lo = orig - eps;
        let lm = probe(&p.maps(&patch, 0).unwrap(), &g);
        p.params_mut().as_mut_slice()[i] = orig;
        let fd = (lp - lm) / (hi as f64 - lo as f64);
        let a = analytic[i];
        errors.push((fd - a).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    errors
}

pub fn worst(errors: &[f64]) -> f64 {
    errors.iter().cloned().fold(0.0, f64::max)
}
