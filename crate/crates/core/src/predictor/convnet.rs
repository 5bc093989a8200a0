//! Small convolutional feature model with a hypercolumn head.
//!
//! Block `l` runs a same-padded `k_l × k_l` convolution at `1/2^l` of the
//! patch resolution followed by a rectifier. Its output is tapped for
//! the hypercolumn and then pooled 2×2 to feed block `l + 1`. The taps are
//! upsampled bilinearly (pixel-centre aligned, edge clamped) to full
//! resolution, concatenated, and fed to a per-pixel perceptron with one
//! rectified hidden layer and four outputs.
//!
//! The first perceptron layer is linear, so it is applied to every tap at
//! its own resolution before upsampling; this is the same function as
//! upsampling first and saves most of the work.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Patch;

use super::store::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

/// Rectifier used after every convolution and in the hidden layer.
/// Softplus is smooth, so finite-difference checks see no kinks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Derivative expressed through the output `a = f(z)`.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => -(-a).exp_m1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvNetConfig {
    pub kernels: Vec<usize>,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub pool: PoolKind,
    pub activation: Activation,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        ConvNetConfig {
            kernels: vec![7, 5, 3],
            channels: vec![16, 32, 64],
            hidden: 32,
            pool: PoolKind::Avg,
            activation: Activation::Softplus,
        }
    }
}

pub(crate) const OUTPUTS: usize = 4;

impl ConvNetConfig {
    pub fn blocks(&self) -> usize {
        self.kernels.len()
    }

    /// Number of hypercolumn features per pixel.
    pub fn hypercolumn_width(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let n = self.blocks();
        if n == 0 || self.channels.len() != n {
            return Err(Error::Config(format!(
                "conv net needs matching, non-empty kernel and channel lists ({} vs {})",
                n,
                self.channels.len()
            )));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("conv kernels must have odd size".into()));
        }
        if self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("conv net widths must be positive".into()));
        }
        let step = 1usize << (n - 1);
        if width % step != 0 || height % step != 0 {
            return Err(Error::Config(format!(
                "patch {width}x{height} is not divisible by {step} for {n} pooling levels"
            )));
        }
        Ok(())
    }

    pub fn tensor_shapes(&self, input_channels: usize) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut cin = input_channels;
        for (l, (&k, &cout)) in self.kernels.iter().zip(&self.channels).enumerate() {
            shapes.push((format!("conv{l}.weight"), vec![cout, cin, k, k]));
            shapes.push((format!("conv{l}.bias"), vec![cout]));
            cin = cout;
        }
        shapes.push(("head.w1".into(), vec![self.hidden, self.hypercolumn_width()]));
        shapes.push(("head.b1".into(), vec![self.hidden]));
        shapes.push(("head.w2".into(), vec![OUTPUTS, self.hidden]));
        shapes.push(("head.b2".into(), vec![OUTPUTS]));
        shapes
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    input: Vec<f64>,
    /// Rectified block outputs (the hypercolumn taps).
    taps: Vec<Vec<f64>>,
    /// Pooled taps, i.e. the inputs of blocks `1..n`.
    pooled: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    hidden_pre: Vec<f64>,
}

struct Weights<'a> {
    params: &'a [f64],
    store: &'a ParamStore,
}

impl<'a> Weights<'a> {
    fn get(&self, name: &str) -> &'a [f64] {
        let r = self.store.range(name).expect("tensor layout follows the config");
        &self.params[r]
    }
}

/// Same-padded 2-D convolution of a `cin × h × w` input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d(
    x: &[f64],
    cin: usize,
    w: usize,
    h: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let n = w * h;
    let p = (k / 2) as isize;
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let out_o = &mut out[o * n..(o + 1) * n];
        out_o.fill(bias[o]);
        for i in 0..cin {
            let x_i = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let src = (y as isize + dy) as usize * w + (x0 as isize + dx) as usize;
                        let src = &x_i[src..src + (x1 - x0)];
                        let dst = &mut out_o[y * w + x0..y * w + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(d_weight, d_bias, d_input)`; the input
/// gradient is skipped when `need_input` is false.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    cin: usize,
    w: usize,
    h: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    dout: &[f64],
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = w * h;
    let p = (k / 2) as isize;
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    let mut dx = vec![0.0; if need_input { cin * n } else { 0 }];
    for o in 0..cout {
        let g = &dout[o * n..(o + 1) * n];
        db[o] = g.iter().sum();
        for i in 0..cin {
            let x_i = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx_off = kx as isize - p;
                    let (x0, x1) = valid_range(w, dx_off);
                    let wi = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weight[wi];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = (y as isize + dy) as usize * w + (x0 as isize + dx_off) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        acc += grow
                            .iter()
                            .zip(&x_i[src..src + (x1 - x0)])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        if need_input {
                            let dst = &mut dx[i * n + src..i * n + src + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (dw, db, dx)
}

/// Output rows/columns whose shifted source index stays inside `[0, len)`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn pool2(x: &[f64], c: usize, w: usize, h: usize, kind: PoolKind) -> (Vec<f64>, Vec<usize>) {
    let (pw, ph) = (w / 2, h / 2);
    let mut out = vec![0.0; c * pw * ph];
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax = vec![0; out.len()];
    }
    for ch in 0..c {
        for y in 0..ph {
            for xx in 0..pw {
                let base = ch * w * h;
                let idx = [
                    base + 2 * y * w + 2 * xx,
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ];
                let o = (ch * ph + y) * pw + xx;
                match kind {
                    PoolKind::Avg => out[o] = 0.25 * idx.iter().map(|&i| x[i]).sum::<f64>(),
                    PoolKind::Max => {
                        let best = idx
                            .iter()
                            .copied()
                            .fold(idx[0], |b, i| if x[i] > x[b] { i } else { b });
                        out[o] = x[best];
                        argmax[o] = best;
                    }
                }
            }
        }
    }
    (out, argmax)
}

fn pool2_backward(
    dout: &[f64],
    argmax: &[usize],
    c: usize,
    w: usize,
    h: usize,
    kind: PoolKind,
) -> Vec<f64> {
    let (pw, ph) = (w / 2, h / 2);
    let mut dx = vec![0.0; c * w * h];
    for ch in 0..c {
        for y in 0..ph {
            for xx in 0..pw {
                let o = (ch * ph + y) * pw + xx;
                match kind {
                    PoolKind::Avg => {
                        let base = ch * w * h;
                        for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[base + (2 * y + dy) * w + 2 * xx + dxo] += 0.25 * dout[o];
                        }
                    }
                    PoolKind::Max => dx[argmax[o]] += dout[o],
                }
            }
        }
    }
    dx
}

/// Linear interpolation table from a coarse axis to a fine one.
struct Axis {
    i0: Vec<usize>,
    i1: Vec<usize>,
    t: Vec<f64>,
}

impl Axis {
    fn new(fine: usize, coarse: usize) -> Axis {
        let scale = fine as f64 / coarse as f64;
        let mut axis = Axis {
            i0: Vec::with_capacity(fine),
            i1: Vec::with_capacity(fine),
            t: Vec::with_capacity(fine),
        };
        for x in 0..fine {
            let src = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (coarse - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(coarse - 1);
            axis.i0.push(i0);
            axis.i1.push(i1);
            axis.t.push(src - i0 as f64);
        }
        axis
    }
}

/// Bilinear upsampling of `c` channels from `cw × ch` to `w × h`.
pub(crate) fn upsample(x: &[f64], c: usize, cw: usize, chh: usize, w: usize, h: usize) -> Vec<f64> {
    let (ax, ay) = (Axis::new(w, cw), Axis::new(h, chh));
    let mut out = vec![0.0; c * w * h];
    let mut tmp = vec![0.0; chh * w];
    for ch in 0..c {
        let src = &x[ch * cw * chh..(ch + 1) * cw * chh];
        for y in 0..chh {
            let row = &src[y * cw..(y + 1) * cw];
            for xx in 0..w {
                tmp[y * w + xx] = (1.0 - ax.t[xx]) * row[ax.i0[xx]] + ax.t[xx] * row[ax.i1[xx]];
            }
        }
        let dst = &mut out[ch * w * h..(ch + 1) * w * h];
        for y in 0..h {
            let (r0, r1, t) = (ay.i0[y], ay.i1[y], ay.t[y]);
            for xx in 0..w {
                dst[y * w + xx] = (1.0 - t) * tmp[r0 * w + xx] + t * tmp[r1 * w + xx];
            }
        }
    }
    out
}

fn upsample_backward(dout: &[f64], c: usize, cw: usize, chh: usize, w: usize, h: usize) -> Vec<f64> {
    let (ax, ay) = (Axis::new(w, cw), Axis::new(h, chh));
    let mut dx = vec![0.0; c * cw * chh];
    let mut tmp = vec![0.0; chh * w];
    for ch in 0..c {
        tmp.fill(0.0);
        let src = &dout[ch * w * h..(ch + 1) * w * h];
        for y in 0..h {
            let (r0, r1, t) = (ay.i0[y], ay.i1[y], ay.t[y]);
            for xx in 0..w {
                let g = src[y * w + xx];
                tmp[r0 * w + xx] += (1.0 - t) * g;
                tmp[r1 * w + xx] += t * g;
            }
        }
        let dst = &mut dx[ch * cw * chh..(ch + 1) * cw * chh];
        for y in 0..chh {
            for xx in 0..w {
                let g = tmp[y * w + xx];
                dst[y * cw + ax.i0[xx]] += (1.0 - ax.t[xx]) * g;
                dst[y * cw + ax.i1[xx]] += ax.t[xx] * g;
            }
        }
    }
    dx
}

/// `out[r] = Σ_c m[r][c]·x[c]` for every pixel; `x` is `cols × n`.
fn channel_mix(m: &[f64], rows: usize, cols: usize, x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let dst = &mut out[r * n..(r + 1) * n];
        for c in 0..cols {
            let k = m[r * cols + c];
            for (d, s) in dst.iter_mut().zip(&x[c * n..(c + 1) * n]) {
                *d += k * s;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Raw four-channel head output (`4 × h × w`) and the backward cache.
pub(crate) fn forward(
    cfg: &ConvNetConfig,
    store: &ParamStore,
    params: &[f64],
    patch: &Patch,
) -> (Vec<f64>, ConvCache) {
    let wts = Weights { params, store };
    let (w, h) = (patch.width(), patch.height());
    let n = w * h;
    let blocks = cfg.blocks();
    let mut taps = Vec::with_capacity(blocks);
    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(blocks.saturating_sub(1));
    let mut argmax = Vec::new();
    let mut cin = patch.channels();
    for l in 0..blocks {
        let (lw, lh) = (w >> l, h >> l);
        let x = if l == 0 { patch.as_slice() } else { &pooled[l - 1] };
        let cout = cfg.channels[l];
        let mut a = conv2d(
            x,
            cin,
            lw,
            lh,
            wts.get(&format!("conv{l}.weight")),
            wts.get(&format!("conv{l}.bias")),
            cout,
            cfg.kernels[l],
        );
        a.iter_mut().for_each(|z| *z = cfg.activation.apply(*z));
        if l + 1 < blocks {
            let (p, am) = pool2(&a, cout, lw, lh, cfg.pool);
            pooled.push(p);
            argmax.push(am);
        }
        taps.push(a);
        cin = cout;
    }

    let hyper = cfg.hypercolumn_width();
    let w1 = wts.get("head.w1");
    let mut hidden_pre = vec![0.0; cfg.hidden * n];
    for (j, b) in wts.get("head.b1").iter().enumerate() {
        hidden_pre[j * n..(j + 1) * n].fill(*b);
    }
    let mut col = 0;
    for (l, a) in taps.iter().enumerate() {
        let c = cfg.channels[l];
        let (lw, lh) = (w >> l, h >> l);
        let m: Vec<f64> = (0..cfg.hidden)
            .flat_map(|j| w1[j * hyper + col..j * hyper + col + c].iter().copied())
            .collect();
        let mixed = channel_mix(&m, cfg.hidden, c, a, lw * lh);
        let up = if l == 0 {
            mixed
        } else {
            upsample(&mixed, cfg.hidden, lw, lh, w, h)
        };
        hidden_pre.iter_mut().zip(&up).for_each(|(d, s)| *d += s);
        col += c;
    }
    let hidden: Vec<f64> = hidden_pre.iter().map(|&z| cfg.activation.apply(z)).collect();
    let mut raw = channel_mix(wts.get("head.w2"), OUTPUTS, cfg.hidden, &hidden, n);
    for (k, b) in wts.get("head.b2").iter().enumerate() {
        raw[k * n..(k + 1) * n].iter_mut().for_each(|x| *x += b);
    }
    let cache = ConvCache {
        input: patch.as_slice().to_vec(),
        taps,
        pooled,
        argmax,
        hidden_pre,
    };
    (raw, cache)
}

/// Parameter gradient (same layout as the store) given `∂L/∂raw`.
pub(crate) fn backward(
    cfg: &ConvNetConfig,
    store: &ParamStore,
    params: &[f64],
    cache: &ConvCache,
    width: usize,
    height: usize,
    input_channels: usize,
    draw: &[f64],
) -> Vec<f64> {
    let wts = Weights { params, store };
    let (w, h) = (width, height);
    let n = w * h;
    let hyper = cfg.hypercolumn_width();
    let mut grad = vec![0.0; params.len()];
    let mut put = |name: &str, g: &[f64]| {
        let r = store.range(name).expect("tensor layout follows the config");
        grad[r].iter_mut().zip(g).for_each(|(d, s)| *d += s);
    };

    let hidden: Vec<f64> = cache.hidden_pre.iter().map(|&z| cfg.activation.apply(z)).collect();
    let w2 = wts.get("head.w2");
    let db2: Vec<f64> = (0..OUTPUTS).map(|k| draw[k * n..(k + 1) * n].iter().sum()).collect();
    let mut dw2 = vec![0.0; OUTPUTS * cfg.hidden];
    let mut dhidden = vec![0.0; cfg.hidden * n];
    for k in 0..OUTPUTS {
        let g = &draw[k * n..(k + 1) * n];
        for j in 0..cfg.hidden {
            dw2[k * cfg.hidden + j] = dot(g, &hidden[j * n..(j + 1) * n]);
            let wv = w2[k * cfg.hidden + j];
            for (d, s) in dhidden[j * n..(j + 1) * n].iter_mut().zip(g) {
                *d += wv * s;
            }
        }
    }
    put("head.w2", &dw2);
    put("head.b2", &db2);
    for (d, h) in dhidden.iter_mut().zip(&hidden) {
        *d *= cfg.activation.slope_from_output(*h);
    }
    let db1: Vec<f64> = (0..cfg.hidden).map(|j| dhidden[j * n..(j + 1) * n].iter().sum()).collect();
    put("head.b1", &db1);

    let w1 = wts.get("head.w1");
    let mut dw1 = vec![0.0; cfg.hidden * hyper];
    let mut dtaps: Vec<Vec<f64>> = Vec::with_capacity(cfg.blocks());
    let mut col = 0;
    for (l, a) in cache.taps.iter().enumerate() {
        let c = cfg.channels[l];
        let (lw, lh) = (w >> l, h >> l);
        let ln = lw * lh;
        let dmixed = if l == 0 {
            dhidden.clone()
        } else {
            upsample_backward(&dhidden, cfg.hidden, lw, lh, w, h)
        };
        let mut da = vec![0.0; c * ln];
        for j in 0..cfg.hidden {
            let g = &dmixed[j * ln..(j + 1) * ln];
            for ch in 0..c {
                let x = &a[ch * ln..(ch + 1) * ln];
                dw1[j * hyper + col + ch] = dot(g, x);
                let wv = w1[j * hyper + col + ch];
                for (d, s) in da[ch * ln..(ch + 1) * ln].iter_mut().zip(g) {
                    *d += wv * s;
                }
            }
        }
        dtaps.push(da);
        col += c;
    }
    put("head.w1", &dw1);

    let mut dnext: Option<Vec<f64>> = None;
    for l in (0..cfg.blocks()).rev() {
        let (lw, lh) = (w >> l, h >> l);
        let cout = cfg.channels[l];
        let mut da = std::mem::take(&mut dtaps[l]);
        if let Some(dp) = dnext.take() {
            let back = pool2_backward(&dp, &cache.argmax[l], cout, lw, lh, cfg.pool);
            da.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
        }
        for (d, a) in da.iter_mut().zip(&cache.taps[l]) {
            *d *= cfg.activation.slope_from_output(*a);
        }
        let (x, cin) = if l == 0 {
            (&cache.input[..], input_channels)
        } else {
            (&cache.pooled[l - 1][..], cfg.channels[l - 1])
        };
        let (dw, db, dx) = conv2d_backward(
            x,
            cin,
            lw,
            lh,
            wts.get(&format!("conv{l}.weight")),
            cout,
            cfg.kernels[l],
            &da,
            l > 0,
        );
        put(&format!("conv{l}.weight"), &dw);
        put(&format!("conv{l}.bias"), &db);
        if l > 0 {
            dnext = Some(dx);
        }
    }
    grad
}
