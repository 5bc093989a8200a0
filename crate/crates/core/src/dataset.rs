//! Synthetic footprint generation, ingestion of annotated images, splits,
//! augmentation and the on-disk dataset layout.
//!
//! A dataset directory holds `patches/<id>.png`, `polygons.jsonl` with one
//! [`InstanceRecord`] per line, and `manifest.json`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_box, centroid, init_circle, rasterize, resample, Contour, Point, PolygonRecord};
use crate::patch::Patch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    AxisRect,
    RotatedRect,
    LShape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Gradient,
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    /// Patch side `U = V`.
    pub size: usize,
    pub channels: usize,
    /// Contour nodes `L` of `gt` and `init`.
    pub nodes: usize,
    /// Families drawn uniformly per instance.
    pub shapes: Vec<ShapeFamily>,
    pub textures: Vec<Texture>,
    pub noise_sigma: f64,
    /// Maximum number of distractor blobs per patch.
    pub distractors: usize,
    /// Init centre offset range as a fraction of the patch size.
    pub jitter: f64,
    /// Init radius as a fraction of the patch size.
    pub init_radius: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            size: 128,
            channels: 3,
            nodes: 60,
            shapes: vec![ShapeFamily::AxisRect, ShapeFamily::RotatedRect, ShapeFamily::LShape],
            textures: vec![Texture::Flat, Texture::Gradient, Texture::Speckle],
            noise_sigma: 0.1,
            distractors: 2,
            jitter: 0.1,
            init_radius: 0.15,
            seed: 0,
            id_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 16 {
            return bad(format!("patch size must be >= 16, got {}", self.size));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.nodes < 8 {
            return bad(format!("need at least 8 contour nodes, got {}", self.nodes));
        }
        if self.shapes.is_empty() || self.textures.is_empty() {
            return bad("shape and texture lists must be non-empty".into());
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..0.3).contains(&self.jitter) {
            return bad("noise_sigma must be >= 0 and jitter in [0, 0.3)".into());
        }
        if !(self.init_radius > 0.0 && self.init_radius < 0.5) {
            return bad(format!("init_radius must be in (0, 0.5), got {}", self.init_radius));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub source: String,
    /// Patch pixels per world pixel.
    pub scale_factor: f64,
    /// World position of patch coordinate `(0, 0)`.
    pub origin: Point,
    /// True when the crop window left the image and was edge-padded.
    #[serde(default)]
    pub padded: bool,
}

impl InstanceMeta {
    pub fn to_world(&self, p: Point) -> Point {
        Point::new(
            self.origin.u + p.u / self.scale_factor,
            self.origin.v + p.v / self.scale_factor,
        )
    }

    pub fn to_patch(&self, p: Point) -> Point {
        Point::new(
            (p.u - self.origin.u) * self.scale_factor,
            (p.v - self.origin.v) * self.scale_factor,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub patch: Patch,
    /// Annotated outline with its original vertices, patch coordinates.
    pub gt_polygon: Vec<Point>,
    /// `gt_polygon` resampled to `L` nodes.
    pub gt: Contour,
    pub init: Contour,
    pub meta: InstanceMeta,
}

/// Everything about an instance except its pixels; one line of
/// `polygons.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub gt_polygon: Vec<Point>,
    pub gt: Contour,
    pub init: Contour,
    pub meta: InstanceMeta,
}

impl Instance {
    pub fn record(&self) -> InstanceRecord {
        InstanceRecord {
            id: self.id.clone(),
            gt_polygon: self.gt_polygon.clone(),
            gt: self.gt.clone(),
            init: self.init.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_record(rec: InstanceRecord, patch: Patch) -> Result<Instance> {
        let inst = Instance {
            id: rec.id,
            patch,
            gt_polygon: rec.gt_polygon,
            gt: rec.gt,
            init: rec.init,
            meta: rec.meta,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn width(&self) -> usize {
        self.patch.width()
    }

    pub fn height(&self) -> usize {
        self.patch.height()
    }

    /// Ground-truth outline area in world units.
    pub fn world_area(&self) -> f64 {
        crate::geometry::signed_area(&self.gt_polygon).abs() / self.meta.scale_factor.powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        let inside = |p: &Point| p.u >= -0.5 && p.v >= -0.5 && p.u <= w as f64 - 0.5 && p.v <= h as f64 - 0.5;
        if !self.gt_polygon.iter().all(inside) || !self.gt.nodes().iter().all(inside) {
            return Err(Error::Dataset(format!("{}: ground truth leaves the patch", self.id)));
        }
        if !self.init.within(w, h) {
            return Err(Error::Dataset(format!("{}: init contour leaves the patch", self.id)));
        }
        if !(self.meta.scale_factor > 0.0) {
            return Err(Error::Dataset(format!("{}: scale_factor must be > 0", self.id)));
        }
        Ok(())
    }

    /// Rotates by `quarter_turns · 90°` and then optionally mirrors
    /// left-right. Contours keep their orientation sign; world mapping is
    /// not updated, so augmented copies are for training only.
    pub fn augmented(&self, quarter_turns: u8, flip: bool) -> Instance {
        assert_eq!(self.width(), self.height(), "augmentation needs square patches");
        let n = self.width() as f64 - 1.0;
        let turn = |p: Point| Point::new(n - p.v, p.u);
        let map = |mut p: Point| {
            for _ in 0..quarter_turns % 4 {
                p = turn(p);
            }
            if flip {
                p.u = n - p.u;
            }
            p
        };
        let remap_patch = |patch: &Patch| {
            // Inverse of `map` for looking up source pixels.
            let inv = |u: f64, v: f64| {
                let mut p = Point::new(if flip { n - u } else { u }, v);
                for _ in 0..quarter_turns % 4 {
                    p = Point::new(p.v, n - p.u);
                }
                (p.u, p.v)
            };
            patch.remap(patch.width(), patch.height(), inv)
        };
        let fix = |c: Contour| if flip { c.reversed() } else { c };
        let mut gt_polygon: Vec<Point> = self.gt_polygon.iter().map(|&p| map(p)).collect();
        if flip {
            gt_polygon.reverse();
        }
        Instance {
            id: self.id.clone(),
            patch: remap_patch(&self.patch),
            gt_polygon,
            gt: fix(self.gt.map_points(map)),
            init: fix(self.init.map_points(map)),
            meta: self.meta.clone(),
        }
    }
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Outline of one synthetic building in patch coordinates.
fn synth_polygon(family: ShapeFamily, size: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let c = size / 2.0;
    let centre = Point::new(
        c + rng.random_range(-0.08..0.08) * size,
        c + rng.random_range(-0.08..0.08) * size,
    );
    // Axis-aligned edges sit on pixel boundaries so the raster is crisp.
    let snap = |x: f64| x.round() + 0.5;
    match family {
        ShapeFamily::AxisRect => {
            let w = rng.random_range(0.35..0.62) * size;
            let h = rng.random_range(0.35..0.62) * size;
            let (u0, u1) = (snap(centre.u - w / 2.0), snap(centre.u + w / 2.0));
            let (v0, v1) = (snap(centre.v - h / 2.0), snap(centre.v + h / 2.0));
            vec![
                Point::new(u0, v0),
                Point::new(u0, v1),
                Point::new(u1, v1),
                Point::new(u1, v0),
            ]
        }
        ShapeFamily::RotatedRect => {
            let w = rng.random_range(0.32..0.55) * size;
            let h = rng.random_range(0.32..0.55) * size;
            let theta: f64 = rng.random_range(-0.7..0.7);
            let (s, co) = theta.sin_cos();
            [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0)]
                .iter()
                .map(|&(a, b)| {
                    let (x, y) = (a * w / 2.0, b * h / 2.0);
                    Point::new(centre.u + co * x - s * y, centre.v + s * x + co * y)
                })
                .collect()
        }
        ShapeFamily::LShape => {
            let w = rng.random_range(0.42..0.64) * size;
            let h = rng.random_range(0.42..0.64) * size;
            let (u0, u1) = (snap(centre.u - w / 2.0), snap(centre.u + w / 2.0));
            let (v0, v1) = (snap(centre.v - h / 2.0), snap(centre.v + h / 2.0));
            let um = snap(u0 + rng.random_range(0.4..0.6) * (u1 - u0));
            let vm = snap(v0 + rng.random_range(0.4..0.6) * (v1 - v0));
            // Notch cut from the top-right corner, then rotated by a random
            // number of quarter turns about the centre.
            let base = [
                Point::new(u0, v0),
                Point::new(u0, v1),
                Point::new(u1, v1),
                Point::new(u1, vm),
                Point::new(um, vm),
                Point::new(um, v0),
            ];
            let (cu, cv) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
            let turns = rng.random_range(0..4);
            base.iter()
                .map(|&p| {
                    let mut q = p;
                    for _ in 0..turns {
                        q = Point::new(cu - (q.v - cv), cv + (q.u - cu));
                    }
                    q
                })
                .collect()
        }
    }
}

fn synth_instance(cfg: &SynthConfig, index: usize) -> Result<Instance> {
    let mut rng = instance_rng(cfg.seed, index);
    let size = cfg.size;
    let family = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let texture = cfg.textures[rng.random_range(0..cfg.textures.len())];
    let mut polygon = synth_polygon(family, size as f64, &mut rng);
    if crate::geometry::signed_area(&polygon) < 0.0 {
        polygon.reverse();
    }
    let mask = rasterize(&polygon, size, size);

    let bg: f64 = rng.random_range(0.1..0.35);
    let fg: f64 = bg + rng.random_range(0.35..0.55);
    let tint: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(-0.05..0.05)).collect();
    let ramp_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let ramp = |u: usize, v: usize| {
        let (x, y) = (u as f64 / size as f64 - 0.5, v as f64 / size as f64 - 0.5);
        0.15 * (x * ramp_dir.cos() + y * ramp_dir.sin())
    };
    let speckle: Vec<f64> = (0..size * size / 4 + size).map(|_| rng.random_range(-0.08..0.08)).collect();

    let mut blobs = Vec::new();
    for _ in 0..rng.random_range(0..=cfg.distractors) {
        let r = rng.random_range(0.04..0.08) * size as f64;
        let p = Point::new(rng.random_range(r..size as f64 - r), rng.random_range(r..size as f64 - r));
        let lo = bounding_box(&polygon);
        let clear = p.u + r < lo.0.u - 2.0 || p.u - r > lo.1.u + 2.0 || p.v + r < lo.0.v - 2.0 || p.v - r > lo.1.v + 2.0;
        if clear {
            blobs.push((p, r, bg + rng.random_range(0.1..0.25)));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-300)).expect("finite sigma");
    let mut patch = Patch::zeros(size, size, cfg.channels);
    for v in 0..size {
        for u in 0..size {
            let mut base = if mask.get(u, v) { fg } else { bg };
            for &(p, r, level) in &blobs {
                if Point::new(u as f64, v as f64).dist(p) <= r {
                    base = level;
                }
            }
            base += match texture {
                Texture::Flat => 0.0,
                Texture::Gradient => ramp(u, v),
                Texture::Speckle => speckle[(v / 2) * (size / 2 + 1) + u / 2],
            };
            for (c, t) in tint.iter().enumerate() {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                patch.set(c, u, v, base + t + n);
            }
        }
    }

    let nodes = cfg.nodes;
    let gt = resample(&polygon, nodes)?;
    let j = cfg.jitter * size as f64;
    let mut centre = centroid(&polygon);
    if j > 0.0 {
        centre.u += rng.random_range(-j..j);
        centre.v += rng.random_range(-j..j);
    }
    let init = init_circle(centre, cfg.init_radius * size as f64, nodes, size, size)?;
    let inst = Instance {
        id: format!("{}-{index:05}", cfg.id_prefix),
        patch: patch.quantized(),
        gt_polygon: polygon,
        gt,
        init,
        meta: InstanceMeta {
            source: "synthetic".into(),
            scale_factor: 1.0,
            origin: Point::new(0.0, 0.0),
            padded: false,
        },
    };
    inst.validate()?;
    Ok(inst)
}

/// `cfg.n` synthetic instances; instance `i` depends only on the seed and
/// `i`, so generation order and threading do not matter.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    (0..cfg.n).into_par_iter().map(|i| synth_instance(cfg, i)).collect()
}

/// Splits into `(first, second)` after a seeded shuffle; the first part
/// gets `round(fractions.0 · n)` items.
pub fn split<T>(items: Vec<T>, fractions: (f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (a, b) = fractions;
    if !(a >= 0.0 && b >= 0.0) || (a + b - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be >= 0 and sum to 1, got ({a}, {b})")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first_n = ((a * n as f64).round() as usize).min(n);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut first = Vec::with_capacity(first_n);
    let mut second = Vec::with_capacity(n - first_n);
    for (k, &i) in order.iter().enumerate() {
        let item = slots[i].take().expect("each index once");
        if k < first_n {
            first.push(item);
        } else {
            second.push(item);
        }
    }
    Ok((first, second))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub size: usize,
    pub channels: usize,
    pub nodes: usize,
    /// Crop side as a multiple of the init polygon's longer bounding-box side.
    pub margin: f64,
    /// Init radius as a fraction of the patch size, used when no init
    /// polygon is given.
    pub init_radius: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            size: 128,
            channels: 3,
            nodes: 60,
            margin: 1.5,
            init_radius: 0.15,
        }
    }
}

/// Square crop window around `nodes` and the resulting patch mapping.
pub fn crop_window(nodes: &[Point], size: usize, margin: f64) -> InstanceMeta {
    let (lo, hi) = bounding_box(nodes);
    let side = margin * (hi.u - lo.u).max(hi.v - lo.v).max(1.0);
    let scale = size as f64 / side;
    let (cu, cv) = ((lo.u + hi.u) / 2.0, (lo.v + hi.v) / 2.0);
    // Patch pixel 0 covers [-0.5, 0.5], so the window's left edge maps to -0.5.
    InstanceMeta {
        source: String::new(),
        scale_factor: scale,
        origin: Point::new(cu - side / 2.0 + 0.5 / scale, cv - side / 2.0 + 0.5 / scale),
        padded: false,
    }
}

/// Image stem of an annotation id: the part before `#`, if any.
fn image_stem(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

fn read_polygon_file(path: &Path) -> Result<Vec<PolygonRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PolygonRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Builds instances from `image_dir/<stem>.png` and polygon files whose
/// records have ids `<stem>` or `<stem>#<k>`, in world pixel coordinates.
/// With `init_file` the crop follows the init polygon of the same id;
/// otherwise it follows the ground truth and the init is a circle at the
/// crop centre.
pub fn ingest(
    image_dir: &Path,
    polygon_file: &Path,
    init_file: Option<&Path>,
    cfg: &IngestConfig,
) -> Result<Vec<Instance>> {
    let gts = read_polygon_file(polygon_file)?;
    let inits: Option<HashMap<String, Vec<Point>>> = match init_file {
        Some(p) => Some(read_polygon_file(p)?.into_iter().map(|r| (r.id, r.nodes)).collect()),
        None => None,
    };
    let mut images: HashMap<String, Patch> = HashMap::new();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(gts.len());
    for rec in gts {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Dataset(format!("duplicate id {}", rec.id)));
        }
        if rec.nodes.len() < 3 {
            return Err(Error::Dataset(format!("{}: polygon needs 3 vertices", rec.id)));
        }
        let stem = image_stem(&rec.id).to_string();
        if !images.contains_key(&stem) {
            let path = image_dir.join(format!("{stem}.png"));
            if !path.exists() {
                return Err(Error::Dataset(format!("{}: no image {}", rec.id, path.display())));
            }
            images.insert(stem.clone(), Patch::load_png(&path, cfg.channels)?);
        }
        let image = &images[&stem];
        let init_world = match &inits {
            Some(map) => Some(
                map.get(&rec.id)
                    .ok_or_else(|| Error::Dataset(format!("{}: no init polygon with this id", rec.id)))?
                    .clone(),
            ),
            None => None,
        };
        let (iw, ih) = (image.width() as f64, image.height() as f64);
        let outside = |p: &Point| p.u < -0.5 || p.v < -0.5 || p.u > iw - 0.5 || p.v > ih - 0.5;
        if rec.nodes.iter().chain(init_world.iter().flatten()).any(outside) {
            return Err(Error::Dataset(format!("{}: polygon outside image", rec.id)));
        }
        let anchor = init_world.as_deref().unwrap_or(&rec.nodes);
        let mut meta = crop_window(anchor, cfg.size, cfg.margin);
        meta.source = format!("{stem}.png");
        let span = cfg.size as f64 / meta.scale_factor;
        let (o, s) = (meta.origin, meta.scale_factor);
        let (left, top) = (o.u - 0.5 / s, o.v - 0.5 / s);
        meta.padded = left < -0.5 || top < -0.5 || left + span > iw - 0.5 || top + span > ih - 0.5;
        let patch = image.remap(cfg.size, cfg.size, |u, v| (o.u + u / s, o.v + v / s));
        let to_patch = |pts: &[Point]| pts.iter().map(|&p| meta.to_patch(p)).collect::<Vec<_>>();
        let gt_polygon = to_patch(&rec.nodes);
        let init = match &init_world {
            Some(pts) => resample(&to_patch(pts), cfg.nodes)?,
            None => {
                let c = (cfg.size as f64 - 1.0) / 2.0;
                init_circle(Point::new(c, c), cfg.init_radius * cfg.size as f64, cfg.nodes, cfg.size, cfg.size)?
            }
        };
        let inst = Instance {
            id: rec.id.clone(),
            patch,
            gt: resample(&gt_polygon, cfg.nodes)?,
            gt_polygon,
            init: init.clamped(cfg.size, cfg.size),
            meta,
        };
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub nodes: usize,
    /// Generator or ingestion settings, stored verbatim.
    pub source: serde_json::Value,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Dataset with the given split; every instance must share one shape.
    pub fn new(
        train: Vec<Instance>,
        test: Vec<Instance>,
        source: serde_json::Value,
    ) -> Result<Dataset> {
        let first = train
            .first()
            .or(test.first())
            .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
        let (w, h, c, l) = (first.width(), first.height(), first.patch.channels(), first.gt.len());
        for inst in train.iter().chain(&test) {
            if (inst.width(), inst.height(), inst.patch.channels(), inst.gt.len(), inst.init.len()) != (w, h, c, l, l) {
                return Err(Error::Dataset(format!("{}: shape differs from the rest of the dataset", inst.id)));
            }
        }
        let manifest = Manifest {
            format: DATASET_FORMAT,
            width: w,
            height: h,
            channels: c,
            nodes: l,
            source,
            train: train.iter().map(|i| i.id.clone()).collect(),
            test: test.iter().map(|i| i.id.clone()).collect(),
        };
        let instances = train.into_iter().chain(test).collect();
        let ds = Dataset { manifest, instances };
        ds.check_ids()?;
        Ok(ds)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {}", inst.id)));
            }
        }
        for id in self.manifest.train.iter().chain(&self.manifest.test) {
            if !seen.contains(id.as_str()) {
                return Err(Error::Dataset(format!("manifest lists unknown id {id}")));
            }
        }
        Ok(())
    }

    fn subset(&self, ids: &[String]) -> Vec<&Instance> {
        let by_id: HashMap<&str, &Instance> = self.instances.iter().map(|i| (i.id.as_str(), i)).collect();
        ids.iter().map(|id| by_id[id.as_str()]).collect()
    }

    pub fn train(&self) -> Vec<&Instance> {
        self.subset(&self.manifest.train)
    }

    pub fn test(&self) -> Vec<&Instance> {
        self.subset(&self.manifest.test)
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Writes the directory layout. Each patch goes to a temporary name and
    /// is renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let patches = dir.join("patches");
        fs::create_dir_all(&patches).map_err(|e| Error::io(&patches, e))?;
        self.instances.par_iter().try_for_each(|inst| -> Result<()> {
            let path = patch_path(dir, &inst.id);
            let tmp = path.with_extension("tmp.png");
            inst.patch.save_png(&tmp)?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
        })?;
        let mut lines = String::new();
        for inst in &self.instances {
            lines.push_str(&serde_json::to_string(&inst.record())?);
            lines.push('\n');
        }
        write_atomic(&dir.join("polygons.jsonl"), lines.as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&dir.join("manifest.json"), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Dataset(format!("unsupported dataset format {}", manifest.format)));
        }
        let ppath = dir.join("polygons.jsonl");
        let text = fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let records: Vec<InstanceRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let instances = records
            .into_par_iter()
            .map(|rec| {
                let patch = Patch::load_png(&patch_path(dir, &rec.id), manifest.channels)?;
                if (patch.width(), patch.height()) != (manifest.width, manifest.height) {
                    return Err(Error::Dataset(format!("{}: patch size differs from manifest", rec.id)));
                }
                Instance::from_record(rec, patch)
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { manifest, instances };
        ds.check_ids()?;
        Ok(ds)
    }
}

pub fn patch_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("patches").join(format!("{}.png", id.replace(['/', '#'], "_")))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n,
            size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn clean_rectangle_matches_threshold() {
        let cfg = SynthConfig {
            n: 1,
            size: 64,
            shapes: vec![ShapeFamily::AxisRect],
            textures: vec![Texture::Flat],
            noise_sigma: 0.0,
            distractors: 0,
            ..Default::default()
        };
        let inst = &generate_synthetic(&cfg).unwrap()[0];
        let lo = (0..64 * 64).map(|i| inst.patch.luminance(i % 64, i / 64)).fold(f64::INFINITY, f64::min);
        let hi = (0..64 * 64).map(|i| inst.patch.luminance(i % 64, i / 64)).fold(0.0, f64::max);
        let thr = (lo + hi) / 2.0;
        let bright = crate::geometry::RasterMask::from_fn(64, 64, |u, v| inst.patch.luminance(u, v) > thr);
        assert_eq!(bright.iou(&inst.gt.rasterize(64, 64)), 1.0);
    }

    #[test]
    fn cardinality_unique_ids_and_determinism() {
        let a = generate_synthetic(&small(30)).unwrap();
        let b = generate_synthetic(&small(30)).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), 30);
        let c = generate_synthetic(&SynthConfig { seed: 1, ..small(30) }).unwrap();
        assert_ne!(a[0].patch, c[0].patch);
    }

    #[test]
    fn l_shapes_have_six_vertices_and_positive_area() {
        let cfg = SynthConfig {
            shapes: vec![ShapeFamily::LShape],
            ..small(20)
        };
        for inst in generate_synthetic(&cfg).unwrap() {
            assert_eq!(inst.gt_polygon.len(), 6);
            assert!(crate::geometry::signed_area(&inst.gt_polygon) > 0.0);
            assert!(inst.gt.signed_area() > 0.0);
            assert_eq!(inst.gt.len(), 60);
        }
    }

    #[test]
    fn split_counts_partition_and_determinism() {
        let items: Vec<usize> = (0..168).collect();
        let (a, b) = split(items.clone(), (0.595, 0.405), 3).unwrap();
        assert_eq!((a.len(), b.len()), (100, 68));
        let (a2, _) = split(items.clone(), (0.595, 0.405), 3).unwrap();
        assert_eq!(a, a2);
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split(items, (0.5, 0.6), 0).is_err());
    }

    #[test]
    fn crop_rule_arithmetic() {
        let square = [
            Point::new(80.0, 80.0),
            Point::new(120.0, 80.0),
            Point::new(120.0, 120.0),
            Point::new(80.0, 120.0),
        ];
        let meta = crop_window(&square, 128, 1.5);
        assert!((meta.scale_factor - 128.0 / 60.0).abs() < 1e-12);
        for p in square {
            let back = meta.to_world(meta.to_patch(p));
            assert!(back.dist(p) < 1e-9);
        }
        // The window [70, 130] maps onto [-0.5, 127.5].
        assert!((meta.to_patch(Point::new(70.0, 70.0)).u + 0.5).abs() < 1e-9);
        assert!((meta.to_patch(Point::new(130.0, 130.0)).v - 127.5).abs() < 1e-9);
    }

    #[test]
    fn augmentation_keeps_masks_consistent() {
        let inst = &generate_synthetic(&small(3)).unwrap()[2];
        for turns in 0..4 {
            for flip in [false, true] {
                let a = inst.augmented(turns, flip);
                assert!(a.gt.signed_area() > 0.0);
                assert!((a.gt.signed_area() - inst.gt.signed_area()).abs() < 1e-9);
                // Bright pixels follow the outline.
                let inside = a.gt.rasterize(64, 64);
                let mean_in: f64 = inside.iter_set().map(|(u, v)| a.patch.luminance(u, v)).sum::<f64>() / inside.count() as f64;
                let orig_in: f64 = inst.gt.rasterize(64, 64).iter_set().map(|(u, v)| inst.patch.luminance(u, v)).sum::<f64>()
                    / inside.count() as f64;
                assert!((mean_in - orig_in).abs() < 1e-9, "turns {turns} flip {flip}");
            }
        }
        assert_eq!(inst.augmented(0, false), *inst);
        let twice = inst.augmented(2, true).augmented(2, true);
        assert_eq!(twice.patch, inst.patch);
        for (a, b) in twice.gt.nodes().iter().zip(inst.gt.nodes()) {
            assert!(a.dist(*b) < 1e-9);
        }
    }
}
