//! Closed polygons, their areas, raster masks and overlap.
//!
//! Coordinates follow image conventions: `u` is the column (x, rightwards),
//! `v` the row (y, downwards), origin at the top-left pixel centre. Pixel
//! `(i, j)` has its centre at `(i, j)`, so a patch of `width × height`
//! pixels spans `[0, width-1] × [0, height-1]`.
//!
//! Orientation: the shoelace sum `½ Σ (u_s v_{s+1} - u_{s+1} v_s)` is
//! positive for counter-clockwise polygons in the mathematical sense, e.g.
//! `(0,0) → (1,0) → (1,1) → (0,1)`. [`init_circle`] produces that
//! orientation and the normals `n_s = [v_{s+1}-v_{s-1}, u_{s-1}-u_{s+1}]`
//! then point outwards.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum node count of a contour.
pub const MIN_NODES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub u: f64,
    pub v: f64,
}

impl Point {
    pub const fn new(u: f64, v: f64) -> Self {
        Point { u, v }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.u + (other.u - self.u) * t,
            self.v + (other.v - self.v) * t,
        )
    }

    pub fn clamp(self, width: usize, height: usize) -> Point {
        Point::new(
            self.u.clamp(0.0, width.saturating_sub(1) as f64),
            self.v.clamp(0.0, height.saturating_sub(1) as f64),
        )
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([u, v]: [f64; 2]) -> Self {
        Point { u, v }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.u, p.v]
    }
}

/// Closed polygon with at least [`MIN_NODES`] nodes; node `L-1` connects
/// back to node `0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Contour {
    nodes: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Contour {
    type Error = Error;

    fn try_from(nodes: Vec<Point>) -> Result<Self> {
        Contour::new(nodes)
    }
}

impl From<Contour> for Vec<Point> {
    fn from(c: Contour) -> Self {
        c.nodes
    }
}

impl Contour {
    pub fn new(nodes: Vec<Point>) -> Result<Self> {
        if nodes.len() < MIN_NODES {
            return Err(Error::TooFewNodes(nodes.len()));
        }
        Ok(Contour { nodes })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Contour::new(coords.iter().map(|&(u, v)| Point::new(u, v)).collect())
    }

    /// Builds a contour from separate coordinate columns.
    pub fn from_columns(u: &[f64], v: &[f64]) -> Result<Self> {
        if u.len() != v.len() {
            return Err(Error::Shape(format!(
                "coordinate columns differ in length: {} vs {}",
                u.len(),
                v.len()
            )));
        }
        Contour::new(u.iter().zip(v).map(|(&u, &v)| Point::new(u, v)).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    /// Node `s` with circular indexing; `s` may be negative or exceed `L`.
    #[inline]
    pub fn node(&self, s: isize) -> Point {
        let n = self.nodes.len() as isize;
        self.nodes[s.rem_euclid(n) as usize]
    }

    pub fn us(&self) -> Vec<f64> {
        self.nodes.iter().map(|p| p.u).collect()
    }

    pub fn vs(&self) -> Vec<f64> {
        self.nodes.iter().map(|p| p.v).collect()
    }

    pub fn clamped(&self, width: usize, height: usize) -> Contour {
        Contour {
            nodes: self.nodes.iter().map(|p| p.clamp(width, height)).collect(),
        }
    }

    pub fn reversed(&self) -> Contour {
        let mut nodes = self.nodes.clone();
        nodes.reverse();
        Contour { nodes }
    }

    /// Rotates node order so that node `k` becomes node `0`.
    pub fn shifted(&self, k: usize) -> Contour {
        let mut nodes = self.nodes.clone();
        nodes.rotate_left(k % self.nodes.len());
        Contour { nodes }
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Contour {
        Contour {
            nodes: self.nodes.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.nodes)
    }

    pub fn perimeter(&self) -> f64 {
        perimeter(&self.nodes)
    }

    pub fn rasterize(&self, width: usize, height: usize) -> RasterMask {
        rasterize(&self.nodes, width, height)
    }

    pub fn is_finite(&self) -> bool {
        self.nodes.iter().all(|p| p.is_finite())
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        let (w, h) = (width.saturating_sub(1) as f64, height.saturating_sub(1) as f64);
        self.nodes
            .iter()
            .all(|p| (0.0..=w).contains(&p.u) && (0.0..=h).contains(&p.v))
    }
}

/// Shoelace area, positive for counter-clockwise node order.
pub fn signed_area(nodes: &[Point]) -> f64 {
    let n = nodes.len();
    let mut acc = 0.0;
    for s in 0..n {
        let a = nodes[s];
        let b = nodes[(s + 1) % n];
        acc += a.u * b.v - b.u * a.v;
    }
    0.5 * acc
}

pub fn perimeter(nodes: &[Point]) -> f64 {
    let n = nodes.len();
    (0..n).map(|s| nodes[s].dist(nodes[(s + 1) % n])).sum()
}

/// Area-weighted centroid; falls back to the vertex mean for degenerate
/// polygons.
pub fn centroid(nodes: &[Point]) -> Point {
    let n = nodes.len();
    let area = signed_area(nodes);
    if area.abs() < 1e-12 {
        let (su, sv) = nodes
            .iter()
            .fold((0.0, 0.0), |(su, sv), p| (su + p.u, sv + p.v));
        return Point::new(su / n as f64, sv / n as f64);
    }
    let (mut cu, mut cv) = (0.0, 0.0);
    for s in 0..n {
        let a = nodes[s];
        let b = nodes[(s + 1) % n];
        let cross = a.u * b.v - b.u * a.v;
        cu += (a.u + b.u) * cross;
        cv += (a.v + b.v) * cross;
    }
    Point::new(cu / (6.0 * area), cv / (6.0 * area))
}

/// Axis-aligned bounding box as `(min, max)`.
pub fn bounding_box(nodes: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in nodes {
        lo.u = lo.u.min(p.u);
        lo.v = lo.v.min(p.v);
        hi.u = hi.u.max(p.u);
        hi.v = hi.v.max(p.v);
    }
    (lo, hi)
}

/// Boolean image of the pixels whose centres lie inside a polygon.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl RasterMask {
    pub fn empty(width: usize, height: usize) -> Self {
        RasterMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                bits.push(f(u, v));
            }
        }
        RasterMask {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Iterates over `(u, v)` of set pixels.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Intersection over union; two empty masks agree perfectly.
    pub fn iou(&self, other: &RasterMask) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask dimensions differ"
        );
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Even-odd scanline fill sampled at pixel centres.
///
/// An edge crosses row `y` when `min(v_a, v_b) <= y < max(v_a, v_b)`;
/// pixel `u` is inside when an odd number of crossings lie strictly to its
/// right. This is exactly the classic crossing-number test evaluated at
/// every pixel centre.
pub fn rasterize(nodes: &[Point], width: usize, height: usize) -> RasterMask {
    let mut mask = RasterMask::empty(width, height);
    let n = nodes.len();
    if n < 3 || width == 0 || height == 0 {
        return mask;
    }
    let (lo, hi) = bounding_box(nodes);
    if !(lo.v.is_finite() && hi.v.is_finite()) {
        return mask;
    }
    let v_start = lo.v.ceil().max(0.0) as usize;
    let v_end = (hi.v.floor().min(height as f64 - 1.0)).max(-1.0);
    if v_end < 0.0 {
        return mask;
    }
    let v_end = v_end as usize;
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for row in v_start..=v_end {
        let y = row as f64;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (pi, pj) = (nodes[i], nodes[j]);
            if (pi.v > y) != (pj.v > y) {
                xs.push((pj.u - pi.u) * (y - pi.v) / (pj.v - pi.v) + pi.u);
            }
            j = i;
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        let base = row * width;
        for pair in xs.chunks_exact(2) {
            let start = pair[0].ceil().max(0.0);
            let stop = pair[1].ceil().min(width as f64);
            if stop <= start {
                continue;
            }
            for u in start as usize..stop as usize {
                mask.bits[base + u] = true;
            }
        }
    }
    mask
}

/// Raster IoU of two polygons on a `width × height` grid.
pub fn iou(a: &Contour, b: &Contour, width: usize, height: usize) -> f64 {
    a.rasterize(width, height).iou(&b.rasterize(width, height))
}

/// `nodes` points equally spaced on a circle, counter-clockwise, clamped to
/// the image.
pub fn init_circle(
    center: Point,
    radius: f64,
    nodes: usize,
    width: usize,
    height: usize,
) -> Result<Contour> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("circle radius must be > 0, got {radius}")));
    }
    if nodes < MIN_NODES {
        return Err(Error::TooFewNodes(nodes));
    }
    let pts = (0..nodes)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / nodes as f64;
            Point::new(
                center.u + radius * theta.cos(),
                center.v + radius * theta.sin(),
            )
            .clamp(width, height)
        })
        .collect();
    Contour::new(pts)
}

/// Resamples a closed polygon to `nodes` points while keeping every
/// original vertex.
///
/// Extra nodes are distributed over edges in proportion to edge length
/// (largest remainder) and spaced evenly along each edge, so the resampled
/// contour traces exactly the same outline.
pub fn resample(polygon: &[Point], nodes: usize) -> Result<Contour> {
    let m = polygon.len();
    if nodes < MIN_NODES {
        return Err(Error::TooFewNodes(nodes));
    }
    if m < 3 {
        return Err(Error::Shape(format!("polygon needs 3 vertices, got {m}")));
    }
    if m > nodes {
        return resample_arc_length(polygon, nodes);
    }
    let lengths: Vec<f64> = (0..m).map(|i| polygon[i].dist(polygon[(i + 1) % m])).collect();
    let total: f64 = lengths.iter().sum();
    if total <= 0.0 {
        return Err(Error::Shape("polygon has zero perimeter".into()));
    }
    let extra = nodes - m;
    let mut counts = vec![1usize; m];
    let quotas: Vec<f64> = lengths.iter().map(|l| l / total * extra as f64).collect();
    let mut assigned = 0;
    for (c, q) in counts.iter_mut().zip(&quotas) {
        let whole = q.floor() as usize;
        *c += whole;
        assigned += whole;
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(extra - assigned) {
        counts[i] += 1;
    }
    let mut pts = Vec::with_capacity(nodes);
    for i in 0..m {
        let (a, b) = (polygon[i], polygon[(i + 1) % m]);
        for k in 0..counts[i] {
            pts.push(a.lerp(b, k as f64 / counts[i] as f64));
        }
    }
    Contour::new(pts)
}

/// Plain equal-arc-length resampling starting at vertex 0.
pub fn resample_arc_length(polygon: &[Point], nodes: usize) -> Result<Contour> {
    let m = polygon.len();
    let total = perimeter(polygon);
    if total <= 0.0 {
        return Err(Error::Shape("polygon has zero perimeter".into()));
    }
    let step = total / nodes as f64;
    let mut pts = Vec::with_capacity(nodes);
    let mut edge = 0;
    let mut edge_start = 0.0;
    let mut edge_len = polygon[0].dist(polygon[1 % m]);
    for k in 0..nodes {
        let target = k as f64 * step;
        while target > edge_start + edge_len && edge < m - 1 {
            edge_start += edge_len;
            edge += 1;
            edge_len = polygon[edge].dist(polygon[(edge + 1) % m]);
        }
        let t = if edge_len > 0.0 {
            ((target - edge_start) / edge_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        pts.push(polygon[edge].lerp(polygon[(edge + 1) % m], t));
    }
    Contour::new(pts)
}

/// One polygon in the interchange format `{"id": ..., "nodes": [[u, v], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonRecord {
    pub id: String,
    pub nodes: Vec<Point>,
}

impl PolygonRecord {
    pub fn new(id: impl Into<String>, nodes: &[Point]) -> Self {
        PolygonRecord {
            id: id.into(),
            nodes: nodes.to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn square(lo: f64, hi: f64) -> Contour {
        Contour::from_coords(&[(lo, lo), (hi, lo), (hi, hi), (lo, hi)]).unwrap()
    }

    #[test]
    fn unit_square_area() {
        let c = Contour::from_coords(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).unwrap();
        assert_eq!(c.signed_area(), 1.0);
        assert_eq!(c.reversed().signed_area(), -1.0);
    }

    #[test]
    fn collinear_polygon_has_zero_area() {
        let c = Contour::from_coords(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]).unwrap();
        assert_eq!(c.signed_area(), 0.0);
    }

    #[test]
    fn rejects_short_contours() {
        assert!(matches!(
            Contour::from_coords(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]),
            Err(Error::TooFewNodes(3))
        ));
    }

    #[test]
    fn square_over_nine_centres() {
        let mask = square(0.5, 3.5).rasterize(8, 8);
        assert_eq!(mask.count(), 9);
        for v in 0..8 {
            for u in 0..8 {
                assert_eq!(mask.get(u, v), (1..=3).contains(&u) && (1..=3).contains(&v));
            }
        }
    }

    #[test]
    fn sub_pixel_polygon_is_empty() {
        let c = square(2.1, 2.9);
        assert_eq!(c.rasterize(8, 8).count(), 0);
    }

    #[test]
    fn iou_cases() {
        let a = square(0.5, 4.5);
        assert_eq!(iou(&a, &a, 16, 16), 1.0);
        let far = square(8.5, 12.5);
        assert_eq!(iou(&a, &far, 16, 16), 0.0);
        // 4x4 square shifted by two columns overlaps half of each
        let shifted = a.map_points(|p| Point::new(p.u + 2.0, p.v));
        assert_relative_eq!(iou(&a, &shifted, 16, 16), 1.0 / 3.0);
    }

    #[test]
    fn empty_masks_agree() {
        let a = square(2.1, 2.9);
        assert_eq!(iou(&a, &a, 8, 8), 1.0);
    }

    #[test]
    fn circle_cardinal_points() {
        let c = init_circle(Point::new(64.0, 64.0), 20.0, 4, 128, 128).unwrap();
        let want = [(84.0, 64.0), (64.0, 84.0), (44.0, 64.0), (64.0, 44.0)];
        for (p, (u, v)) in c.nodes().iter().zip(want) {
            assert_relative_eq!(p.u, u, epsilon = 1e-12);
            assert_relative_eq!(p.v, v, epsilon = 1e-12);
        }
        assert!(c.signed_area() > 0.0);
    }

    #[test]
    fn circle_spacing_is_constant() {
        let c = init_circle(Point::new(50.3, 61.7), 17.0, 60, 128, 128).unwrap();
        let d0 = c.node(0).dist(c.node(1));
        for s in 0..60 {
            assert!((c.node(s).dist(c.node(s + 1)) - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn circle_is_clamped() {
        let c = init_circle(Point::new(2.0, 2.0), 10.0, 16, 64, 64).unwrap();
        assert!(c.nodes().iter().all(|p| p.u >= 0.0 && p.v >= 0.0));
        assert!(init_circle(Point::new(2.0, 2.0), 0.0, 16, 64, 64).is_err());
    }

    #[test]
    fn resample_keeps_vertices_and_outline() {
        let poly = [
            Point::new(10.5, 10.5),
            Point::new(40.5, 10.5),
            Point::new(40.5, 30.5),
            Point::new(10.5, 30.5),
        ];
        let c = resample(&poly, 60).unwrap();
        assert_eq!(c.len(), 60);
        for v in &poly {
            assert!(c.nodes().contains(v));
        }
        assert_relative_eq!(c.signed_area(), signed_area(&poly), epsilon = 1e-9);
        assert_eq!(c.rasterize(64, 64), rasterize(&poly, 64, 64));
    }

    #[test]
    fn arc_length_resampling_is_even() {
        let poly = [
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(0.0, 10.0),
        ];
        let c = resample_arc_length(&poly, 8).unwrap();
        for s in 0..8 {
            assert_relative_eq!(c.node(s).dist(c.node(s + 1)), 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn polygon_record_json() {
        let rec = PolygonRecord::new("b1", &[Point::new(1.0, 2.5), Point::new(3.0, 4.0)]);
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(s, r#"{"id":"b1","nodes":[[1.0,2.5],[3.0,4.0]]}"#);
        assert_eq!(serde_json::from_str::<PolygonRecord>(&s).unwrap(), rec);
    }

    fn star_polygon() -> impl Strategy<Value = Contour> {
        (5usize..14, any::<u64>()).prop_map(|(n, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let step = 2.0 * PI / n as f64;
            let angles: Vec<f64> = (0..n)
                .map(|k| (k as f64 + rng.random_range(0.0..0.8)) * step)
                .collect();
            let pts = angles
                .iter()
                .map(|a| {
                    let r = rng.random_range(4.0..20.0);
                    Point::new(24.0 + r * a.cos(), 24.0 + r * a.sin())
                })
                .collect();
            Contour::new(pts).unwrap()
        })
    }

    proptest! {
        #[test]
        fn shift_invariance(c in star_polygon(), k in 0usize..20) {
            let s = c.shifted(k);
            prop_assert!((s.signed_area() - c.signed_area()).abs() < 1e-9);
            prop_assert_eq!(s.rasterize(48, 48), c.rasterize(48, 48));
        }

        #[test]
        fn reversal_negates_area_keeps_mask(c in star_polygon()) {
            let r = c.reversed();
            prop_assert!((r.signed_area() + c.signed_area()).abs() < 1e-9);
            prop_assert_eq!(r.rasterize(48, 48), c.rasterize(48, 48));
        }

        #[test]
        fn area_agrees_with_pixel_count(c in star_polygon()) {
            let count = c.rasterize(48, 48).count() as f64;
            prop_assert!((count - c.signed_area().abs()).abs() <= c.perimeter() / 2.0);
        }

        #[test]
        fn iou_symmetric(a in star_polygon(), b in star_polygon()) {
            let ab = iou(&a, &b, 48, 48);
            prop_assert_eq!(ab, iou(&b, &a, 48, 48));
            let same = a.rasterize(48, 48) == b.rasterize(48, 48);
            prop_assert_eq!(ab == 1.0, same);
        }
    }
}
