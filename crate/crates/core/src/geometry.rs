//! BEV grids, rotated boxes, rasterization, rigid transforms, IoU and NMS.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Wraps an angle into `(−π, π]`.
pub fn normalize_angle(r: f64) -> f64 {
    let mut a = r % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// A 3D box: center, full extents, yaw about the vertical axis and class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub r: f64,
    pub c: u32,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, r: f64, c: u32) -> Self {
        Self { x, y, z, l, w, h, r: normalize_angle(r), c }
    }

    /// Axis-aligned 2D footprint helper for tests and examples.
    pub fn bev(x: f64, y: f64, l: f64, w: f64, r: f64) -> Self {
        Self::new(x, y, 0.75, l, w, 1.5, r, 0)
    }

    pub fn is_valid(&self) -> bool {
        self.l > 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.r > -PI
            && self.r <= PI
            && [self.x, self.y, self.z, self.l, self.w, self.h, self.r].iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 8] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.r, self.c as f64]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7].round().max(0.0) as u32)
    }

    pub fn footprint_area(&self) -> f64 {
        self.l * self.w
    }

    /// BEV corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.r.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[u, v]| [self.x + c * u - s * v, self.y + s * u + c * v])
    }

    /// Whether a BEV point lies inside or on the footprint.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.r.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0
    }

    /// Radius of the circumscribed BEV circle.
    pub fn radius(&self) -> f64 {
        0.5 * (self.l * self.l + self.w * self.w).sqrt()
    }
}

/// A 2D rigid pose of an agent frame in the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// Point in this frame to world coordinates.
    pub fn to_world(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    /// World point to this frame.
    pub fn from_world(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Pose of `other` expressed in this frame.
    pub fn relative(&self, other: &Pose) -> Pose {
        let (x, y) = self.from_world(other.x, other.y);
        Pose::new(x, y, other.yaw - self.yaw)
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Re-expresses boxes given in frame `from` in frame `to` (both world poses).
pub fn transform_boxes(boxes: &[Box3D], from: &Pose, to: &Pose) -> Vec<Box3D> {
    if from == to {
        return boxes.to_vec();
    }
    boxes
        .iter()
        .map(|b| {
            let (wx, wy) = from.to_world(b.x, b.y);
            let (x, y) = to.from_world(wx, wy);
            Box3D { x, y, r: normalize_angle(b.r + from.yaw - to.yaw), ..*b }
        })
        .collect()
}

/// Adds `N(0, σ_p²)` to x and y and `N(0, σ_r²)` to yaw.
///
/// Always consumes exactly three standard-normal draws, so equal seeds give
/// noise that scales linearly with the sigmas.
pub fn perturb_pose<R: Rng + ?Sized>(p: &Pose, sigma_p: f64, sigma_r: f64, rng: &mut R) -> Pose {
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    let nr: f64 = StandardNormal.sample(rng);
    if sigma_p == 0.0 && sigma_r == 0.0 {
        return *p;
    }
    Pose::new(p.x + sigma_p * nx, p.y + sigma_p * ny, p.yaw + sigma_r * nr)
}

/// The discretized BEV perception area of one agent, in its own frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    pub channels: usize,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self { x_min: -32.0, x_max: 32.0, y_min: -16.0, y_max: 16.0, cell: 1.0, channels: 32 }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        let h = (self.x_max - self.x_min) / self.cell;
        let w = (self.y_max - self.y_min) / self.cell;
        let integral = |v: f64| v >= 1.0 && (v - v.round()).abs() < 1e-9;
        if !(self.cell > 0.0 && integral(h) && integral(w) && self.channels > 0) {
            return Err(Error::Invalid(format!("grid extents must be whole multiples of the cell: {self:?}")));
        }
        Ok(())
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    /// Cells along x.
    pub fn height(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    /// Cells along y.
    pub fn width(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.height() * self.width()
    }

    #[inline]
    pub fn index(&self, xc: usize, yc: usize) -> usize {
        xc * self.width() + yc
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width(), index % self.width())
    }

    pub fn cell_center(&self, xc: usize, yc: usize) -> (f64, f64) {
        (self.x_min + (xc as f64 + 0.5) * self.cell, self.y_min + (yc as f64 + 0.5) * self.cell)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Cell holding a point, if inside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let xc = ((x - self.x_min) / self.cell).floor() as usize;
        let yc = ((y - self.y_min) / self.cell).floor() as usize;
        Some((xc.min(self.height() - 1), yc.min(self.width() - 1)))
    }
}

/// A real-valued `H × W × d` array over a grid, stored as `(H·W) × d` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: BevGridSpec,
    pub values: Matrix,
}

impl FeatureMap {
    pub fn new(grid: BevGridSpec, values: Matrix) -> Result<Self> {
        if values.shape() != (grid.num_cells(), grid.channels) {
            return Err(Error::Shape(format!(
                "feature values {:?} do not match grid {}x{}x{}",
                values.shape(),
                grid.height(),
                grid.width(),
                grid.channels
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: BevGridSpec) -> Self {
        Self { values: Matrix::zeros(grid.num_cells(), grid.channels), grid }
    }

    pub fn channels(&self) -> usize {
        self.grid.channels
    }

    pub fn cell(&self, xc: usize, yc: usize) -> &[f64] {
        self.values.row(self.grid.index(xc, yc))
    }

    pub fn is_finite(&self) -> bool {
        self.values.all_finite()
    }
}

/// Grid cells whose centres lie inside the box footprint, in row-major order.
pub fn cells_of_box(b: &Box3D, grid: &BevGridSpec) -> Vec<(usize, usize)> {
    let rad = b.radius();
    let lo_x = ((b.x - rad - grid.x_min) / grid.cell - 0.5).floor().max(0.0) as usize;
    let lo_y = ((b.y - rad - grid.y_min) / grid.cell - 0.5).floor().max(0.0) as usize;
    let hi_x = ((b.x + rad - grid.x_min) / grid.cell).ceil();
    let hi_y = ((b.y + rad - grid.y_min) / grid.cell).ceil();
    if hi_x < 0.0 || hi_y < 0.0 {
        return Vec::new();
    }
    let hi_x = (hi_x as usize).min(grid.height());
    let hi_y = (hi_y as usize).min(grid.width());
    let mut out = Vec::new();
    for xc in lo_x..hi_x {
        for yc in lo_y..hi_y {
            let (cx, cy) = grid.cell_center(xc, yc);
            if b.contains_point(cx, cy) {
                out.push((xc, yc));
            }
        }
    }
    out
}

/// Flat row indices of [`cells_of_box`].
pub fn cell_indices_of_box(b: &Box3D, grid: &BevGridSpec) -> Vec<usize> {
    cells_of_box(b, grid).into_iter().map(|(x, y)| grid.index(x, y)).collect()
}

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Sutherland–Hodgman clipping of `subject` by a convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection area of two BEV footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    let rr = a.radius() + b.radius();
    if d2 > rr * rr {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.corners(), &b.corners())).max(0.0)
}

/// Intersection over union of BEV footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.footprint_area() + b.footprint_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Sinusoidal embedding of integer cell coordinates.
///
/// The first `dim/2` entries encode `x_c`, the rest `y_c`; within each half,
/// entry pairs are `(sin(p·ω_i), cos(p·ω_i))` with `ω_i = 10000^(−2i/(dim/2))`.
pub fn sinusoidal_pe(xc: usize, yc: usize, dim: usize) -> Vec<f64> {
    assert!(dim > 0 && dim % 4 == 0, "positional embedding width must be divisible by 4");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for pos in [xc as f64, yc as f64] {
        for i in 0..half / 2 {
            let omega = 10000f64.powf(-(2.0 * i as f64) / half as f64);
            out.push((pos * omega).sin());
            out.push((pos * omega).cos());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: Box3D, score: f64) -> Self {
        Self { bbox, score }
    }
}

/// Greedy non-maximum suppression on BEV IoU.
///
/// Candidates are visited by descending score (ties by input order); a
/// candidate is dropped if its IoU with any kept box exceeds `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if keep.iter().all(|k| bev_iou(&k.bbox, &d.bbox) <= iou_thr) {
            keep.push(*d);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_grid() -> BevGridSpec {
        BevGridSpec { x_min: -8.0, x_max: 8.0, y_min: -8.0, y_max: 8.0, cell: 1.0, channels: 4 }
    }

    #[test]
    fn angle_normalization_boundary() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5 - 4.0 * PI) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corner_centred_box_covers_four_cells() {
        let b = Box3D::bev(0.0, 0.0, 2.0, 2.0, 0.0);
        let mut cells = cells_of_box(&b, &unit_grid());
        cells.sort();
        assert_eq!(cells, vec![(7, 7), (7, 8), (8, 7), (8, 8)]);
    }

    #[test]
    fn quarter_turn_equals_swapped_extent() {
        let g = unit_grid();
        let a = Box3D::bev(0.3, -0.2, 4.6, 1.9, PI / 2.0);
        let b = Box3D::bev(0.3, -0.2, 1.9, 4.6, 0.0);
        assert_eq!(cells_of_box(&a, &g), cells_of_box(&b, &g));
    }

    #[test]
    fn box_outside_grid_has_no_cells() {
        let b = Box3D::bev(50.0, 0.0, 4.0, 2.0, 0.3);
        assert!(cells_of_box(&b, &unit_grid()).is_empty());
    }

    #[test]
    fn iou_examples() {
        let a = Box3D::bev(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = Box3D::bev(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let c = Box3D::bev(10.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(bev_iou(&a, &c), 0.0);
    }

    #[test]
    fn transform_examples() {
        let boxes = vec![Box3D::bev(3.0, -1.0, 4.0, 2.0, 0.4), Box3D::bev(-5.0, 2.0, 4.5, 1.8, -2.0)];
        let p = Pose::new(1.0, 2.0, 0.7);
        assert_eq!(transform_boxes(&boxes, &p, &p), boxes);

        let flipped = transform_boxes(&boxes, &Pose::identity(), &Pose::new(0.0, 0.0, PI));
        for (a, b) in boxes.iter().zip(&flipped) {
            assert!((a.x + b.x).abs() < 1e-12 && (a.y + b.y).abs() < 1e-12);
            assert!((normalize_angle(b.r - a.r - PI)).abs() < 1e-12);
            assert_eq!((a.z, a.l, a.w, a.h, a.c), (b.z, b.l, b.w, b.h, b.c));
        }

        let q = Pose::new(-7.0, 4.0, -2.5);
        let back = transform_boxes(&transform_boxes(&boxes, &p, &q), &q, &p);
        for (a, b) in boxes.iter().zip(&back) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            assert!(normalize_angle(a.r - b.r).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_noise_zero_sigma_and_determinism() {
        let p = Pose::new(3.0, 4.0, 0.2);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_pose(&p, 0.0, 0.0, &mut r), p);
        let a = perturb_pose(&p, 0.5, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        let b = perturb_pose(&p, 0.5, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn pe_examples() {
        let pe = sinusoidal_pe(0, 0, 16);
        for (i, v) in pe.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let a = sinusoidal_pe(5, 3, 16);
        let b = sinusoidal_pe(5, 11, 16);
        assert_eq!(a[..8], b[..8]);
        assert_ne!(a[8..], b[8..]);
        for pair in sinusoidal_pe(37, 21, 32).chunks(2) {
            assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_examples() {
        let a = Box3D::bev(0.0, 0.0, 4.0, 2.0, 0.0);
        let kept = nms(&[Detection::new(a, 0.8), Detection::new(a, 0.9)], 0.5);
        assert_eq!(kept, vec![Detection::new(a, 0.9)]);
        let b = Box3D::bev(10.0, 0.0, 4.0, 2.0, 0.0);
        let kept = nms(&[Detection::new(a, 0.1), Detection::new(b, 0.2)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.2);
    }

    #[test]
    fn grid_index_round_trip() {
        let g = BevGridSpec::default();
        assert_eq!((g.height(), g.width()), (64, 32));
        for i in [0, 1, 31, 32, 2047] {
            let (x, y) = g.coords(i);
            assert_eq!(g.index(x, y), i);
        }
        assert_eq!(g.locate(-32.0, -16.0), Some((0, 0)));
        assert_eq!(g.locate(32.0, 0.0), None);
        assert!(BevGridSpec { cell: 0.7, ..g }.validate().is_err());
    }
}
