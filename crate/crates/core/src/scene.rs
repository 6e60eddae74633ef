//! Synthetic worlds and heterogeneous sensor simulation.
//!
//! Point sensors return lidar-like returns on object footprints with
//! range-dependent dropout and ground clutter. Raster sensors return a blurred,
//! noisy occupancy image whose object positions jitter more with range, a
//! stand-in for monocular depth ambiguity.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{AgentConfig, Modality, SensorConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, cells_of_box, BevGridSpec, Box3D, Pose};
use crate::tensor::Matrix;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// One frame of the world: objects and agent poses in world coordinates.
///
/// Objects move with a constant per-scene `velocity` (metres per frame);
/// [`Scene::at_frame`] scripts the sequence used for latency simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub frame_id: u64,
    pub boxes: Vec<Box3D>,
    /// Indexed by agent slot.
    pub agent_poses: Vec<Pose>,
    pub velocity: [f64; 2],
}

impl Scene {
    /// The scene `t` frames later.
    pub fn at_frame(&self, t: usize) -> Scene {
        let (dx, dy) = (self.velocity[0] * t as f64, self.velocity[1] * t as f64);
        Scene {
            frame_id: self.frame_id + t as u64,
            boxes: self.boxes.iter().map(|b| Box3D { x: b.x + dx, y: b.y + dy, ..*b }).collect(),
            agent_poses: self.agent_poses.clone(),
            velocity: self.velocity,
        }
    }

    pub fn pose(&self, slot: usize) -> Pose {
        self.agent_poses[slot]
    }
}

/// Samples a scene by rejection sampling of near-disjoint objects.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &WorldConfig, frame_id: u64) -> Result<Scene> {
    let n = rng.gen_range(cfg.box_count[0]..=cfg.box_count[1]);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    for index in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let l = uniform(rng, cfg.length);
            let w = uniform(rng, cfg.width);
            let h = uniform(rng, cfg.height);
            let x = rng.gen_range(-cfg.half_x..cfg.half_x);
            let y = rng.gen_range(-cfg.half_y..cfg.half_y);
            let r = rng.gen_range(-PI..PI);
            let c = if cfg.num_classes > 1 { rng.gen_range(0..cfg.num_classes) } else { 0 };
            let cand = Box3D::new(x, y, h / 2.0, l, w, h, r, c);
            if boxes.iter().all(|b| bev_iou(b, &cand) < cfg.max_iou) {
                boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::WorldTooCrowded { index, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
    }
    let agent_poses = (0..cfg.agent_slots)
        .map(|_| {
            let x = rng.gen_range(-cfg.agent_half_x..=cfg.agent_half_x);
            let y = rng.gen_range(-cfg.agent_half_y..=cfg.agent_half_y);
            let jitter = if cfg.agent_yaw_jitter > 0.0 {
                rng.gen_range(-cfg.agent_yaw_jitter..=cfg.agent_yaw_jitter)
            } else {
                0.0
            };
            Pose::new(x, y, jitter)
        })
        .collect();
    let speed = rng.gen_range(0.0..=cfg.max_speed.max(0.0));
    let heading = rng.gen_range(-PI..PI);
    Ok(Scene { frame_id, boxes, agent_poses, velocity: [speed * heading.cos(), speed * heading.sin()] })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// `(x, y, z, intensity)` returns in the agent frame.
    Points(Vec<[f64; 4]>),
    /// Row-major `height × width` image over the agent grid area, one value
    /// per pixel in `[0, 1]`, stored as a `(height·width) × 1` column.
    Raster { height: usize, width: usize, values: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent_id: String,
    pub payload: Payload,
}

impl Observation {
    pub fn modality(&self) -> Modality {
        match self.payload {
            Payload::Points(_) => Modality::Point,
            Payload::Raster { .. } => Modality::Raster,
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.payload {
            Payload::Points(p) => p.is_empty(),
            Payload::Raster { values, .. } => values.is_empty(),
        }
    }
}

/// Simulates the agent's sensor on `scene` from its own slot pose.
pub fn sense<R: Rng + ?Sized>(scene: &Scene, agent: &AgentConfig, grid: &BevGridSpec, rng: &mut R) -> Observation {
    sense_from(scene, &scene.pose(agent.slot), agent, grid, rng)
}

/// Simulates the agent's sensor mounted at an arbitrary pose.
pub fn sense_from<R: Rng + ?Sized>(
    scene: &Scene,
    pose: &Pose,
    agent: &AgentConfig,
    grid: &BevGridSpec,
    rng: &mut R,
) -> Observation {
    match agent.modality() {
        Modality::Point => sense_points(scene, pose, &agent.id, &agent.sensor, grid, rng),
        Modality::Raster => sense_raster(scene, pose, &agent.id, &agent.sensor, grid, rng),
    }
}

/// Lidar-like returns on object perimeters and interiors, plus clutter.
pub fn sense_points<R: Rng + ?Sized>(
    scene: &Scene,
    pose: &Pose,
    agent_id: &str,
    cfg: &SensorConfig,
    grid: &BevGridSpec,
    rng: &mut R,
) -> Observation {
    let mut points = Vec::new();
    for b in &scene.boxes {
        let (s, c) = b.r.sin_cos();
        let perimeter = 2.0 * (b.l + b.w);
        for _ in 0..cfg.points_per_box {
            let (u, v) = if rng.gen_bool(0.7) {
                let t = rng.gen_range(0.0..perimeter);
                perimeter_point(t, b.l, b.w)
            } else {
                (rng.gen_range(-b.l / 2.0..=b.l / 2.0), rng.gen_range(-b.w / 2.0..=b.w / 2.0))
            };
            let z = rng.gen_range(b.z - b.h / 2.0..=b.z + b.h / 2.0);
            let intensity = rng.gen_range(0.6..1.0);
            let keep_draw: f64 = rng.gen();
            let (wx, wy) = (b.x + c * u - s * v, b.y + s * u + c * v);
            let (px, py) = pose.from_world(wx, wy);
            let range = (px * px + py * py).sqrt();
            if keep_draw >= keep_probability(range, cfg.dropout_range) || !grid.contains(px, py) {
                continue;
            }
            points.push(quantize([px, py, z, intensity]));
        }
    }
    if cfg.clutter_rate > 0.0 {
        let area = (grid.x_max - grid.x_min) * (grid.y_max - grid.y_min);
        let count = Poisson::new(cfg.clutter_rate * area).map(|d| d.sample(rng) as usize).unwrap_or(0);
        for _ in 0..count {
            let px = rng.gen_range(grid.x_min..grid.x_max);
            let py = rng.gen_range(grid.y_min..grid.y_max);
            let z = rng.gen_range(0.0..0.3);
            let intensity = rng.gen_range(0.0..0.4);
            points.push(quantize([px, py, z, intensity]));
        }
    }
    Observation { agent_id: agent_id.to_string(), payload: Payload::Points(points) }
}

/// Observations are stored single precision; rounding here keeps the
/// synthesized and the stored copies identical.
fn quantize(p: [f64; 4]) -> [f64; 4] {
    p.map(|v| v as f32 as f64)
}

/// `exp(−range / dropout_range · ln 2)`; 1 for an infinite dropout range.
pub fn keep_probability(range: f64, dropout_range: f64) -> f64 {
    if dropout_range.is_infinite() {
        return 1.0;
    }
    if dropout_range <= 0.0 {
        return 0.0;
    }
    (-range / dropout_range * std::f64::consts::LN_2).exp()
}

fn perimeter_point(t: f64, l: f64, w: f64) -> (f64, f64) {
    let (hl, hw) = (l / 2.0, w / 2.0);
    if t < l {
        (-hl + t, hw)
    } else if t < l + w {
        (hl, hw - (t - l))
    } else if t < 2.0 * l + w {
        (hl - (t - l - w), -hw)
    } else {
        (-hl, -hw + (t - 2.0 * l - w))
    }
}

/// Raster grid over the agent's perception area at `resolution`.
pub fn raster_grid(grid: &BevGridSpec, resolution: f64) -> BevGridSpec {
    BevGridSpec { cell: resolution, channels: 1, ..*grid }
}

/// Camera-like occupancy image: footprints rendered at range-jittered
/// positions, blurred, with clipped pixel noise.
pub fn sense_raster<R: Rng + ?Sized>(
    scene: &Scene,
    pose: &Pose,
    agent_id: &str,
    cfg: &SensorConfig,
    grid: &BevGridSpec,
    rng: &mut R,
) -> Observation {
    let rgrid = raster_grid(grid, cfg.raster_resolution);
    let (h, w) = (rgrid.height(), rgrid.width());
    let mut img = vec![0.0; h * w];
    for b in &scene.boxes {
        let (x, y) = pose.from_world(b.x, b.y);
        let range = (x * x + y * y).sqrt();
        let jx: f64 = StandardNormal.sample(rng);
        let jy: f64 = StandardNormal.sample(rng);
        let sigma = cfg.range_jitter_gain * range;
        let local = Box3D::new(x + sigma * jx, y + sigma * jy, b.z, b.l, b.w, b.h, b.r - pose.yaw, b.c);
        for (xc, yc) in cells_of_box(&local, &rgrid) {
            img[xc * w + yc] = 1.0;
        }
    }
    if cfg.blur_sigma > 0.0 {
        img = gaussian_blur(&img, h, w, cfg.blur_sigma);
    }
    if cfg.pixel_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.pixel_noise_sigma).expect("finite sigma");
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    Observation {
        agent_id: agent_id.to_string(),
        payload: Payload::Raster { height: h, width: w, values: Matrix::from_vec(h * w, 1, img) },
    }
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let cc = c as isize + ki as isize - radius;
                if cc >= 0 && (cc as usize) < w {
                    s += k * img[r * w + cc as usize];
                }
            }
            tmp[r * w + c] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let rr = r as isize + ki as isize - radius;
                if rr >= 0 && (rr as usize) < h {
                    s += k * tmp[rr as usize * w + c];
                }
            }
            out[r * w + c] = s;
        }
    }
    out
}
