//! Synthetic datasets: scene sequences plus per-agent observations.
//!
//! On disk a dataset directory holds:
//! - `dataset.meta`: JSON with grid spec, world and sensor configs, seed and counts;
//! - `manifest.jsonl`: one frame record per line (frame id, split, sequence,
//!   frame index, boxes as 8-tuples, agent poses, velocity);
//! - `obs_<agent>.bin`: a [`Container`] per agent holding that agent's
//!   observations from its own slot, named `<frame_id>`.
//!
//! Observations not present on disk are synthesized from the dataset seed;
//! synthesis is bit-identical to the stored copies.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AgentConfig, Config, Modality, WorldConfig};
use crate::error::{Error, Result};
use crate::geometry::{transform_boxes, BevGridSpec, Box3D, Pose};
use crate::io::{Container, DType};
use crate::scene::{generate_scene, raster_grid, sense_from, Observation, Payload, Scene};
use crate::seed::rng_for;
use crate::tensor::Matrix;

pub const META_FILE: &str = "dataset.meta";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub grid: BevGridSpec,
    pub world: WorldConfig,
    pub agents: Vec<AgentConfig>,
    pub train_count: usize,
    pub val_count: usize,
    pub frames_per_sequence: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    split: Split,
    sequence: usize,
    t: usize,
    boxes: Vec<[f64; 8]>,
    poses: Vec<[f64; 3]>,
    velocity: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Training scenes (single frames).
    pub train: Vec<Scene>,
    /// First frames of the validation sequences.
    pub val: Vec<Scene>,
    stored: HashMap<(String, u64), Observation>,
}

impl Dataset {
    pub fn generate(cfg: &Config) -> Result<Self> {
        let w = &cfg.world;
        let fps = w.frames_per_sequence.max(1) as u64;
        let make = |split: &str, n: usize, offset: u64| -> Result<Vec<Scene>> {
            (0..n)
                .map(|i| {
                    let mut rng = rng_for(cfg.seed, split, i as u64);
                    generate_scene(&mut rng, w, offset + i as u64 * fps)
                })
                .collect()
        };
        let train = make("scene/train", w.train_scenes, 0)?;
        let val = make("scene/val", w.val_scenes, w.train_scenes as u64 * fps)?;
        let meta = DatasetMeta {
            format_version: 1,
            seed: cfg.seed,
            grid: cfg.grid,
            world: w.clone(),
            agents: cfg.agents.clone(),
            train_count: w.train_scenes,
            val_count: w.val_scenes,
            frames_per_sequence: fps as usize,
        };
        Ok(Self { meta, train, val, stored: HashMap::new() })
    }

    pub fn grid(&self) -> &BevGridSpec {
        &self.meta.grid
    }

    pub fn scenes(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Frame `t` of sequence `seq`.
    pub fn frame(&self, split: Split, seq: usize, t: usize) -> Scene {
        self.scenes(split)[seq].at_frame(t)
    }

    /// Observation of `agent` mounted at the pose of `slot` in the given frame.
    pub fn observe(&self, agent: &AgentConfig, scene: &Scene, slot: usize) -> Observation {
        if slot == agent.slot {
            if let Some(o) = self.stored.get(&(agent.id.clone(), scene.frame_id)) {
                return o.clone();
            }
        }
        synthesize(self.meta.seed, agent, scene, slot, &self.meta.grid)
    }

    /// Boxes of a frame in the frame of `pose`, keeping those centred in the grid.
    pub fn labels_in(&self, scene: &Scene, pose: &Pose) -> Vec<Box3D> {
        labels_in(scene, pose, &self.meta.grid)
    }

    /// Mean number of in-grid objects per training frame, from slot 0.
    pub fn mean_objects(&self) -> f64 {
        if self.train.is_empty() {
            return 1.0;
        }
        let total: usize = self.train.iter().map(|s| self.labels_in(s, &s.pose(0)).len()).sum();
        (total as f64 / self.train.len() as f64).max(1.0)
    }

    /// SHA-256 over the metadata and manifest serialization.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta).expect("meta serializes"));
        h.update(self.manifest_text().as_bytes());
        hex::encode(h.finalize())
    }

    fn manifest_text(&self) -> String {
        let mut out = String::new();
        let mut push = |split: Split, seq: usize, t: usize, s: &Scene| {
            let rec = FrameRecord {
                frame_id: s.frame_id,
                split,
                sequence: seq,
                t,
                boxes: s.boxes.iter().map(Box3D::to_array).collect(),
                poses: s.agent_poses.iter().map(|p| [p.x, p.y, p.yaw]).collect(),
                velocity: s.velocity,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        };
        for (i, s) in self.train.iter().enumerate() {
            push(Split::Train, i, 0, s);
        }
        for (i, s) in self.val.iter().enumerate() {
            for t in 0..self.meta.frames_per_sequence {
                push(Split::Val, i, t, &s.at_frame(t));
            }
        }
        out
    }

    /// Writes metadata, manifest and one observation container per agent.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        fs::File::create(dir.join(MANIFEST_FILE))?.write_all(self.manifest_text().as_bytes())?;
        for agent in &self.meta.agents {
            let mut c = Container::new(serde_json::json!({
                "kind": "observations",
                "agent": agent.id,
                "modality": agent.modality(),
            }));
            let mut add = |scene: &Scene| {
                let obs = self.observe(agent, scene, agent.slot);
                c.arrays.push((scene.frame_id.to_string(), payload_matrix(&obs.payload)));
            };
            for s in &self.train {
                add(s);
            }
            for s in &self.val {
                for t in 0..self.meta.frames_per_sequence {
                    add(&s.at_frame(t));
                }
            }
            c.write(&dir.join(format!("obs_{}.bin", agent.id)), DType::F32)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        let file = fs::File::open(dir.join(MANIFEST_FILE))?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line)?;
            if rec.t != 0 {
                continue;
            }
            let scene = Scene {
                frame_id: rec.frame_id,
                boxes: rec.boxes.into_iter().map(Box3D::from_array).collect(),
                agent_poses: rec.poses.into_iter().map(|p| Pose { x: p[0], y: p[1], yaw: p[2] }).collect(),
                velocity: rec.velocity,
            };
            match rec.split {
                Split::Train => train.push(scene),
                Split::Val => val.push(scene),
            }
        }
        if train.len() != meta.train_count || val.len() != meta.val_count {
            return Err(Error::Format("manifest counts do not match dataset.meta".into()));
        }
        let mut stored = HashMap::new();
        for agent in &meta.agents {
            let path = dir.join(format!("obs_{}.bin", agent.id));
            if !path.exists() {
                continue;
            }
            let c = Container::read(&path)?;
            for (name, m) in c.arrays {
                let frame_id: u64 = name.parse().map_err(|_| Error::Format(format!("bad frame id {name}")))?;
                let payload = matrix_payload(agent, m, &meta.grid)?;
                stored.insert((agent.id.clone(), frame_id), Observation { agent_id: agent.id.clone(), payload });
            }
        }
        Ok(Self { meta, train, val, stored })
    }

    pub fn stored_observations(&self) -> usize {
        self.stored.len()
    }
}

/// Ground-truth boxes of `scene` expressed in the frame of `pose`, restricted
/// to centres inside the grid.
pub fn labels_in(scene: &Scene, pose: &Pose, grid: &BevGridSpec) -> Vec<Box3D> {
    transform_boxes(&scene.boxes, &Pose::identity(), pose).into_iter().filter(|b| grid.contains(b.x, b.y)).collect()
}

/// Deterministic observation stream keyed by agent, mounting slot and frame.
pub fn synthesize(seed: u64, agent: &AgentConfig, scene: &Scene, slot: usize, grid: &BevGridSpec) -> Observation {
    let mut rng = rng_for(seed, &format!("obs/{}/{}", agent.id, slot), scene.frame_id);
    sense_from(scene, &scene.pose(slot), agent, grid, &mut rng)
}

fn payload_matrix(p: &Payload) -> Matrix {
    match p {
        Payload::Points(pts) => Matrix::from_vec(pts.len(), 4, pts.iter().flatten().copied().collect()),
        Payload::Raster { values, .. } => values.clone(),
    }
}

fn matrix_payload(agent: &AgentConfig, m: Matrix, grid: &BevGridSpec) -> Result<Payload> {
    match agent.modality() {
        Modality::Point => {
            if m.cols() != 4 && m.rows() > 0 {
                return Err(Error::Format("point observations need 4 columns".into()));
            }
            Ok(Payload::Points((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2), m.get(r, 3)]).collect()))
        }
        Modality::Raster => {
            let rg = raster_grid(grid, agent.sensor.raster_resolution);
            if m.shape() != (rg.num_cells(), 1) {
                return Err(Error::Format("raster observation shape mismatch".into()));
            }
            Ok(Payload::Raster { height: rg.height(), width: rg.width(), values: m })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.world.train_scenes = 3;
        cfg.world.val_scenes = 2;
        cfg.world.frames_per_sequence = 3;
        cfg
    }

    #[test]
    fn write_load_round_trip() {
        let cfg = small_config();
        let ds = Dataset::generate(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("gtspace-ds-{}", std::process::id()));
        ds.write(&dir).unwrap();
        let back = Dataset::load(&dir).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        assert_eq!(back.hash(), ds.hash());
        assert_eq!(back.stored_observations(), cfg.agents.len() * (3 + 2 * 3));
        for agent in &cfg.agents {
            let s = ds.frame(Split::Val, 1, 2);
            assert_eq!(back.observe(agent, &s, agent.slot), ds.observe(agent, &s, agent.slot));
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = small_config();
        assert_eq!(Dataset::generate(&cfg).unwrap().hash(), Dataset::generate(&cfg).unwrap().hash());
        let other = Config { seed: 1, ..cfg };
        assert_ne!(Dataset::generate(&small_config()).unwrap().hash(), Dataset::generate(&other).unwrap().hash());
    }

    #[test]
    fn frame_ids_are_unique() {
        let ds = Dataset::generate(&small_config()).unwrap();
        let mut ids: Vec<u64> = ds.train.iter().map(|s| s.frame_id).collect();
        for s in &ds.val {
            ids.extend((0..3).map(|t| s.at_frame(t).frame_id));
        }
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }
}
