//! Resolved run configuration: one JSON document with sections
//! `{world, grid, agents[], gtspace, fusion, channel, train, eval}`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Point,
    Raster,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Point => "point",
            Modality::Raster => "raster",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Inclusive range of objects per scene.
    pub box_count: [usize; 2],
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    pub num_classes: u32,
    /// World area is `[−half_x, half_x] × [−half_y, half_y]`.
    pub half_x: f64,
    pub half_y: f64,
    /// Agents are placed within `[−agent_half_x, agent_half_x] × [−agent_half_y, agent_half_y]`.
    pub agent_half_x: f64,
    pub agent_half_y: f64,
    /// Agents face along +x with this much uniform yaw jitter.
    pub agent_yaw_jitter: f64,
    pub agent_slots: usize,
    /// Max object speed in metres per frame.
    pub max_speed: f64,
    pub frames_per_sequence: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub max_iou: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            box_count: [4, 12],
            length: [3.8, 5.0],
            width: [1.8, 2.2],
            height: [1.4, 1.8],
            num_classes: 1,
            half_x: 40.0,
            half_y: 20.0,
            agent_half_x: 16.0,
            agent_half_y: 8.0,
            agent_yaw_jitter: 0.1,
            agent_slots: 5,
            max_speed: 0.2,
            frames_per_sequence: 6,
            train_scenes: 500,
            val_scenes: 100,
            max_iou: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub modality: Modality,
    pub points_per_box: usize,
    /// Clutter points per square metre.
    pub clutter_rate: f64,
    /// Range at which a point's keep-probability halves.
    pub dropout_range: f64,
    pub raster_resolution: f64,
    pub blur_sigma: f64,
    pub pixel_noise_sigma: f64,
    pub range_jitter_gain: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            modality: Modality::Point,
            points_per_box: 60,
            clutter_rate: 0.01,
            dropout_range: 40.0,
            raster_resolution: 0.5,
            blur_sigma: 0.0,
            pixel_noise_sigma: 0.0,
            range_jitter_gain: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.clutter_rate,
            self.dropout_range,
            self.raster_resolution,
            self.blur_sigma,
            self.pixel_noise_sigma,
            self.range_jitter_gain,
        ];
        if vals.iter().any(|v| v.is_nan() || *v < 0.0) || self.raster_resolution == 0.0 {
            return Err(Error::Invalid("sensor parameters must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub id: String,
    /// Index into a scene's agent poses.
    pub slot: usize,
    pub sensor: SensorConfig,
    /// Local feature channels `d_a`.
    pub channels: usize,
    /// Number of spatial convolution layers after the input stage.
    pub depth: usize,
    pub pretrain_epochs: usize,
    pub min_ap: f64,
}

impl AgentConfig {
    pub fn modality(&self) -> Modality {
        self.sensor.modality
    }

    /// Built-in archetypes: `L1`, `L2` (point), `C1`, `C2` (raster) and the
    /// deliberately degraded `weak-L`, `weak-C`.
    pub fn preset(name: &str) -> Option<AgentConfig> {
        let point = |ppb, clutter, dropout| SensorConfig {
            modality: Modality::Point,
            points_per_box: ppb,
            clutter_rate: clutter,
            dropout_range: dropout,
            ..SensorConfig::default()
        };
        let raster = |blur, noise, jitter| SensorConfig {
            modality: Modality::Raster,
            points_per_box: 0,
            clutter_rate: 0.0,
            dropout_range: 0.0,
            raster_resolution: 0.5,
            blur_sigma: blur,
            pixel_noise_sigma: noise,
            range_jitter_gain: jitter,
        };
        let cfg = match name {
            "L1" => AgentConfig {
                id: name.into(),
                slot: 0,
                sensor: point(80, 0.01, 40.0),
                channels: 32,
                depth: 2,
                pretrain_epochs: 4,
                min_ap: 0.5,
            },
            "L2" => AgentConfig {
                id: name.into(),
                slot: 1,
                sensor: point(50, 0.02, 30.0),
                channels: 48,
                depth: 3,
                pretrain_epochs: 3,
                min_ap: 0.5,
            },
            "C1" => AgentConfig {
                id: name.into(),
                slot: 2,
                sensor: raster(1.0, 0.1, 0.03),
                channels: 24,
                depth: 2,
                pretrain_epochs: 6,
                min_ap: 0.2,
            },
            "C2" => AgentConfig {
                id: name.into(),
                slot: 3,
                sensor: raster(1.5, 0.15, 0.04),
                channels: 40,
                depth: 3,
                pretrain_epochs: 4,
                min_ap: 0.2,
            },
            "weak-L" => AgentConfig {
                id: name.into(),
                slot: 4,
                sensor: point(20, 0.04, 15.0),
                channels: 32,
                depth: 2,
                pretrain_epochs: 3,
                min_ap: 0.5,
            },
            "weak-C" => AgentConfig {
                id: name.into(),
                slot: 4,
                sensor: raster(2.0, 0.25, 0.07),
                channels: 24,
                depth: 2,
                pretrain_epochs: 3,
                min_ap: 0.2,
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub const PRESETS: [&'static str; 6] = ["L1", "L2", "C1", "C2", "weak-L", "weak-C"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtSpaceConfig {
    pub box_hidden: usize,
    pub d_beta: usize,
    pub pe_dim: usize,
    pub cell_hidden: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub target_ap: f64,
    /// Stop as soon as held-out AP reaches `target_ap`.
    pub early_stop: bool,
}

impl Default for GtSpaceConfig {
    fn default() -> Self {
        Self {
            box_hidden: 64,
            d_beta: 32,
            pe_dim: 32,
            cell_hidden: 64,
            head_hidden: 64,
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-2,
            target_ap: 0.98,
            early_stop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub n_blocks: usize,
    pub heads: usize,
    pub projector_hidden: Vec<usize>,
    pub tau: f64,
    pub balanced: bool,
    pub compression_ratio: usize,
    pub reconstruction_weight: f64,
    pub head_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            heads: 4,
            projector_hidden: vec![128, 128, 64],
            tau: 0.1,
            balanced: true,
            compression_ratio: 4,
            reconstruction_weight: 0.1,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub latency_frames: usize,
    pub sigma_p: f64,
    pub sigma_r: f64,
    pub compression_ratio: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { latency_frames: 0, sigma_p: 0.0, sigma_r: 0.0, compression_ratio: 4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_gt_space: bool,
    pub no_projector: bool,
    pub no_contrastive: bool,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match (self.no_gt_space, self.no_projector, self.no_contrastive) {
            (false, false, false) => "full",
            (true, false, false) => "no-gt",
            (false, true, false) => "no-proj",
            (false, false, true) => "no-contrast",
            _ => "mixed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no-gt" => a.no_gt_space = true,
            "no-proj" => a.no_projector = true,
            "no-contrast" => a.no_contrastive = true,
            _ => return None,
        }
        Some(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainAgents,
    TrainGt,
    TrainFusion,
    Onboard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub w_phi: f64,
    pub w_e: f64,
    pub w_b: f64,
    pub ablation: Ablation,
    /// Negative cells sampled per scene for the cell-local losses.
    pub negatives: usize,
    pub onboard_epochs: usize,
    /// Scenes per fusion epoch (0 = the whole training split).
    pub scenes_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::TrainFusion,
            epochs: 4,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            w_phi: 1.0,
            w_e: 0.0005,
            w_b: 1.0,
            ablation: Ablation::default(),
            negatives: 48,
            onboard_epochs: 2,
            scenes_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.w_phi, self.w_e, self.w_b].iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    pub seeds: Vec<u64>,
    pub pose_sigmas: Vec<f64>,
    /// Yaw noise paired with each position sigma (radians per metre of σ_p).
    pub yaw_per_metre: f64,
    pub latencies: Vec<usize>,
    /// Frame of each validation sequence at which detections are evaluated.
    pub eval_frame: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.3,
            nms_iou: 0.15,
            seeds: vec![0, 1, 2],
            pose_sigmas: vec![0.0, 0.25, 0.5, 1.0],
            yaw_per_metre: 0.0,
            latencies: vec![0, 1, 2, 3, 4, 5],
            eval_frame: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    pub grid: BevGridSpec,
    pub agents: Vec<AgentConfig>,
    pub gtspace: GtSpaceConfig,
    pub fusion: FusionConfig,
    pub channel: ChannelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            grid: BevGridSpec::default(),
            agents: ["L1", "L2", "C1", "C2"].iter().filter_map(|n| AgentConfig::preset(n)).collect(),
            gtspace: GtSpaceConfig::default(),
            fusion: FusionConfig::default(),
            channel: ChannelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.train.validate()?;
        for a in &self.agents {
            a.sensor.validate()?;
            if a.slot >= self.world.agent_slots {
                return Err(Error::Invalid(format!("agent {} uses slot {} of {}", a.id, a.slot, self.world.agent_slots)));
            }
        }
        let w = &self.world;
        if w.box_count[0] == 0 || w.box_count[0] > w.box_count[1] {
            return Err(Error::Invalid("box_count must be a non-empty range starting at 1 or more".into()));
        }
        if self.fusion.tau <= 0.0 {
            return Err(Error::Invalid("temperature must be positive".into()));
        }
        if self.channel.compression_ratio == 0 || self.grid.channels % self.channel.compression_ratio != 0 {
            return Err(Error::Invalid("compression ratio must divide the common channel count".into()));
        }
        if self.grid.channels % self.fusion.heads != 0 {
            return Err(Error::Invalid("attention heads must divide the common channel count".into()));
        }
        Ok(())
    }

    pub fn agent(&self, id: &str) -> Option<&AgentConfig> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), cfg);
        assert_eq!(cfg.hash(), Config::from_json(&text).unwrap().hash());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = Config::from_json(r#"{"seed": 7, "world": {"train_scenes": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.world.train_scenes, 10);
        assert_eq!(cfg.world.val_scenes, WorldConfig::default().val_scenes);
    }

    #[test]
    fn presets_cover_heterogeneity_axes() {
        let widths: Vec<usize> = ["L1", "L2", "C1", "C2"].iter().map(|n| AgentConfig::preset(n).unwrap().channels).collect();
        assert_eq!(widths, vec![32, 48, 24, 40]);
        assert!(AgentConfig::preset("X9").is_none());
    }

    #[test]
    fn rejects_bad_ratio() {
        let mut cfg = Config::default();
        cfg.channel.compression_ratio = 5;
        assert!(cfg.validate().is_err());
    }
}
