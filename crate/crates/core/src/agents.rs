//! Heterogeneous local agents: a modality-specific encoder and a local
//! detection head, pretrained on the agent's own observations and then frozen.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{AgentConfig, Config, Modality};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{average_precision, FrameDetections};
use crate::geometry::{BevGridSpec, Detection, FeatureMap};
use crate::head::{decode, detection_loss, Anchor, CellTargets, DetectionHead};
use crate::io::{params_container, restore_params, Container};
use crate::nn::{collect_grads, cosine_lr, AdamW, Conv2d, ConvGeometry, Linear, ParamSet};
use crate::scene::{raster_grid, Observation, Payload};
use crate::seed::rng_for;
use crate::tensor::Matrix;

/// Per-cell point statistics fed to the pillar layer.
pub const PILLAR_STATS: usize = 5;
const Z_SCALE: f64 = 2.0;

/// Pillar statistics of a point cloud: `ln(1 + count)`, mean offset from the
/// cell centre in cell units, mean height and mean intensity. Empty cells are
/// zero.
pub fn pillar_stats(points: &[[f64; 4]], grid: &BevGridSpec) -> Matrix {
    let n = grid.num_cells();
    let mut acc = vec![[0.0f64; PILLAR_STATS]; n];
    for p in points {
        if let Some((xc, yc)) = grid.locate(p[0], p[1]) {
            let (cx, cy) = grid.cell_center(xc, yc);
            let a = &mut acc[grid.index(xc, yc)];
            a[0] += 1.0;
            a[1] += (p[0] - cx) / grid.cell;
            a[2] += (p[1] - cy) / grid.cell;
            a[3] += p[2] / Z_SCALE;
            a[4] += p[3];
        }
    }
    let mut m = Matrix::zeros(n, PILLAR_STATS);
    for (r, a) in acc.iter().enumerate() {
        if a[0] > 0.0 {
            let row = m.row_mut(r);
            row[0] = a[0].ln_1p();
            for k in 1..PILLAR_STATS {
                row[k] = a[k] / a[0];
            }
        }
    }
    m
}

/// Bias-free layers throughout, so an empty observation encodes to zeros.
#[derive(Clone, Debug)]
pub enum Encoder {
    Point { pillar: Linear, convs: Vec<Conv2d> },
    Raster { stem: Conv2d, convs: Vec<Conv2d>, raster: BevGridSpec },
}

impl Encoder {
    fn new(cfg: &AgentConfig, grid: &BevGridSpec, ps: &mut ParamSet, rng: &mut crate::seed::Rng) -> Self {
        let c = cfg.channels;
        let geo = ConvGeometry { height: grid.height(), width: grid.width(), kernel: 3, stride: 1 };
        let convs = |ps: &mut ParamSet, rng: &mut crate::seed::Rng| {
            (0..cfg.depth).map(|i| Conv2d::without_bias(ps, &format!("conv.{i}"), geo, c, c, rng)).collect()
        };
        match cfg.modality() {
            Modality::Point => {
                let pillar = Linear::without_bias(ps, "pillar", PILLAR_STATS, c, rng);
                Self::Point { pillar, convs: convs(ps, rng) }
            }
            Modality::Raster => {
                let raster = raster_grid(grid, cfg.sensor.raster_resolution);
                let stride = (grid.cell / cfg.sensor.raster_resolution).round().max(1.0) as usize;
                let sgeo = ConvGeometry { height: raster.height(), width: raster.width(), kernel: stride + 2, stride };
                assert_eq!((sgeo.out_height(), sgeo.out_width()), (grid.height(), grid.width()), "raster must downsample onto the grid");
                let stem = Conv2d::without_bias(ps, "stem", sgeo, 1, c, rng);
                Self::Raster { stem, convs: convs(ps, rng), raster }
            }
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Self::Point { .. } => Modality::Point,
            Self::Raster { .. } => Modality::Raster,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentModel {
    pub config: AgentConfig,
    pub grid: BevGridSpec,
    pub encoder: Encoder,
    pub encoder_params: ParamSet,
    pub head: DetectionHead,
    pub frozen: bool,
}

impl AgentModel {
    pub fn new(cfg: &AgentConfig, grid: &BevGridSpec, anchor: Anchor, head_hidden: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &format!("agent/{}/init", cfg.id), 0);
        let mut encoder_params = ParamSet::new();
        let encoder = Encoder::new(cfg, grid, &mut encoder_params, &mut rng);
        let head = DetectionHead::new(cfg.channels, head_hidden, anchor, &mut rng);
        Self { config: cfg.clone(), grid: *grid, encoder, encoder_params, head, frozen: false }
    }

    pub fn from_config(cfg: &Config, agent: &AgentConfig) -> Self {
        Self::new(agent, &cfg.grid, Anchor::from_world(&cfg.world), cfg.fusion.head_hidden, cfg.seed)
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn modality(&self) -> Modality {
        self.encoder.modality()
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn checksum(&self) -> String {
        format!("{}:{}", self.encoder_params.checksum(), self.head.params.checksum())
    }

    /// The encoder's input matrix for an observation.
    pub fn prepare(&self, obs: &Observation) -> Result<Matrix> {
        if obs.modality() != self.modality() {
            return Err(Error::ModalityMismatch { expected: self.modality().to_string(), actual: obs.modality().to_string() });
        }
        match (&obs.payload, &self.encoder) {
            (Payload::Points(pts), _) => Ok(pillar_stats(pts, &self.grid)),
            (Payload::Raster { height, width, values }, Encoder::Raster { raster, .. }) => {
                if (*height, *width) != (raster.height(), raster.width()) {
                    return Err(Error::Shape(format!("raster {height}×{width} does not match {}×{}", raster.height(), raster.width())));
                }
                Ok(values.clone())
            }
            _ => unreachable!("modality checked above"),
        }
    }

    /// Encoder forward pass over a prepared input.
    pub fn encode_graph(&self, g: &mut Graph, p: &[Var], input: Var) -> Var {
        match &self.encoder {
            Encoder::Point { pillar, convs } => {
                let mut h = pillar.forward(g, p, input);
                h = g.relu(h);
                for c in convs {
                    h = c.forward(g, p, h);
                    h = g.relu(h);
                }
                h
            }
            Encoder::Raster { stem, convs, .. } => {
                let mut h = stem.forward(g, p, input);
                h = g.relu(h);
                for c in convs {
                    h = c.forward(g, p, h);
                    h = g.relu(h);
                }
                h
            }
        }
    }

    pub fn encode_input(&self, input: &Matrix) -> FeatureMap {
        let mut g = Graph::new();
        let p = self.encoder_params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let f = self.encode_graph(&mut g, &p, x);
        FeatureMap::new(self.grid.with_channels(self.channels()), g.value(f).clone()).expect("encoder output matches grid")
    }

    pub fn encode(&self, obs: &Observation) -> Result<FeatureMap> {
        Ok(self.encode_input(&self.prepare(obs)?))
    }

    /// Local (non-collaborative) detections.
    pub fn detect(&self, obs: &Observation, score_thr: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let f = self.encode(obs)?;
        Ok(crate::head::detect(&f, &self.head, score_thr, nms_iou))
    }

    pub fn to_container(&self, config_hash: &str) -> Container {
        let meta = serde_json::json!({
            "kind": "agent",
            "agent": self.config,
            "frozen": self.frozen,
            "checksum": self.checksum(),
            "config_hash": config_hash,
        });
        params_container(meta, &[("encoder", &self.encoder_params), ("head", &self.head.params)])
    }

    pub fn from_container(cfg: &Config, c: &Container) -> Result<Self> {
        let agent: AgentConfig = serde_json::from_value(c.meta["agent"].clone())?;
        let mut m = Self::from_config(cfg, &agent);
        restore_params(c, "encoder", &mut m.encoder_params)?;
        restore_params(c, "head", &mut m.head.params)?;
        m.frozen = c.meta["frozen"].as_bool().unwrap_or(false);
        if let Some(sum) = c.meta["checksum"].as_str() {
            if sum != m.checksum() {
                return Err(Error::FrozenViolation(format!("agent {} checkpoint checksum mismatch", agent.id)));
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PretrainRecord {
    pub agent_id: String,
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub val_ap50: f64,
    pub val_ap70: f64,
    pub checksum: String,
    /// Set when the validation AP falls short of the agent's `min_ap`.
    pub warning: Option<String>,
}

/// Non-collaborative AP of an agent over frame `t` of each validation
/// sequence, from its own slot.
pub fn local_ap(model: &AgentModel, ds: &Dataset, t: usize, score_thr: f64, nms_iou: f64) -> Result<(f64, f64)> {
    let mut frames = Vec::new();
    for seq in 0..ds.val.len() {
        let s = ds.frame(Split::Val, seq, t);
        let obs = ds.observe(&model.config, &s, model.config.slot);
        let dets = model.detect(&obs, score_thr, nms_iou)?;
        frames.push(FrameDetections::new(dets, ds.labels_in(&s, &s.pose(model.config.slot))));
    }
    Ok((average_precision(&frames, 0.5)?, average_precision(&frames, 0.7)?))
}

/// Trains encoder and head with the detection loss on the agent's own
/// training observations, then freezes the model.
pub fn pretrain_agent(ds: &Dataset, agent: &AgentConfig, cfg: &Config) -> Result<(AgentModel, PretrainRecord)> {
    pretrain_on(ds, &(0..ds.train.len()).collect::<Vec<_>>(), agent, cfg)
}

/// [`pretrain_agent`] restricted to the training scenes `subset`.
pub fn pretrain_on(ds: &Dataset, subset: &[usize], agent: &AgentConfig, cfg: &Config) -> Result<(AgentModel, PretrainRecord)> {
    let mut model = AgentModel::from_config(cfg, agent);
    let grid = model.grid;
    let mut inputs = Vec::with_capacity(subset.len());
    let mut targets = Vec::with_capacity(subset.len());
    for &i in subset {
        let s = &ds.train[i];
        inputs.push(model.prepare(&ds.observe(agent, s, agent.slot))?);
        targets.push(CellTargets::full(&ds.labels_in(s, &s.pose(agent.slot)), &grid, &model.head.anchor));
    }
    let mut opt_enc = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    let mut opt_head = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    let total_steps = agent.pretrain_epochs * subset.len();
    let mut step = 0;
    let mut curve = Vec::new();
    for epoch in 0..agent.pretrain_epochs {
        let mut rng = rng_for(cfg.seed, &format!("agent/{}/epoch", agent.id), epoch as u64);
        let mut order: Vec<usize> = (0..subset.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let lr = cosine_lr(cfg.train.lr, step, total_steps);
            step += 1;
            opt_enc.lr = lr;
            opt_head.lr = lr;
            let mut g = Graph::new();
            let pe = model.encoder_params.bind(&mut g, true);
            let ph = model.head.params.bind(&mut g, true);
            let x = g.constant(inputs[k].clone());
            let f = model.encode_graph(&mut g, &pe, x);
            let out = model.head.forward(&mut g, &ph, f);
            let loss = detection_loss(&mut g, out, &targets[k]);
            total += g.scalar(loss.total);
            let grads = g.backward(loss.total);
            opt_enc.step(&mut model.encoder_params, &collect_grads(&g, &grads, &pe));
            opt_head.step(&mut model.head.params, &collect_grads(&g, &grads, &ph));
        }
        curve.push(total / order.len().max(1) as f64);
    }
    model.frozen = true;
    let (ap50, ap70) = if ds.val.is_empty() { (0.0, 0.0) } else { local_ap(&model, ds, 0, cfg.eval.score_thr, cfg.eval.nms_iou)? };
    let warning = (ap50 < agent.min_ap).then(|| format!("agent {} validation AP@0.5 {ap50:.3} is below its minimum {:.3}", agent.id, agent.min_ap));
    let record = PretrainRecord {
        agent_id: agent.id.clone(),
        epochs: agent.pretrain_epochs,
        train_loss: curve,
        val_ap50: ap50,
        val_ap70: ap70,
        checksum: model.checksum(),
        warning,
    };
    Ok((model, record))
}

/// AP of an agent's local head on the given training scenes (overfit checks).
pub fn train_split_ap(model: &AgentModel, ds: &Dataset, subset: &[usize], score_thr: f64, nms_iou: f64) -> Result<f64> {
    let mut frames = Vec::new();
    for &i in subset {
        let s = &ds.train[i];
        let obs = ds.observe(&model.config, s, model.config.slot);
        let f = model.encode(&obs)?;
        let out = model.head.predict(&f.values);
        let cells: Vec<usize> = (0..model.grid.num_cells()).collect();
        let dets = decode(&out, &cells, &model.grid, &model.head.anchor, score_thr, nms_iou);
        frames.push(FrameDetections::new(dets, ds.labels_in(s, &s.pose(model.config.slot))));
    }
    average_precision(&frames, 0.5)
}
