//! The runtime collaboration loop: compression, a stale-frame noisy channel,
//! re-gridding into the ego frame, fusion and decoding, plus late fusion.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::AgentModel;
use crate::alignment::{pad_or_truncate, FusionModel, Projector};
use crate::autograd::{Graph, RowMap, Var};
use crate::config::{Ablation, ChannelConfig, Config};
use crate::error::{Error, Result};
use crate::geometry::{nms, perturb_pose, transform_boxes, BevGridSpec, Detection, FeatureMap, Pose};
use crate::head::{decode, Anchor};
use crate::io::{params_container, restore_params, Container};
use crate::nn::{Linear, ParamSet};
use crate::seed::rng_for;
use crate::tensor::Matrix;

/// Per-cell linear bottleneck `d → d/ratio` and its learned pseudo-inverse.
#[derive(Clone, Debug)]
pub struct Codec {
    pub params: ParamSet,
    pub d: usize,
    pub ratio: usize,
    enc: Linear,
    dec: Linear,
}

impl Codec {
    /// Ratio 1 starts as the exact identity.
    pub fn new<R: Rng + ?Sized>(d: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        if ratio == 0 || d % ratio != 0 {
            return Err(Error::Invalid(format!("compression ratio {ratio} does not divide {d}")));
        }
        let dc = d / ratio;
        let mut params = ParamSet::new();
        let enc = Linear::new(&mut params, "phi", d, dc, rng);
        let dec = Linear::new(&mut params, "phi_inv", dc, d, rng);
        if ratio == 1 {
            *params.get_mut(enc.weight_index()) = Matrix::identity(d);
            *params.get_mut(dec.weight_index()) = Matrix::identity(d);
        } else {
            params.get_mut(enc.weight_index()).scale_assign(std::f64::consts::FRAC_1_SQRT_2);
        }
        Ok(Self { params, d, ratio, enc, dec })
    }

    pub fn payload_width(&self) -> usize {
        self.d / self.ratio
    }

    pub fn compress_graph(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        self.enc.forward(g, p, x)
    }

    pub fn decompress_graph(&self, g: &mut Graph, p: &[Var], z: Var) -> Var {
        self.dec.forward(g, p, z)
    }

    fn apply(&self, x: &Matrix, compress: bool) -> Matrix {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x.clone());
        let y = if compress { self.compress_graph(&mut g, &p, x) } else { self.decompress_graph(&mut g, &p, x) };
        g.value(y).clone()
    }

    pub fn compress(&self, f: &FeatureMap) -> Result<Matrix> {
        if f.channels() != self.d {
            return Err(Error::Shape(format!("codec expects {} channels, got {}", self.d, f.channels())));
        }
        Ok(self.apply(&f.values, true))
    }

    pub fn decompress(&self, payload: &Matrix, grid: &BevGridSpec) -> Result<FeatureMap> {
        if payload.cols() != self.payload_width() {
            return Err(Error::Shape(format!("payload has {} channels, codec ratio {} expects {}", payload.cols(), self.ratio, self.payload_width())));
        }
        FeatureMap::new(grid.with_channels(self.d), self.apply(payload, false))
    }

    pub fn round_trip(&self, f: &FeatureMap) -> Result<FeatureMap> {
        self.decompress(&self.compress(f)?, &f.grid)
    }
}

/// Mean over cells of `|F − φ⁻¹(φ(F))| / |F|`, skipping all-zero cells.
pub fn reconstruction_error(codec: &Codec, maps: &[FeatureMap]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for f in maps {
        let r = codec.round_trip(f)?;
        for c in 0..f.values.rows() {
            let a = f.values.row(c);
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                let d = a.iter().zip(r.values.row(c)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                total += d / norm;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub enum MessageBody {
    /// Compressed `cells × d/ratio` payload.
    Features(Matrix),
    Detections(Vec<Detection>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMessage {
    pub sender_id: String,
    pub frame_id: usize,
    pub pose: Pose,
    pub body: MessageBody,
}

impl ChannelMessage {
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        match &self.body {
            MessageBody::Features(m) => {
                let mut b = Vec::new();
                m.write_bytes(&mut b);
                h.update(&b);
            }
            MessageBody::Detections(d) => h.update(serde_json::to_vec(d).expect("detections serialize")),
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// One line of the channel trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub receiver_frame: usize,
    pub sender: String,
    pub frame_used: usize,
    /// Drawn `(dx, dy, dyaw)`.
    pub pose_noise: [f64; 3],
    pub payload_checksum: String,
}

/// Frame a receiver at `t` sees under `k` frames of latency.
pub fn source_frame(t: usize, k: usize) -> usize {
    t.saturating_sub(k)
}

/// Messages visible at frame `t`: each sender's stream (indexed by frame)
/// delivers frame `max(t − k, 0)` with its pose perturbed.
pub fn transmit<R: Rng + ?Sized>(streams: &[Vec<ChannelMessage>], cfg: &ChannelConfig, t: usize, rng: &mut R) -> (Vec<ChannelMessage>, Vec<TraceRecord>) {
    let mut out = Vec::with_capacity(streams.len());
    let mut trace = Vec::with_capacity(streams.len());
    for s in streams {
        if s.is_empty() {
            continue;
        }
        let f = source_frame(t, cfg.latency_frames).min(s.len() - 1);
        let mut m = s[f].clone();
        let noisy = perturb_pose(&m.pose, cfg.sigma_p, cfg.sigma_r, rng);
        trace.push(TraceRecord {
            receiver_frame: t,
            sender: m.sender_id.clone(),
            frame_used: m.frame_id,
            pose_noise: [noisy.x - m.pose.x, noisy.y - m.pose.y, noisy.yaw - m.pose.yaw],
            payload_checksum: m.checksum(),
        });
        m.pose = noisy;
        out.push(m);
    }
    (out, trace)
}

/// JSON Lines rendering of a channel trace.
pub fn trace_jsonl(trace: &[TraceRecord]) -> String {
    trace.iter().map(|r| serde_json::to_string(r).expect("trace serializes") + "\n").collect()
}

/// Bilinear resampling of a sender-frame map onto the ego grid.
///
/// Returns the row map and, per ego cell, whether it falls inside the
/// sender's grid. Cells outside get no entries (zero rows).
pub fn regrid_map(grid: &BevGridSpec, ego: &Pose, sender: &Pose) -> (Arc<RowMap>, Vec<bool>) {
    let n = grid.num_cells();
    let (h, w) = (grid.height(), grid.width());
    let mut entries = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    for c in 0..n {
        let (xc, yc) = grid.coords(c);
        let (ex, ey) = grid.cell_center(xc, yc);
        let (wx, wy) = ego.to_world(ex, ey);
        let (sx, sy) = sender.from_world(wx, wy);
        if !grid.contains(sx, sy) {
            entries.push(Vec::new());
            valid.push(false);
            continue;
        }
        let u = snap((sx - grid.x_min) / grid.cell - 0.5).clamp(0.0, (h - 1) as f64);
        let v = snap((sy - grid.y_min) / grid.cell - 0.5).clamp(0.0, (w - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let mut e = Vec::with_capacity(4);
        for (du, wu) in [(0, 1.0 - fu), (1, fu)] {
            for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
                let wt = wu * wv;
                if wt > 0.0 {
                    e.push((grid.index((u0 + du).min(h - 1), (v0 + dv).min(w - 1)), wt));
                }
            }
        }
        entries.push(e);
        valid.push(true);
    }
    (Arc::new(RowMap::new(n, entries)), valid)
}

pub fn regrid(f: &FeatureMap, ego: &Pose, sender: &Pose) -> (FeatureMap, Vec<bool>) {
    let (map, valid) = regrid_map(&f.grid, ego, sender);
    (FeatureMap { grid: f.grid, values: map.apply(&f.values) }, valid)
}

/// Trained collaboration stack over a fixed roster of frozen agents.
#[derive(Clone, Debug)]
pub struct CollabSystem {
    pub agents: Vec<AgentModel>,
    /// One per agent; `None` when features are padded or truncated instead.
    pub projectors: Vec<Option<Projector>>,
    pub codec: Codec,
    pub fusion: FusionModel,
    pub ablation: Ablation,
}

impl CollabSystem {
    pub fn new(cfg: &Config, agents: Vec<AgentModel>, ablation: Ablation, seed: u64) -> Result<Self> {
        let d = cfg.grid.channels;
        let mut rng = rng_for(seed, "fusion/init", 0);
        let projectors = agents
            .iter()
            .map(|a| (!ablation.no_projector).then(|| Projector::new(a.id(), a.channels(), &cfg.fusion.projector_hidden, d, &mut rng)))
            .collect();
        let codec = Codec::new(d, cfg.channel.compression_ratio, &mut rng)?;
        let fusion = FusionModel::new(d, cfg.fusion.n_blocks, cfg.fusion.heads, cfg.fusion.head_hidden, Anchor::from_world(&cfg.world), &mut rng);
        Ok(Self { agents, projectors, codec, fusion, ablation })
    }

    pub fn d(&self) -> usize {
        self.fusion.d
    }

    pub fn index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id() == id)
    }

    /// Agent `a`'s local features in the common space.
    pub fn to_common(&self, a: usize, f: &FeatureMap) -> Result<FeatureMap> {
        match &self.projectors[a] {
            Some(p) => p.project(f),
            None => {
                let mut g = Graph::new();
                let x = g.constant(f.values.clone());
                let y = pad_or_truncate(&mut g, x, self.d());
                FeatureMap::new(f.grid.with_channels(self.d()), g.value(y).clone())
            }
        }
    }

    /// Checksum of the trainable collaboration parameters.
    pub fn checksum(&self) -> String {
        let mut parts: Vec<String> = self.projectors.iter().flatten().map(|p| p.params.checksum()).collect();
        parts.push(self.codec.params.checksum());
        parts.push(self.fusion.checksum());
        hex::encode(&Sha256::digest(parts.join(":").as_bytes())[..16])
    }

    pub fn to_container(&self, config_hash: &str) -> Container {
        let ids: Vec<&str> = self.agents.iter().map(|a| a.id()).collect();
        let meta = serde_json::json!({
            "kind": "fusion",
            "agents": ids,
            "ablation": self.ablation,
            "checksum": self.checksum(),
            "config_hash": config_hash,
        });
        let names: Vec<String> = self.projectors.iter().flatten().map(|p| format!("proj.{}", p.agent_id)).collect();
        let mut sets: Vec<(&str, &ParamSet)> = vec![("codec", &self.codec.params), ("fusion", &self.fusion.params), ("head", &self.fusion.head.params)];
        for (n, p) in names.iter().zip(self.projectors.iter().flatten()) {
            sets.push((n.as_str(), &p.params));
        }
        params_container(meta, &sets)
    }

    pub fn from_container(cfg: &Config, agents: Vec<AgentModel>, c: &Container) -> Result<Self> {
        let ablation: Ablation = serde_json::from_value(c.meta["ablation"].clone())?;
        let ids: Vec<String> = serde_json::from_value(c.meta["agents"].clone())?;
        let agents: Vec<AgentModel> = ids
            .iter()
            .map(|id| agents.iter().find(|a| a.id() == id).cloned().ok_or_else(|| Error::Format(format!("fusion checkpoint needs agent {id}"))))
            .collect::<Result<_>>()?;
        let mut s = Self::new(cfg, agents, ablation, 0)?;
        restore_params(c, "codec", &mut s.codec.params)?;
        restore_params(c, "fusion", &mut s.fusion.params)?;
        restore_params(c, "head", &mut s.fusion.head.params)?;
        for p in s.projectors.iter_mut().flatten() {
            let name = format!("proj.{}", p.agent_id);
            restore_params(c, &name, &mut p.params)?;
        }
        if let Some(sum) = c.meta["checksum"].as_str() {
            if sum != s.checksum() {
                return Err(Error::FrozenViolation("fusion checkpoint checksum mismatch".into()));
            }
        }
        Ok(s)
    }

    /// Fuses the ego's common-space map with received (already decompressed)
    /// maps under their noisy poses and decodes.
    pub fn fuse_received(&self, ego: &FeatureMap, ego_pose: &Pose, received: &[(FeatureMap, Pose)], score_thr: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let mut maps = vec![ego.clone()];
        let mut masks = vec![vec![true; ego.grid.num_cells()]];
        for (f, pose) in received {
            let (m, v) = if pose == ego_pose { (f.clone(), vec![true; f.grid.num_cells()]) } else { regrid(f, ego_pose, pose) };
            maps.push(m);
            masks.push(v);
        }
        let fused = self.fusion.fuse_masked(&maps, Some(&masks))?;
        Ok(crate::head::detect(&fused, &self.fusion.head, score_thr, nms_iou))
    }
}

/// Everything a sender contributes at one frame.
#[derive(Clone, Debug)]
pub struct SenderFrame {
    pub sender_id: String,
    pub frame_id: usize,
    pub pose: Pose,
    /// Common-space features before compression.
    pub features: FeatureMap,
}

/// Collaborative detection for `ego` at frame `t`.
///
/// `ego_features` is the ego's own common-space map; each entry of `senders`
/// is one collaborator's per-frame stream (frame index = position).
/// Collaborators' maps are compressed, sent through the channel, decompressed
/// and re-gridded before fusion.
#[allow(clippy::too_many_arguments)]
pub fn collaborate<R: Rng + ?Sized>(
    sys: &CollabSystem,
    ego_features: &FeatureMap,
    ego_pose: &Pose,
    senders: &[Vec<SenderFrame>],
    channel: &ChannelConfig,
    t: usize,
    score_thr: f64,
    nms_iou: f64,
    rng: &mut R,
) -> Result<(Vec<Detection>, Vec<TraceRecord>)> {
    if channel.compression_ratio != sys.codec.ratio {
        return Err(Error::Invalid(format!("channel ratio {} differs from codec ratio {}", channel.compression_ratio, sys.codec.ratio)));
    }
    let streams: Vec<Vec<ChannelMessage>> = senders
        .iter()
        .map(|s| {
            s.iter()
                .map(|f| {
                    Ok(ChannelMessage {
                        sender_id: f.sender_id.clone(),
                        frame_id: f.frame_id,
                        pose: f.pose,
                        body: MessageBody::Features(sys.codec.compress(&f.features)?),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (msgs, trace) = transmit(&streams, channel, t, rng);
    let mut received = Vec::with_capacity(msgs.len());
    for m in msgs {
        if let MessageBody::Features(p) = &m.body {
            received.push((sys.codec.decompress(p, &ego_features.grid)?, m.pose));
        }
    }
    let dets = sys.fuse_received(ego_features, ego_pose, &received, score_thr, nms_iou)?;
    Ok((dets, trace))
}

/// Late fusion: received detections moved into the ego frame, pooled with
/// the ego's, filtered to the ego grid and suppressed.
pub fn late_fuse(ego: &[Detection], ego_pose: &Pose, received: &[(Vec<Detection>, Pose)], grid: &BevGridSpec, iou_thr: f64) -> Vec<Detection> {
    if received.is_empty() {
        return ego.to_vec();
    }
    let mut pool = ego.to_vec();
    for (dets, pose) in received {
        let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
        for (b, d) in transform_boxes(&boxes, pose, ego_pose).into_iter().zip(dets) {
            if grid.contains(b.x, b.y) {
                pool.push(Detection::new(b, d.score));
            }
        }
    }
    nms(&pool, iou_thr)
}

/// Direct decode of a fused map (used where no channel is involved).
pub fn decode_fused(sys: &CollabSystem, fused: &FeatureMap, score_thr: f64, nms_iou: f64) -> Vec<Detection> {
    let out = sys.fusion.head.predict(&fused.values);
    let cells: Vec<usize> = (0..fused.grid.num_cells()).collect();
    decode(&out, &cells, &fused.grid, &sys.fusion.head.anchor, score_thr, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;

    fn grid() -> BevGridSpec {
        BevGridSpec { x_min: -6.0, x_max: 6.0, y_min: -4.0, y_max: 4.0, cell: 1.0, channels: 8 }
    }

    fn random_map(d: usize, seed: u64) -> FeatureMap {
        let g = grid().with_channels(d);
        FeatureMap::new(g, Matrix::randn(g.num_cells(), d, 1.0, &mut rng_for(seed, "m", 0))).unwrap()
    }

    fn message(frame: usize) -> ChannelMessage {
        ChannelMessage { sender_id: "s".into(), frame_id: frame, pose: Pose::new(1.0, 2.0, 0.1), body: MessageBody::Detections(vec![]) }
    }

    #[test]
    fn identity_codec_round_trip() {
        let c = Codec::new(8, 1, &mut rng_for(0, "c", 0)).unwrap();
        let f = random_map(8, 1);
        assert_eq!(c.round_trip(&f).unwrap(), f);
        let c4 = Codec::new(8, 4, &mut rng_for(0, "c", 0)).unwrap();
        assert_eq!(c4.compress(&f).unwrap().cols(), 2);
        assert!(c4.decompress(&Matrix::zeros(f.grid.num_cells(), 3), &f.grid).is_err());
        assert!(Codec::new(8, 3, &mut rng_for(0, "c", 0)).is_err());
    }

    #[test]
    fn transmit_frame_arithmetic() {
        let stream: Vec<ChannelMessage> = (0..12).map(message).collect();
        let mut rng = rng_for(0, "t", 0);
        let clean = ChannelConfig { latency_frames: 0, sigma_p: 0.0, sigma_r: 0.0, compression_ratio: 1 };
        let (m, _) = transmit(&[stream.clone()], &clean, 10, &mut rng);
        assert_eq!(m[0].frame_id, 10);
        assert_eq!(m[0].pose, stream[10].pose);
        let k3 = ChannelConfig { latency_frames: 3, ..clean.clone() };
        assert_eq!(transmit(&[stream.clone()], &k3, 10, &mut rng).0[0].frame_id, 7);
        assert_eq!(transmit(&[stream.clone()], &k3, 2, &mut rng).0[0].frame_id, 0);
        let noisy = ChannelConfig { sigma_p: 0.5, ..clean };
        let a = transmit(&[stream.clone()], &noisy, 4, &mut rng_for(3, "t", 0));
        let b = transmit(&[stream], &noisy, 4, &mut rng_for(3, "t", 0));
        assert_eq!(a, b);
        assert_ne!(a.0[0].pose, message(4).pose);
        assert!(trace_jsonl(&a.1).lines().count() == 1);
    }

    #[test]
    fn regrid_identity_and_shift() {
        let f = random_map(4, 2);
        let p = Pose::new(3.0, -1.0, 0.0);
        let (same, valid) = regrid(&f, &p, &p);
        assert_eq!(same, f);
        assert!(valid.iter().all(|v| *v));
        let q = Pose::new(4.0, -1.0, 0.0);
        let (shifted, valid) = regrid(&f, &p, &q);
        let g = f.grid;
        for xc in 0..g.height() {
            for yc in 0..g.width() {
                let c = g.index(xc, yc);
                if xc == 0 {
                    assert!(!valid[c]);
                    assert!(shifted.values.row(c).iter().all(|v| *v == 0.0));
                } else {
                    assert_eq!(shifted.values.row(c), f.values.row(g.index(xc - 1, yc)));
                }
            }
        }
    }

    #[test]
    fn late_fusion_cases() {
        let g = grid();
        let d = Detection::new(Box3D::bev(1.0, 0.0, 4.0, 2.0, 0.0), 0.9);
        let p = Pose::identity();
        assert_eq!(late_fuse(&[d], &p, &[], &g, 0.1), vec![d]);
        let other = Pose::new(2.0, 0.0, 0.0);
        let seen = Detection::new(Box3D::bev(-1.0, 0.0, 4.0, 2.0, 0.0), 0.8);
        let fused = late_fuse(&[d], &p, &[(vec![seen], other)], &g, 0.1);
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].score, 0.9);
    }
}
