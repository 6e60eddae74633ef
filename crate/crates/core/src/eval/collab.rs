//! Validation-time collaboration: cached encoder features over the
//! validation sequences and AP of collaborative, local and late-fusion
//! detection.

use crate::agents::AgentModel;
use crate::config::{ChannelConfig, EvalConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{perturb_pose, Detection, FeatureMap, Pose};
use crate::head::detect;
use crate::pipeline::{late_fuse, source_frame, CollabSystem};
use crate::seed::rng_for;

use super::metrics::{average_precision, FrameDetections};

/// An agent's local features over frames `0..=last` of every validation
/// sequence, sensed from its own slot.
#[derive(Clone, Debug)]
pub struct ValFeatures {
    pub agent_id: String,
    /// `[sequence][frame]`.
    pub maps: Vec<Vec<FeatureMap>>,
}

pub fn encode_val(ds: &Dataset, agent: &AgentModel, last: usize) -> Result<ValFeatures> {
    let mut maps = Vec::with_capacity(ds.val.len());
    for seq in 0..ds.val.len() {
        let mut frames = Vec::with_capacity(last + 1);
        for t in 0..=last {
            let s = ds.frame(Split::Val, seq, t);
            frames.push(agent.encode(&ds.observe(&agent.config, &s, agent.config.slot))?);
        }
        maps.push(frames);
    }
    Ok(ValFeatures { agent_id: agent.id().to_string(), maps })
}

/// Common-space maps of one system at the evaluation frame (`local`) and
/// what receivers reconstruct from one source frame (`received`).
#[derive(Clone, Debug)]
pub struct CommonCache {
    /// Source frame of `received`.
    pub frame: usize,
    /// `[agent][sequence]`.
    pub local: Vec<Vec<FeatureMap>>,
    pub received: Vec<Vec<FeatureMap>>,
}

fn check_roster(sys: &CollabSystem, vals: &[&ValFeatures]) -> Result<()> {
    if vals.len() != sys.agents.len() || vals.iter().zip(&sys.agents).any(|(v, a)| v.agent_id != a.id()) {
        return Err(Error::Invalid("validation features do not match the system roster".into()));
    }
    Ok(())
}

fn common_at(sys: &CollabSystem, vals: &[&ValFeatures], t: usize) -> Result<Vec<Vec<FeatureMap>>> {
    vals.iter().enumerate().map(|(a, v)| v.maps.iter().map(|seq| sys.to_common(a, &seq[t])).collect()).collect()
}

/// `vals` must follow the system's agent order. `local` is taken at `t`,
/// `received` at `frame`.
pub fn prepare_common(sys: &CollabSystem, vals: &[&ValFeatures], t: usize, frame: usize) -> Result<CommonCache> {
    check_roster(sys, vals)?;
    let local = common_at(sys, vals, t)?;
    let mut cache = CommonCache { frame, local, received: Vec::new() };
    if frame == t {
        cache.received = round_trip_all(sys, &cache.local)?;
    } else {
        refresh_received(&mut cache, sys, vals, frame)?;
    }
    Ok(cache)
}

fn round_trip_all(sys: &CollabSystem, maps: &[Vec<FeatureMap>]) -> Result<Vec<Vec<FeatureMap>>> {
    maps.iter().map(|seqs| seqs.iter().map(|f| sys.codec.round_trip(f)).collect()).collect()
}

/// Replaces `received` with the codec round trip of frame `frame`.
pub fn refresh_received(cache: &mut CommonCache, sys: &CollabSystem, vals: &[&ValFeatures], frame: usize) -> Result<()> {
    check_roster(sys, vals)?;
    cache.received = round_trip_all(sys, &common_at(sys, vals, frame)?)?;
    cache.frame = frame;
    Ok(())
}

/// Noisy pose of `sender` as delivered in sequence `seq`.
///
/// Draws depend only on `(seed, seq, sender)`, so noise scales linearly
/// across sigma levels.
pub fn delivered_pose(pose: &Pose, channel: &ChannelConfig, seed: u64, seq: usize, sender: usize) -> Pose {
    let mut rng = rng_for(seed, "channel/pose", (seq * 64 + sender) as u64);
    perturb_pose(pose, channel.sigma_p, channel.sigma_r, &mut rng)
}

/// Per-frame collaborative detections for `ego` with `others`.
#[allow(clippy::too_many_arguments)]
pub fn collaborative_frames(
    sys: &CollabSystem,
    cache: &CommonCache,
    ds: &Dataset,
    ego: usize,
    others: &[usize],
    eval: &EvalConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<Vec<FrameDetections>> {
    let t = eval.eval_frame;
    let src = source_frame(t, channel.latency_frames);
    if !others.is_empty() && cache.frame != src {
        return Err(Error::Invalid(format!("received maps are from frame {}, latency needs frame {src}", cache.frame)));
    }
    let mut frames = Vec::with_capacity(ds.val.len());
    for seq in 0..ds.val.len() {
        let s = ds.frame(Split::Val, seq, t);
        let ego_pose = s.pose(sys.agents[ego].config.slot);
        let received: Vec<(FeatureMap, Pose)> = others
            .iter()
            .map(|&a| {
                let pose = s.pose(sys.agents[a].config.slot);
                (cache.received[a][seq].clone(), delivered_pose(&pose, channel, seed, seq, a))
            })
            .collect();
        let dets = sys.fuse_received(&cache.local[ego][seq], &ego_pose, &received, eval.score_thr, eval.nms_iou)?;
        frames.push(FrameDetections::new(dets, ds.labels_in(&s, &ego_pose)));
    }
    Ok(frames)
}

/// AP@0.5 and AP@0.7 of `ego` collaborating with every other agent.
pub fn collaborative_ap(sys: &CollabSystem, cache: &CommonCache, ds: &Dataset, ego: usize, eval: &EvalConfig, channel: &ChannelConfig, seed: u64) -> Result<(f64, f64)> {
    let others: Vec<usize> = (0..sys.agents.len()).filter(|&a| a != ego).collect();
    let frames = collaborative_frames(sys, cache, ds, ego, &others, eval, channel, seed)?;
    Ok((average_precision(&frames, 0.5)?, average_precision(&frames, 0.7)?))
}

/// The agent's own detections at frame `t`.
pub fn local_detections(agent: &AgentModel, vf: &ValFeatures, seq: usize, t: usize, eval: &EvalConfig) -> Vec<Detection> {
    detect(&vf.maps[seq][t], &agent.head, eval.score_thr, eval.nms_iou)
}

/// Non-collaborative AP@0.5 / AP@0.7 at the evaluation frame.
pub fn local_ap_at(agent: &AgentModel, vf: &ValFeatures, ds: &Dataset, eval: &EvalConfig) -> Result<(f64, f64)> {
    let t = eval.eval_frame;
    let mut frames = Vec::with_capacity(ds.val.len());
    for seq in 0..ds.val.len() {
        let s = ds.frame(Split::Val, seq, t);
        let dets = local_detections(agent, vf, seq, t, eval);
        frames.push(FrameDetections::new(dets, ds.labels_in(&s, &s.pose(agent.config.slot))));
    }
    Ok((average_precision(&frames, 0.5)?, average_precision(&frames, 0.7)?))
}

/// Late fusion of every agent's local detections into `ego`'s frame.
#[allow(clippy::too_many_arguments)]
pub fn late_fusion_ap(
    agents: &[AgentModel],
    vals: &[&ValFeatures],
    ds: &Dataset,
    ego: usize,
    eval: &EvalConfig,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let t = eval.eval_frame;
    let src = source_frame(t, channel.latency_frames);
    let mut frames = Vec::with_capacity(ds.val.len());
    for seq in 0..ds.val.len() {
        let s = ds.frame(Split::Val, seq, t);
        let ego_pose = s.pose(agents[ego].config.slot);
        let own = local_detections(&agents[ego], vals[ego], seq, t, eval);
        let received: Vec<(Vec<Detection>, Pose)> = (0..agents.len())
            .filter(|&a| a != ego)
            .map(|a| {
                let pose = s.pose(agents[a].config.slot);
                (local_detections(&agents[a], vals[a], seq, src, eval), delivered_pose(&pose, channel, seed, seq, a))
            })
            .collect();
        let dets = late_fuse(&own, &ego_pose, &received, ds.grid(), eval.nms_iou);
        frames.push(FrameDetections::new(dets, ds.labels_in(&s, &ego_pose)));
    }
    Ok((average_precision(&frames, 0.5)?, average_precision(&frames, 0.7)?))
}
