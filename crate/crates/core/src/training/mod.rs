//! Staged training of the collaboration stack: the cached fusion stage, the
//! total objective, projector-only onboarding, and the gradient suite.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentModel;
use crate::alignment::{contrastive_loss_graph, pad_or_truncate, projector_loss_graph, ContrastiveConfig, Projector};
use crate::autograd::{Graph, RowMap, Var};
use crate::config::{Ablation, Config, Modality, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gtspace::GtModel;
use crate::head::{detection_loss, CellTargets};
use crate::nn::{collect_grads, cosine_lr, AdamW, ParamSet};
use crate::pipeline::CollabSystem;
use crate::seed::rng_for;
use crate::tensor::Matrix;

mod suite;
pub use suite::{run_gradcheck, small_config, GradcheckSuite};

/// Weighted objective terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Sum over agents of the projector losses.
    pub phi: f64,
    /// Combinatorial contrastive loss.
    pub e: f64,
    /// Detection loss on fused outputs, averaged over fusion sets.
    pub b: f64,
    /// Codec reconstruction (auxiliary, outside `total`).
    pub rec: f64,
    pub total: f64,
}

/// `w_Φ·Σ L_Φ + w_E·L_E + w_B·L_B`.
pub fn total_loss(phi: f64, e: f64, b: f64, rec: f64, cfg: &TrainConfig) -> LossBreakdown {
    LossBreakdown { phi, e, b, rec, total: cfg.w_phi * phi + cfg.w_e * e + cfg.w_b * b }
}

/// One training scene with frozen encoder features at a fixed cell subset.
#[derive(Clone, Debug)]
pub struct CachedScene {
    pub targets: CellTargets,
    /// Per agent, `cells × d_a` encoder features from the shared vantage.
    pub features: Vec<Matrix>,
    /// `F_GT` at the cached cells.
    pub f_gt: Matrix,
}

/// Frozen inputs of the fusion stage, reused across seeds and ablations.
#[derive(Clone, Debug)]
pub struct FusionCache {
    pub agent_ids: Vec<String>,
    pub scenes: Vec<CachedScene>,
    /// Mean objects per training frame.
    pub mu: f64,
}

/// Vantage slot used for training scene `i`.
pub fn vantage(i: usize, slots: usize) -> usize {
    i % slots.max(1)
}

impl FusionCache {
    /// All agents sense each training scene from one shared pose.
    pub fn build(ds: &Dataset, agents: &[AgentModel], gt: &GtModel, cfg: &Config) -> Result<Self> {
        let grid = *ds.grid();
        let mut scenes = Vec::with_capacity(ds.train.len());
        for (i, s) in ds.train.iter().enumerate() {
            let slot = vantage(i, ds.meta.world.agent_slots);
            let pose = s.pose(slot);
            let boxes = ds.labels_in(s, &pose);
            let mut rng = rng_for(cfg.seed, "fusion/cells", i as u64);
            let targets = CellTargets::sampled(&boxes, &grid, &gt.head.anchor, cfg.train.negatives, &mut rng);
            let mut g = Graph::new();
            let p = gt.encoder.params.bind(&mut g, false);
            let f = gt.encoder.cell_features(&mut g, &p, &boxes, &targets.cells);
            let f_gt = g.value(f).clone();
            let mut features = Vec::with_capacity(agents.len());
            for a in agents {
                features.push(encode_cells(ds, a, i, &targets.cells)?);
            }
            scenes.push(CachedScene { targets, features, f_gt });
        }
        Ok(Self { agent_ids: agents.iter().map(|a| a.id().to_string()).collect(), scenes, mu: ds.mean_objects() })
    }

    /// Appends a new agent's features for every cached scene.
    pub fn add_agent(&mut self, ds: &Dataset, agent: &AgentModel) -> Result<()> {
        for (i, s) in self.scenes.iter_mut().enumerate() {
            s.features.push(encode_cells(ds, agent, i, &s.targets.cells)?);
        }
        self.agent_ids.push(agent.id().to_string());
        Ok(())
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agent_ids.iter().position(|a| a == id)
    }
}

fn encode_cells(ds: &Dataset, agent: &AgentModel, scene: usize, cells: &[usize]) -> Result<Matrix> {
    let s = &ds.train[scene];
    let obs = ds.observe(&agent.config, s, vantage(scene, ds.meta.world.agent_slots));
    Ok(agent.encode(&obs)?.values.select_rows(cells))
}

/// Row map averaging each non-empty object's rows.
fn pooling_map(rows: usize, box_rows: &[Vec<usize>]) -> (Arc<RowMap>, Vec<Vec<usize>>) {
    let kept: Vec<Vec<usize>> = box_rows.iter().filter(|r| !r.is_empty()).cloned().collect();
    let entries = kept.iter().map(|r| r.iter().map(|&i| (i, 1.0 / r.len() as f64)).collect()).collect();
    (Arc::new(RowMap::new(rows, entries)), kept)
}

/// Fusion inputs of one step: member agents and which of them is the ego
/// (kept uncompressed).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSet {
    pub members: Vec<usize>,
    pub ego: usize,
}

/// Singles, pairs (at most six, sampled when there are more) and, with three
/// or more agents, the full set. Returns the sets and the indices of pairs.
pub fn plan_sets<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<FusionSet>, Vec<usize>) {
    let ego = rng.gen_range(0..n);
    let pick = |m: &[usize], rng: &mut R| if m.contains(&ego) { ego } else { m[rng.gen_range(0..m.len())] };
    let mut sets: Vec<FusionSet> = (0..n).map(|a| FusionSet { members: vec![a], ego: a }).collect();
    let mut pairs = crate::alignment::pairs(n);
    if pairs.len() > 6 {
        pairs.shuffle(rng);
        pairs.truncate(6);
        pairs.sort();
    }
    let mut pair_idx = Vec::new();
    for (i, j) in pairs {
        pair_idx.push(sets.len());
        let m = vec![i, j];
        let e = pick(&m, rng);
        sets.push(FusionSet { members: m, ego: e });
    }
    if n >= 3 {
        let m: Vec<usize> = (0..n).collect();
        let e = pick(&m, rng);
        sets.push(FusionSet { members: m, ego: e });
    }
    (sets, pair_idx)
}

/// Bound parameters of a collaboration system inside one graph.
pub struct SystemVars {
    pub projectors: Vec<Option<Vec<Var>>>,
    pub codec: Vec<Var>,
    pub fusion: Vec<Var>,
    pub head: Vec<Var>,
}

impl SystemVars {
    pub fn bind(g: &mut Graph, sys: &CollabSystem, train: &Trainable) -> Self {
        Self {
            projectors: sys.projectors.iter().enumerate().map(|(i, p)| p.as_ref().map(|p| p.params.bind(g, train.projector(i)))).collect(),
            codec: sys.codec.params.bind(g, train.shared),
            fusion: sys.fusion.params.bind(g, train.shared),
            head: sys.fusion.head.params.bind(g, train.shared),
        }
    }
}

/// Which parameter groups a stage trains.
#[derive(Clone, Debug)]
pub struct Trainable {
    /// Codec, fusion and head.
    pub shared: bool,
    /// Indices of trainable projectors; `None` means all.
    pub projectors: Option<Vec<usize>>,
}

impl Trainable {
    fn projector(&self, i: usize) -> bool {
        self.projectors.as_ref().map_or(true, |p| p.contains(&i))
    }
}

/// Loss graph nodes of one step.
pub struct StepVars {
    pub phi: Option<Var>,
    pub e: Option<Var>,
    pub b: Var,
    pub rec: Option<Var>,
}

/// Builds the fusion-stage losses for one cached scene.
///
/// `reference` is the alignment target (`F_GT` or its ablation stand-in) at
/// the cached cells; `phi_agents` lists the agents whose projector loss
/// enters `L_Φ`.
#[allow(clippy::too_many_arguments)]
pub fn step_graph(
    g: &mut Graph,
    sys: &CollabSystem,
    vars: &SystemVars,
    features: &[Matrix],
    targets: &CellTargets,
    reference: &Matrix,
    sets: &[FusionSet],
    pair_sets: &[usize],
    phi_agents: &[usize],
    contrastive: Option<&ContrastiveConfig>,
) -> StepVars {
    let d = sys.d();
    let rows = targets.len();
    let common: Vec<Var> = features
        .iter()
        .enumerate()
        .map(|(a, f)| {
            let x = g.constant(f.clone());
            match (&sys.projectors[a], &vars.projectors[a]) {
                (Some(p), Some(pv)) => p.forward(g, pv, x),
                _ => pad_or_truncate(g, x, d),
            }
        })
        .collect();
    let reference = g.constant(reference.clone());
    let phi = if phi_agents.is_empty() {
        None
    } else {
        let terms: Vec<(Var, f64)> = phi_agents
            .iter()
            .map(|&a| (projector_loss_graph(g, reference, common[a], &targets.weights, targets.total_cells), 1.0))
            .collect();
        Some(g.weighted_sum(&terms))
    };
    let needs_codec: Vec<bool> = (0..features.len()).map(|a| sets.iter().any(|s| s.members.contains(&a) && s.ego != a)).collect();
    let mut sent: Vec<Option<Var>> = vec![None; features.len()];
    let mut rec_terms = Vec::new();
    for a in 0..features.len() {
        if needs_codec[a] {
            let z = sys.codec.compress_graph(g, &vars.codec, common[a]);
            let r = sys.codec.decompress_graph(g, &vars.codec, z);
            rec_terms.push((projector_loss_graph(g, common[a], r, &targets.weights, targets.total_cells), 1.0));
            sent[a] = Some(r);
        }
    }
    let rec = (!rec_terms.is_empty()).then(|| {
        let n = rec_terms.len() as f64;
        let s = g.weighted_sum(&rec_terms);
        g.scale(s, 1.0 / n)
    });
    let mut fused = Vec::with_capacity(sets.len());
    let mut b_terms = Vec::with_capacity(sets.len());
    for s in sets {
        let inputs: Vec<Var> = s.members.iter().map(|&a| if a == s.ego { common[a] } else { sent[a].expect("codec output") }).collect();
        let h = sys.fusion.fuse_graph(g, &vars.fusion, &inputs, None);
        let out = sys.fusion.head.forward(g, &vars.head, h);
        let l = detection_loss(g, out, targets);
        b_terms.push((l.total, 1.0 / sets.len() as f64));
        fused.push(h);
    }
    let b = g.weighted_sum(&b_terms);
    let e = contrastive.and_then(|cfg| {
        let (pool, kept) = pooling_map(rows, &targets.box_rows);
        if kept.len() < 2 {
            return None;
        }
        let anchors = g.rows(reference, pool);
        let terms: Vec<(Var, f64)> = pair_sets
            .iter()
            .filter_map(|&si| contrastive_loss_graph(g, fused[si], &kept, anchors, cfg).map(|v| (v, 1.0)))
            .collect();
        (!terms.is_empty()).then(|| g.weighted_sum(&terms))
    });
    StepVars { phi, e, b, rec }
}

/// Per-epoch means of the loss terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

/// Checksums of every frozen component visible to a stage.
pub fn frozen_checksums(agents: &[AgentModel], gt: Option<&GtModel>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = agents.iter().map(|a| (format!("agent/{}", a.id()), a.checksum())).collect();
    if let Some(gt) = gt {
        out.push(("gt".into(), gt.checksum()));
    }
    out
}

fn verify_frozen(before: &[(String, String)], after: &[(String, String)]) -> Result<()> {
    for ((name, a), (_, b)) in before.iter().zip(after) {
        if a != b {
            return Err(Error::FrozenViolation(format!("{name} changed during training")));
        }
    }
    Ok(())
}

/// Alignment reference per cached scene for the given ablation.
fn reference_of(scene: &CachedScene, reference_agent: Option<usize>, d: usize) -> Matrix {
    match reference_agent {
        None => scene.f_gt.clone(),
        Some(a) => {
            let f = &scene.features[a];
            let mut m = Matrix::zeros(f.rows(), d);
            for r in 0..f.rows() {
                let k = d.min(f.cols());
                m.row_mut(r)[..k].copy_from_slice(&f.row(r)[..k]);
            }
            m
        }
    }
}

/// Trains projectors, codec, fusion and head over frozen agents.
///
/// The collaborative head starts from the ground-truth head (or, without the
/// ground-truth space, from the reference agent's head).
pub fn train_fusion(cache: &FusionCache, agents: Vec<AgentModel>, gt: &GtModel, cfg: &Config, ablation: Ablation, seed: u64) -> Result<(CollabSystem, Vec<FusionEpoch>)> {
    if agents.len() < 2 {
        return Err(Error::Invalid("fusion training needs at least two agents".into()));
    }
    let mods: std::collections::BTreeSet<Modality> = agents.iter().map(|a| a.modality()).collect();
    if mods.len() < 2 {
        return Err(Error::Invalid("fusion training needs at least two modalities".into()));
    }
    if agents.iter().map(|a| a.id()).ne(cache.agent_ids.iter().map(String::as_str)) {
        return Err(Error::Invalid("cache was built for a different agent roster".into()));
    }
    let before = frozen_checksums(&agents, Some(gt));
    let mut sys = CollabSystem::new(cfg, agents, ablation, seed)?;
    let d = sys.d();
    let reference_agent = if ablation.no_gt_space {
        let a = sys.agents.iter().position(|a| a.modality() == Modality::Point).expect("a point agent");
        Some(a)
    } else {
        None
    };
    let init_head = match reference_agent {
        None => Some(&gt.head.params),
        Some(a) => (sys.agents[a].channels() == d).then(|| &sys.agents[a].head.params),
    };
    if let Some(h) = init_head {
        let h = h.clone();
        sys.fusion.head.params.load_from(&h).map_err(Error::Invalid)?;
    }
    let tc = &cfg.train;
    let contrastive = ContrastiveConfig { tau: cfg.fusion.tau, balanced: cfg.fusion.balanced, mu: cache.mu };
    let use_e = !ablation.no_contrastive && tc.w_e > 0.0;
    let n = sys.agents.len();
    let phi_agents: Vec<usize> = if ablation.no_projector { vec![] } else { (0..n).collect() };
    let trainable = Trainable { shared: true, projectors: None };

    let mut opt_proj: Vec<AdamW> = (0..n).map(|_| AdamW::new(tc.lr, tc.weight_decay)).collect();
    let mut opt_codec = AdamW::new(tc.lr, tc.weight_decay);
    let mut opt_fusion = AdamW::new(tc.lr, tc.weight_decay);
    let mut opt_head = AdamW::new(tc.lr, tc.weight_decay);
    let per_epoch = if tc.scenes_per_epoch == 0 { cache.scenes.len() } else { tc.scenes_per_epoch.min(cache.scenes.len()) };
    let total_steps = tc.epochs * per_epoch;
    let mut step = 0;
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut rng = rng_for(seed, &format!("fusion/{}/epoch", ablation.name()), epoch as u64);
        let mut order: Vec<usize> = (0..cache.scenes.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(per_epoch);
        let mut acc = LossBreakdown::default();
        for &k in &order {
            let lr = cosine_lr(tc.lr, step, total_steps);
            step += 1;
            let scene = &cache.scenes[k];
            let reference = reference_of(scene, reference_agent, d);
            let (sets, pairs) = plan_sets(n, &mut rng);
            let mut g = Graph::new();
            let vars = SystemVars::bind(&mut g, &sys, &trainable);
            let sv = step_graph(&mut g, &sys, &vars, &scene.features, &scene.targets, &reference, &sets, &pairs, &phi_agents, use_e.then_some(&contrastive));
            let mut terms = vec![(sv.b, tc.w_b)];
            if let Some(p) = sv.phi {
                terms.push((p, tc.w_phi));
            }
            if let Some(e) = sv.e {
                terms.push((e, tc.w_e));
            }
            if let Some(r) = sv.rec {
                terms.push((r, cfg.fusion.reconstruction_weight));
            }
            let objective = g.weighted_sum(&terms);
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
            let lb = total_loss(val(sv.phi), val(sv.e), g.scalar(sv.b), val(sv.rec), tc);
            acc.phi += lb.phi;
            acc.e += lb.e;
            acc.b += lb.b;
            acc.rec += lb.rec;
            acc.total += lb.total;
            let grads = g.backward(objective);
            for (i, p) in sys.projectors.iter_mut().enumerate() {
                if let (Some(p), Some(pv)) = (p, &vars.projectors[i]) {
                    opt_proj[i].lr = lr;
                    opt_proj[i].step(&mut p.params, &collect_grads(&g, &grads, pv));
                }
            }
            for (opt, ps, pv) in [
                (&mut opt_codec, &mut sys.codec.params, &vars.codec),
                (&mut opt_fusion, &mut sys.fusion.params, &vars.fusion),
                (&mut opt_head, &mut sys.fusion.head.params, &vars.head),
            ] {
                opt.lr = lr;
                opt.step(ps, &collect_grads(&g, &grads, pv));
            }
        }
        let m = order.len().max(1) as f64;
        history.push(FusionEpoch {
            epoch,
            losses: LossBreakdown { phi: acc.phi / m, e: acc.e / m, b: acc.b / m, rec: acc.rec / m, total: acc.total / m },
        });
    }
    verify_frozen(&before, &frozen_checksums(&sys.agents, Some(gt)))?;
    Ok((sys, history))
}

/// Trains only a new agent's projector against the frozen collaboration
/// stack with `L_Φ + L_B`, then returns the extended system.
///
/// `cache` must already hold the new agent's features (last column of
/// agents). Any change to a frozen checksum is an invariant violation.
pub fn onboard_new_agent(sys: &CollabSystem, new: AgentModel, gt: &GtModel, cache: &FusionCache, cfg: &Config, seed: u64) -> Result<(CollabSystem, Vec<FusionEpoch>)> {
    if cache.agent_ids.last().map(String::as_str) != Some(new.id()) || cache.agent_ids.len() != sys.agents.len() + 1 {
        return Err(Error::Invalid("cache must hold the roster followed by the new agent".into()));
    }
    if sys.ablation.no_projector {
        return Err(Error::Invalid("onboarding trains a projector".into()));
    }
    let frozen_before = frozen_checksums(&sys.agents, Some(gt));
    let sys_before = sys.checksum();
    let mut ext = sys.clone();
    let new_idx = ext.agents.len();
    let mut rng = rng_for(seed, &format!("onboard/{}/init", new.id()), 0);
    ext.projectors.push(Some(Projector::new(new.id(), new.channels(), &cfg.fusion.projector_hidden, ext.d(), &mut rng)));
    ext.agents.push(new);
    let tc = &cfg.train;
    let trainable = Trainable { shared: false, projectors: Some(vec![new_idx]) };
    let mut opt = AdamW::new(tc.lr, tc.weight_decay);
    let total_steps = tc.onboard_epochs * cache.scenes.len();
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 0..tc.onboard_epochs {
        let mut rng = rng_for(seed, &format!("onboard/{}/epoch", ext.agents[new_idx].id()), epoch as u64);
        let mut order: Vec<usize> = (0..cache.scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for &k in &order {
            opt.lr = cosine_lr(tc.lr, step, total_steps);
            step += 1;
            let scene = &cache.scenes[k];
            let sets = onboard_sets(new_idx, &mut rng);
            let mut g = Graph::new();
            let vars = SystemVars::bind(&mut g, &ext, &trainable);
            let sv = step_graph(&mut g, &ext, &vars, &scene.features, &scene.targets, &scene.f_gt, &sets, &[], &[new_idx], None);
            let phi = sv.phi.expect("new agent projector loss");
            let objective = g.weighted_sum(&[(phi, tc.w_phi), (sv.b, tc.w_b)]);
            let lb = total_loss(g.scalar(phi), 0.0, g.scalar(sv.b), 0.0, tc);
            acc.phi += lb.phi;
            acc.b += lb.b;
            acc.total += lb.total;
            let grads = g.backward(objective);
            let pv = vars.projectors[new_idx].as_ref().expect("bound");
            let p = ext.projectors[new_idx].as_mut().expect("new projector");
            opt.step(&mut p.params, &collect_grads(&g, &grads, pv));
        }
        let m = order.len().max(1) as f64;
        history.push(FusionEpoch { epoch, losses: LossBreakdown { phi: acc.phi / m, b: acc.b / m, total: acc.total / m, ..Default::default() } });
    }
    verify_frozen(&frozen_before, &frozen_checksums(&ext.agents[..new_idx], Some(gt)))?;
    let mut check = ext.clone();
    check.agents.pop();
    check.projectors.pop();
    if check.checksum() != sys_before {
        return Err(Error::FrozenViolation("fusion stack changed during onboarding".into()));
    }
    Ok((ext, history))
}

/// The new agent alone, with each existing agent, and with all of them.
fn onboard_sets<R: Rng + ?Sized>(new: usize, rng: &mut R) -> Vec<FusionSet> {
    let mut sets = vec![FusionSet { members: vec![new], ego: new }];
    for a in 0..new {
        let ego = if rng.gen_bool(0.5) { new } else { a };
        sets.push(FusionSet { members: vec![a, new], ego });
    }
    let all: Vec<usize> = (0..=new).collect();
    let ego = all[rng.gen_range(0..all.len())];
    sets.push(FusionSet { members: all, ego });
    sets
}

/// Parameter-set snapshot helper for tools that compare before/after states.
pub fn param_checksums(sets: &[(&str, &ParamSet)]) -> Vec<(String, String)> {
    sets.iter().map(|(n, p)| (n.to_string(), p.checksum())).collect()
}
