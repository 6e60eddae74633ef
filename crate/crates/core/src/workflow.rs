//! Run-directory stages and the evaluation study shared by the command-line
//! tool and the end-to-end checks.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json      resolved config plus config and dataset hashes
//! dataset/         generated scenes and stored observations
//! checkpoints/     agent-<id>.bin, gt.bin, fusion-<ablation>-s<seed>.bin, onboard-<id>-s<seed>.bin
//! history/         per-stage training curves (JSON)
//! report.json      accumulated evaluation tables
//! metrics.csv      rendering of report.json, with summary.md and SVG plots
//! trace.jsonl      channel trace of one evaluated sequence
//! gradcheck.json   gradient suite report
//! ```

use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{pretrain_agent, AgentModel, PretrainRecord};
use crate::config::{Ablation, AgentConfig, ChannelConfig, Config};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    collaborative_ap, emit_report, encode_val, late_fusion_ap, local_ap_at, prepare_common, refresh_received, CommonCache, EvalReport, MeanStd, ScatterPoint, SweepTable, TableRow,
    ValFeatures,
};
use crate::gtspace::{train_gt_encoder, GtEpoch, GtModel};
use crate::io::{Container, DType};
use crate::pipeline::{collaborate, source_frame, trace_jsonl, CollabSystem, SenderFrame, TraceRecord};
use crate::seed::rng_for;
use crate::training::{onboard_new_agent, train_fusion, FusionCache, FusionEpoch, GradcheckSuite};

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn agent(&self, id: &str) -> PathBuf {
        self.checkpoints().join(format!("agent-{id}.bin"))
    }

    pub fn gt(&self) -> PathBuf {
        self.checkpoints().join("gt.bin")
    }

    pub fn fusion(&self, ablation: Ablation, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("fusion-{}-s{seed}.bin", ablation.name()))
    }

    pub fn onboard(&self, id: &str, seed: u64) -> PathBuf {
        self.checkpoints().join(format!("onboard-{id}-s{seed}.bin"))
    }

    pub fn history(&self, name: &str) -> PathBuf {
        self.root.join("history").join(format!("{name}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.jsonl")
    }

    pub fn gradcheck(&self) -> PathBuf {
        self.root.join("gradcheck.json")
    }
}

#[derive(Serialize)]
struct ConfigRecord<'a> {
    config_hash: String,
    dataset_hash: Option<&'a str>,
    config: &'a Config,
}

pub fn write_config(run: &RunDir, cfg: &Config, dataset_hash: Option<&str>) -> Result<()> {
    fs::create_dir_all(run.root())?;
    let rec = ConfigRecord { config_hash: cfg.hash(), dataset_hash, config: cfg };
    fs::write(run.config(), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_checkpoint(path: &Path, c: &Container) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    c.write(path, DType::F64)
}

/// Agent configuration by id: the config's roster first, then the presets.
pub fn resolve_agent(cfg: &Config, name: &str) -> Result<AgentConfig> {
    cfg.agent(name).cloned().or_else(|| AgentConfig::preset(name)).ok_or_else(|| Error::Invalid(format!("unknown agent {name}")))
}

/// Generates the dataset into the run directory and returns it as stored.
pub fn gen_data(cfg: &Config, run: &RunDir) -> Result<Dataset> {
    let ds = Dataset::generate(cfg)?;
    ds.write(&run.dataset())?;
    let stored = Dataset::load(&run.dataset())?;
    write_config(run, cfg, Some(&stored.hash()))?;
    Ok(stored)
}

pub fn load_dataset(run: &RunDir) -> Result<Dataset> {
    Dataset::load(&run.dataset())
}

pub fn pretrain(cfg: &Config, run: &RunDir, ds: &Dataset, agent: &AgentConfig) -> Result<PretrainRecord> {
    let (model, rec) = pretrain_agent(ds, agent, cfg)?;
    write_checkpoint(&run.agent(agent.id.as_str()), &model.to_container(&cfg.hash()))?;
    write_json(&run.history(&format!("agent-{}", agent.id)), &rec)?;
    Ok(rec)
}

pub fn train_gt(cfg: &Config, run: &RunDir, ds: &Dataset) -> Result<Vec<GtEpoch>> {
    let (model, curve) = train_gt_encoder(ds, cfg)?;
    write_checkpoint(&run.gt(), &model.to_container(&cfg.hash()))?;
    write_json(&run.history("gt"), &curve)?;
    Ok(curve)
}

pub fn load_agent(cfg: &Config, run: &RunDir, id: &str) -> Result<AgentModel> {
    let p = run.agent(id);
    if !p.exists() {
        return Err(Error::Invalid(format!("agent {id} has not been pretrained ({} missing)", p.display())));
    }
    AgentModel::from_container(cfg, &Container::read(&p)?)
}

pub fn load_gt(cfg: &Config, run: &RunDir) -> Result<GtModel> {
    let p = run.gt();
    if !p.exists() {
        return Err(Error::Invalid("ground-truth space has not been trained".into()));
    }
    GtModel::from_container(cfg, &Container::read(&p)?)
}

/// The config's roster, loaded from the run's checkpoints.
pub fn load_roster(cfg: &Config, run: &RunDir) -> Result<Vec<AgentModel>> {
    cfg.agents.iter().map(|a| load_agent(cfg, run, &a.id)).collect()
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Frozen models plus lazily built training cache and validation features.
pub struct Study {
    pub cfg: Config,
    pub ds: Dataset,
    pub gt: GtModel,
    pub agents: Vec<AgentModel>,
    cache: OnceCell<FusionCache>,
    vals: OnceCell<Vec<ValFeatures>>,
}

impl Study {
    pub fn new(cfg: Config, ds: Dataset, agents: Vec<AgentModel>, gt: GtModel) -> Self {
        Self { cfg, ds, gt, agents, cache: OnceCell::new(), vals: OnceCell::new() }
    }

    pub fn cache(&self) -> Result<&FusionCache> {
        if self.cache.get().is_none() {
            let c = FusionCache::build(&self.ds, &self.agents, &self.gt, &self.cfg)?;
            let _ = self.cache.set(c);
        }
        Ok(self.cache.get().expect("cache set"))
    }

    pub fn vals(&self) -> Result<&[ValFeatures]> {
        if self.vals.get().is_none() {
            let v = self.agents.iter().map(|a| encode_val(&self.ds, a, self.cfg.eval.eval_frame)).collect::<Result<Vec<_>>>()?;
            let _ = self.vals.set(v);
        }
        Ok(self.vals.get().expect("vals set"))
    }

    pub fn train(&self, ablation: Ablation, seed: u64) -> Result<(CollabSystem, Vec<FusionEpoch>)> {
        train_fusion(self.cache()?, self.agents.clone(), &self.gt, &self.cfg, ablation, seed)
    }

    /// A newcomer's cache extension and validation features.
    pub fn newcomer(&self, agent: &AgentModel) -> Result<Newcomer> {
        let mut cache = self.cache()?.clone();
        cache.add_agent(&self.ds, agent)?;
        let val = encode_val(&self.ds, agent, self.cfg.eval.eval_frame)?;
        Ok(Newcomer { agent: agent.clone(), cache, val })
    }

    pub fn onboard(&self, sys: &CollabSystem, nc: &Newcomer, seed: u64) -> Result<(CollabSystem, Vec<FusionEpoch>)> {
        onboard_new_agent(sys, nc.agent.clone(), &self.gt, &nc.cache, &self.cfg, seed)
    }

    /// Validation features in the order of `sys`'s roster.
    pub fn vals_for<'a>(&'a self, sys: &CollabSystem, extra: Option<&'a Newcomer>) -> Result<Vec<&'a ValFeatures>> {
        let vals = self.vals()?;
        sys.agents
            .iter()
            .map(|a| {
                vals.iter()
                    .chain(extra.map(|n| &n.val))
                    .find(|v| v.agent_id == a.id())
                    .ok_or_else(|| Error::Invalid(format!("no validation features for {}", a.id())))
            })
            .collect()
    }

    /// Clean collaborative AP of every ego, plus the requested sweeps. The
    /// common-space caches live only for the duration of the call.
    pub fn evaluate(&self, sys: &CollabSystem, seed: u64, extra: Option<&Newcomer>, sweeps: Sweeps) -> Result<SystemEval> {
        let vals = self.vals_for(sys, extra)?;
        let t = self.cfg.eval.eval_frame;
        let mut cache = prepare_common(sys, &vals, t, source_frame(t, self.cfg.channel.latency_frames))?;
        let collab = |cache: &CommonCache, ch: &ChannelConfig| -> Result<Vec<(f64, f64)>> {
            (0..sys.agents.len()).map(|ego| collaborative_ap(sys, cache, &self.ds, ego, &self.cfg.eval, ch, seed)).collect()
        };
        let clean = collab(&cache, &self.cfg.channel)?;
        // A sweep point equal to the configured channel reuses the clean result.
        let at = |cache: &CommonCache, ch: ChannelConfig| -> Result<(f64, f64)> {
            if ch == self.cfg.channel {
                Ok(mean_pair(&clean))
            } else {
                Ok(mean_pair(&collab(cache, &ch)?))
            }
        };
        let mut pose = Vec::new();
        if sweeps.pose {
            for &s in &self.cfg.eval.pose_sigmas {
                pose.push(at(&cache, self.channel(s, self.cfg.channel.latency_frames))?);
            }
        }
        let mut latency = Vec::new();
        if sweeps.latency {
            for &k in &self.cfg.eval.latencies {
                let ch = self.channel(self.cfg.channel.sigma_p, k);
                let src = source_frame(t, k);
                if cache.frame != src && ch != self.cfg.channel {
                    refresh_received(&mut cache, sys, &vals, src)?;
                }
                latency.push(at(&cache, ch)?);
            }
        }
        Ok(SystemEval { seed, roster: sys.agents.iter().map(|a| a.id().to_string()).collect(), clean, pose, latency })
    }

    pub fn local(&self, agent: &AgentModel, val: &ValFeatures) -> Result<(f64, f64)> {
        local_ap_at(agent, val, &self.ds, &self.cfg.eval)
    }

    pub fn late(&self, seed: u64) -> Result<Vec<(f64, f64)>> {
        let vals = self.vals()?;
        let refs: Vec<&ValFeatures> = vals.iter().collect();
        (0..self.agents.len()).map(|ego| late_fusion_ap(&self.agents, &refs, &self.ds, ego, &self.cfg.eval, &self.cfg.channel, seed)).collect()
    }

    fn channel(&self, sigma_p: f64, k: usize) -> ChannelConfig {
        ChannelConfig { sigma_p, sigma_r: sigma_p * self.cfg.eval.yaw_per_metre, latency_frames: k, ..self.cfg.channel.clone() }
    }

    /// Per-agent local, late-fusion and collaborative AP (table `agents`).
    pub fn agent_table(&self, runs: &[SystemEval]) -> Result<SweepTable> {
        let vals = self.vals()?;
        let mut rows = Vec::new();
        let late: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| self.late(r.seed)).collect::<Result<_>>()?;
        for (i, a) in self.agents.iter().enumerate() {
            let local = self.local(a, &vals[i])?;
            rows.push(row(&format!("{}/local", a.id()), None, &[local]));
            rows.push(row(&format!("{}/late", a.id()), None, &late.iter().map(|l| l[i]).collect::<Vec<_>>()));
            rows.push(row(&format!("{}/collab", a.id()), None, &runs.iter().map(|r| r.clean[i]).collect::<Vec<_>>()));
        }
        Ok(SweepTable { name: "agents".into(), x_label: String::new(), rows })
    }

    /// Ego-averaged collaborative AP over position noise levels (table `pose`).
    pub fn pose_table(&self, runs: &[SystemEval]) -> Result<SweepTable> {
        let mut rows = Vec::new();
        for (i, &s) in self.cfg.eval.pose_sigmas.iter().enumerate() {
            let per: Vec<(f64, f64)> = runs.iter().map(|r| r.pose.get(i).copied().ok_or_else(|| Error::Invalid("pose sweep was not evaluated".into()))).collect::<Result<_>>()?;
            rows.push(row(&format!("sigma_p={s}"), Some(s), &per));
        }
        Ok(SweepTable { name: "pose".into(), x_label: "sigma_p (m)".into(), rows })
    }

    /// Ego-averaged collaborative AP over latency, plus the ego-averaged
    /// local baseline (table `latency`).
    pub fn latency_table(&self, runs: &[SystemEval]) -> Result<SweepTable> {
        let mut rows = Vec::new();
        for (i, &k) in self.cfg.eval.latencies.iter().enumerate() {
            let per: Vec<(f64, f64)> = runs.iter().map(|r| r.latency.get(i).copied().ok_or_else(|| Error::Invalid("latency sweep was not evaluated".into()))).collect::<Result<_>>()?;
            rows.push(row(&format!("k={k}"), Some(k as f64), &per));
        }
        let vals = self.vals()?;
        let local: Vec<(f64, f64)> = self.agents.iter().zip(vals).map(|(a, v)| self.local(a, v)).collect::<Result<_>>()?;
        rows.push(row("local", None, &[mean_pair(&local)]));
        Ok(SweepTable { name: "latency".into(), x_label: "latency (frames)".into(), rows })
    }

    /// Ego-averaged clean collaborative AP of one ablation over seeds.
    pub fn ablation_row(&self, ablation: Ablation, runs: &[SystemEval]) -> TableRow {
        let per: Vec<(f64, f64)> = runs.iter().map(|r| mean_pair(&r.clean)).collect();
        row(ablation.name(), None, &per)
    }

    /// Local and collaborative AP of every agent of onboarded systems, and
    /// the newcomer's rows (table `onboarding`).
    pub fn onboarding(&self, nc: &Newcomer, runs: &[SystemEval]) -> Result<(SweepTable, Vec<ScatterPoint>)> {
        let first = runs.first().ok_or_else(|| Error::Invalid("no onboarded systems".into()))?;
        let vals = self.vals()?;
        let mut scatter = Vec::new();
        let mut rows = Vec::new();
        for (i, id) in first.roster.iter().enumerate() {
            let (agent, val) = self
                .agents
                .iter()
                .zip(vals)
                .chain(std::iter::once((&nc.agent, &nc.val)))
                .find(|(a, _)| a.id() == id)
                .ok_or_else(|| Error::Invalid(format!("unknown agent {id}")))?;
            let local = self.local(agent, val)?;
            let c: Vec<(f64, f64)> = runs.iter().map(|r| r.clean[i]).collect();
            scatter.push(ScatterPoint {
                agent: id.clone(),
                local: MeanStd::of(&[local.0]),
                collab: MeanStd::of(&c.iter().map(|p| p.0).collect::<Vec<_>>()),
            });
            if id == nc.agent.id() {
                rows.push(row(&format!("{id}/local"), None, &[local]));
                rows.push(row(&format!("{id}/collab"), None, &c));
            }
        }
        Ok((SweepTable { name: "onboarding".into(), x_label: String::new(), rows }, scatter))
    }

    /// Channel trace of `ego` over validation sequence 0 at the evaluation frame.
    pub fn trace(&self, sys: &CollabSystem, seed: u64, ego: usize) -> Result<Vec<TraceRecord>> {
        let t = self.cfg.eval.eval_frame;
        let seq = 0;
        let vals = self.vals_for(sys, None)?;
        let senders: Vec<Vec<SenderFrame>> = (0..sys.agents.len())
            .filter(|&a| a != ego)
            .map(|a| {
                (0..=t)
                    .map(|f| {
                        let s = self.ds.frame(Split::Val, seq, f);
                        Ok(SenderFrame {
                            sender_id: sys.agents[a].id().to_string(),
                            frame_id: f,
                            pose: s.pose(sys.agents[a].config.slot),
                            features: sys.to_common(a, &vals[a].maps[seq][f])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let s = self.ds.frame(Split::Val, seq, t);
        let mut rng = rng_for(seed, "channel/trace", 0);
        let ego_pose = s.pose(sys.agents[ego].config.slot);
        let local = sys.to_common(ego, &vals[ego].maps[seq][t])?;
        let (_, trace) = collaborate(sys, &local, &ego_pose, &senders, &self.cfg.channel, t, self.cfg.eval.score_thr, self.cfg.eval.nms_iou, &mut rng)?;
        Ok(trace)
    }
}

/// A pretrained agent joining after fusion training.
#[derive(Clone, Debug)]
pub struct Newcomer {
    pub agent: AgentModel,
    pub cache: FusionCache,
    pub val: ValFeatures,
}

/// Which robustness sweeps [`Study::evaluate`] runs besides the clean channel.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sweeps {
    pub pose: bool,
    pub latency: bool,
}

impl Sweeps {
    pub const ALL: Sweeps = Sweeps { pose: true, latency: true };
}

/// Metrics of one trained system.
#[derive(Clone, Debug)]
pub struct SystemEval {
    pub seed: u64,
    pub roster: Vec<String>,
    /// Per ego, `(AP@0.5, AP@0.7)` under the configured channel.
    pub clean: Vec<(f64, f64)>,
    /// Ego means per entry of `eval.pose_sigmas`.
    pub pose: Vec<(f64, f64)>,
    /// Ego means per entry of `eval.latencies`.
    pub latency: Vec<(f64, f64)>,
}

fn mean_pair(v: &[(f64, f64)]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    (v.iter().map(|p| p.0).sum::<f64>() / n, v.iter().map(|p| p.1).sum::<f64>() / n)
}

fn row(config: &str, x: Option<f64>, per_seed: &[(f64, f64)]) -> TableRow {
    TableRow {
        config: config.into(),
        x,
        ap50: MeanStd::of(&per_seed.iter().map(|p| p.0).collect::<Vec<_>>()),
        ap70: MeanStd::of(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>()),
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Trains (or loads, when the checkpoint exists) one system per seed.
pub fn fusion_systems(study: &Study, run: &RunDir, ablation: Ablation, seeds: &[u64], train_missing: bool) -> Result<Vec<CollabSystem>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let p = run.fusion(ablation, seed);
        if p.exists() {
            out.push(CollabSystem::from_container(&study.cfg, study.agents.clone(), &Container::read(&p)?)?);
        } else if train_missing {
            out.push(train_fusion_stage(study, run, ablation, seed)?);
        } else {
            return Err(Error::Invalid(format!("missing fusion checkpoint {}", p.display())));
        }
    }
    Ok(out)
}

pub fn train_fusion_stage(study: &Study, run: &RunDir, ablation: Ablation, seed: u64) -> Result<CollabSystem> {
    let (sys, hist) = study.train(ablation, seed)?;
    write_checkpoint(&run.fusion(ablation, seed), &sys.to_container(&study.cfg.hash()))?;
    write_json(&run.history(&format!("fusion-{}-s{seed}", ablation.name())), &hist)?;
    Ok(sys)
}

pub fn onboard_stage(study: &Study, run: &RunDir, sys: &CollabSystem, nc: &Newcomer, seed: u64) -> Result<CollabSystem> {
    let (ext, hist) = study.onboard(sys, nc, seed)?;
    write_checkpoint(&run.onboard(nc.agent.id(), seed), &ext.to_container(&study.cfg.hash()))?;
    write_json(&run.history(&format!("onboard-{}-s{seed}", nc.agent.id())), &hist)?;
    Ok(ext)
}

/// Loads the run's accumulated report (empty when absent).
pub fn load_report(run: &RunDir) -> Result<EvalReport> {
    let p = run.report();
    if !p.exists() {
        return Ok(EvalReport::default());
    }
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

/// Merges tables (replacing same-named ones) and scatter points into the
/// run's report, then re-emits every rendering.
pub fn update_report(run: &RunDir, dataset_hash: &str, seeds: &[u64], tables: Vec<SweepTable>, scatter: Option<Vec<ScatterPoint>>) -> Result<EvalReport> {
    let mut report = load_report(run)?;
    report.dataset_hash = dataset_hash.to_string();
    report.seeds = seeds.to_vec();
    for t in tables {
        match report.tables.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => report.tables.push(t),
        }
    }
    if let Some(s) = scatter {
        report.scatter = s;
    }
    write_json(&run.report(), &report)?;
    emit_report(&report, run.root())?;
    Ok(report)
}

pub fn write_trace(run: &RunDir, trace: &[TraceRecord]) -> Result<()> {
    fs::create_dir_all(run.root())?;
    fs::write(run.trace(), trace_jsonl(trace))?;
    Ok(())
}

pub fn write_gradcheck(run: &RunDir, suite: &GradcheckSuite) -> Result<()> {
    write_json(&run.gradcheck(), suite)
}

/// Loads the frozen models of a run into a study.
pub fn open_study(cfg: &Config, run: &RunDir) -> Result<Study> {
    let ds = load_dataset(run)?;
    let agents = load_roster(cfg, run)?;
    let gt = load_gt(cfg, run)?;
    Ok(Study::new(cfg.clone(), ds, agents, gt))
}

/// Clean evaluation of the full systems: the `agents` table and a channel
/// trace of agent 0 on the first seed.
pub fn eval_stage(study: &Study, run: &RunDir, train_missing: bool) -> Result<EvalReport> {
    let seeds = study.cfg.eval.seeds.clone();
    let systems = fusion_systems(study, run, Ablation::default(), &seeds, train_missing)?;
    let runs: Vec<SystemEval> = systems.iter().zip(&seeds).map(|(s, &seed)| study.evaluate(s, seed, None, Sweeps::default())).collect::<Result<_>>()?;
    let table = study.agent_table(&runs)?;
    if let (Some(sys), Some(&seed)) = (systems.first(), seeds.first()) {
        write_trace(run, &study.trace(sys, seed, 0)?)?;
    }
    update_report(run, &study.ds.hash(), &seeds, vec![table], None)
}

/// gen-data, pretraining of the roster, the ground-truth space, fusion
/// training for every evaluation seed and the clean evaluation.
pub fn run_pipeline(cfg: &Config, run: &RunDir) -> Result<EvalReport> {
    let ds = gen_data(cfg, run)?;
    for a in &cfg.agents {
        pretrain(cfg, run, &ds, a)?;
    }
    train_gt(cfg, run, &ds)?;
    drop(ds);
    let study = open_study(cfg, run)?;
    eval_stage(&study, run, true)
}

/// Persisted summary of a study's headline comparisons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Headline {
    pub agent: String,
    pub local: f64,
    pub late: f64,
    pub collab: f64,
}

/// Per-agent `(local, late, collab)` AP@0.5 means from an `agents` table.
pub fn headlines(t: &SweepTable) -> Vec<Headline> {
    let mut out: Vec<Headline> = Vec::new();
    for r in &t.rows {
        let Some((id, kind)) = r.config.rsplit_once('/') else { continue };
        let h = match out.iter_mut().find(|h| h.agent == id) {
            Some(h) => h,
            None => {
                out.push(Headline { agent: id.into(), local: 0.0, late: 0.0, collab: 0.0 });
                out.last_mut().expect("pushed")
            }
        };
        match kind {
            "local" => h.local = r.ap50.mean,
            "late" => h.late = r.ap50.mean,
            "collab" => h.collab = r.ap50.mean,
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman() {
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(rank_correlation(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
        let r = rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn headline_parse() {
        let r = |c: &str, m: f64| TableRow { config: c.into(), x: None, ap50: MeanStd { mean: m, std: 0.0 }, ap70: MeanStd::default() };
        let t = SweepTable { name: "agents".into(), x_label: String::new(), rows: vec![r("L1/local", 0.5), r("L1/late", 0.6), r("L1/collab", 0.7), r("weak-C/local", 0.1)] };
        let h = headlines(&t);
        assert_eq!(h.len(), 2);
        assert_eq!((h[0].local, h[0].late, h[0].collab), (0.5, 0.6, 0.7));
        assert_eq!(h[1].agent, "weak-C");
    }
}
