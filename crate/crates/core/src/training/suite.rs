//! Finite-difference checks over every trainable operation, on small
//! random instances.

use serde::{Deserialize, Serialize};

use crate::agents::AgentModel;
use crate::alignment::{contrastive_loss_graph, projector_loss_graph, ContrastiveConfig, FusionModel, Projector};
use crate::autograd::gradcheck::{check_gradients, GradReport, GradcheckOptions};
use crate::autograd::{Graph, Var};
use crate::config::{Ablation, AgentConfig, Config, FusionConfig, GtSpaceConfig};
use crate::geometry::{BevGridSpec, Box3D};
use crate::gtspace::GtEncoder;
use crate::head::{detection_loss, Anchor, CellTargets, DetectionHead};
use crate::nn::{Linear, ParamSet};
use crate::pipeline::{Codec, CollabSystem};
use crate::seed::rng_for;
use crate::tensor::Matrix;

use super::{step_graph, FusionSet, SystemVars};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradcheckSuite {
    pub step: f64,
    pub tolerance: f64,
    pub reports: Vec<GradReport>,
}

impl GradcheckSuite {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradReport::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Small configuration shared by the checks.
pub fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.grid = BevGridSpec { x_min: -4.0, x_max: 4.0, y_min: -3.0, y_max: 3.0, cell: 1.0, channels: 8 };
    cfg.gtspace = GtSpaceConfig { box_hidden: 8, d_beta: 6, pe_dim: 4, cell_hidden: 8, head_hidden: 8, ..GtSpaceConfig::default() };
    cfg.fusion = FusionConfig { heads: 2, projector_hidden: vec![8, 6], head_hidden: 8, ..FusionConfig::default() };
    cfg.channel.compression_ratio = 2;
    cfg.agents = ["L1", "C1"]
        .iter()
        .map(|n| {
            let mut a = AgentConfig::preset(n).unwrap();
            a.channels = 4;
            a.depth = 1;
            a
        })
        .collect();
    cfg
}

fn boxes() -> Vec<Box3D> {
    vec![Box3D::new(-1.2, -0.6, 0.8, 3.1, 1.9, 1.6, 0.3, 0), Box3D::new(1.9, 1.1, 0.7, 2.6, 1.7, 1.5, -0.4, 0)]
}

/// Standard-normal matrix from a fixed stream.
fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::randn(rows, cols, 1.0, &mut rng_for(seed, "gradcheck/input", 0))
}

/// Scalar probe `Σ x ⊙ R` with fixed random `R`.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (r, c) = g.value(x).shape();
    let w = g.constant(rand(r, c, seed ^ 0x5eed));
    let m = g.mul(x, w);
    g.sum(m)
}

fn params_and(ps: &[&ParamSet], extra: &[Matrix]) -> (Vec<Matrix>, Vec<usize>) {
    let mut all = Vec::new();
    let mut lens = Vec::new();
    for p in ps {
        lens.push(p.len());
        all.extend(p.values().iter().cloned());
    }
    all.extend(extra.iter().cloned());
    (all, lens)
}

fn split<'a>(vars: &'a [Var], lens: &[usize]) -> (Vec<&'a [Var]>, &'a [Var]) {
    let mut out = Vec::new();
    let mut at = 0;
    for &l in lens {
        out.push(&vars[at..at + l]);
        at += l;
    }
    (out, &vars[at..])
}

pub fn run_gradcheck(seed: u64) -> GradcheckSuite {
    let opts = GradcheckOptions::default();
    let cfg = small_config();
    let grid = cfg.grid;
    let d = grid.channels;
    let mut reports = Vec::new();
    let mut rng = rng_for(seed, "gradcheck/init", 0);

    {
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "affine", 5, 3, &mut rng);
        let (inputs, lens) = params_and(&[&ps], &[rand(4, 5, seed)]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let y = lin.forward(g, p[0], x[0]);
            probe(g, y, 1)
        };
        reports.push(check_gradients("affine", &inputs, &f, &opts));
    }

    let enc = GtEncoder::new(&grid, &cfg.world, &cfg.gtspace, &mut rng);
    {
        let x: Vec<f64> = boxes().iter().flat_map(|b| enc.scales.standardize(b)).collect();
        let x = Matrix::from_vec(2, enc.scales.width(), x);
        let (inputs, lens) = params_and(&[&enc.params], &[x]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let b = enc.encode_inputs(g, p[0], x[0]);
            probe(g, b, 2)
        };
        reports.push(check_gradients("box_encoder", &inputs, &f, &opts));
    }
    {
        let cells: Vec<usize> = (0..grid.num_cells()).collect();
        let bx = boxes();
        let (inputs, lens) = params_and(&[&enc.params], &[]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, _) = split(v, &lens);
            let u = enc.cell_features(g, p[0], &bx, &cells);
            probe(g, u, 3)
        };
        reports.push(check_gradients("cell_mlp", &inputs, &f, &opts));
    }

    for a in &cfg.agents {
        let model = AgentModel::new(a, &grid, Anchor::default(), 8, seed);
        let input = match &model.encoder {
            crate::agents::Encoder::Point { .. } => rand(grid.num_cells(), crate::agents::PILLAR_STATS, seed + 4).map(f64::abs),
            crate::agents::Encoder::Raster { raster, .. } => rand(raster.num_cells(), 1, seed + 5).map(f64::abs),
        };
        let (inputs, lens) = params_and(&[&model.encoder_params], &[input]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let y = model.encode_graph(g, p[0], x[0]);
            probe(g, y, 6)
        };
        reports.push(check_gradients(&format!("{}_encoder", a.modality()), &inputs, &f, &opts));
    }

    let rows = 10;
    {
        let proj = Projector::new("p", 4, &cfg.fusion.projector_hidden, d, &mut rng);
        let (inputs, lens) = params_and(&[&proj.params], &[rand(rows, 4, seed + 7)]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let y = proj.forward(g, p[0], x[0]);
            probe(g, y, 8)
        };
        reports.push(check_gradients("projector", &inputs, &f, &opts));
    }
    {
        let codec = Codec::new(d, 2, &mut rng).expect("ratio divides");
        let (inputs, lens) = params_and(&[&codec.params], &[rand(rows, d, seed + 9)]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let z = codec.compress_graph(g, p[0], x[0]);
            let r = codec.decompress_graph(g, p[0], z);
            projector_loss_graph(g, x[0], r, &vec![1.0; rows], rows)
        };
        reports.push(check_gradients("codec_reconstruction", &inputs, &f, &opts));
    }

    let fusion = FusionModel::new(d, 2, 2, 8, Anchor::default(), &mut rng);
    {
        let (inputs, lens) = params_and(&[&fusion.params], &[rand(rows, d, seed + 10), rand(rows, d, seed + 11)]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let h = fusion.fuse_graph(g, p[0], x, None);
            probe(g, h, 12)
        };
        reports.push(check_gradients("fusion_2_blocks", &inputs, &f, &opts));
    }
    {
        let inputs = vec![rand(rows, d, seed + 13), rand(rows, d, seed + 14)];
        let f = |g: &mut Graph, v: &[Var]| projector_loss_graph(g, v[0], v[1], &vec![1.0; rows], rows);
        reports.push(check_gradients("projector_loss", &inputs, &f, &opts));
    }

    let box_rows = vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8]];
    let ccfg = ContrastiveConfig { tau: 0.1, balanced: true, mu: 2.5 };
    {
        let inputs = vec![rand(rows, d, seed + 15), rand(3, d, seed + 16)];
        let f = |g: &mut Graph, v: &[Var]| contrastive_loss_graph(g, v[0], &box_rows, v[1], &ccfg).expect("objects");
        reports.push(check_gradients("contrastive_pair", &inputs, &f, &opts));
    }
    {
        let maps: Vec<Matrix> = (0..3).map(|i| rand(rows, d, seed + 17 + i)).collect();
        let anchors = rand(3, d, seed + 20);
        let f = |g: &mut Graph, v: &[Var]| {
            let p = fusion.params.bind(g, false);
            let a = g.constant(anchors.clone());
            let terms: Vec<(Var, f64)> = crate::alignment::pairs(v.len())
                .into_iter()
                .map(|(i, j)| {
                    let h = fusion.fuse_graph(g, &p, &[v[i], v[j]], None);
                    (contrastive_loss_graph(g, h, &box_rows, a, &ccfg).expect("objects"), 1.0)
                })
                .collect();
            g.weighted_sum(&terms)
        };
        reports.push(check_gradients("combinatorial_contrastive", &maps, &f, &opts));
    }

    let targets = CellTargets::full(&boxes(), &grid, &Anchor::default());
    {
        let head = DetectionHead::new(d, 8, Anchor::default(), &mut rng);
        let n = targets.len();
        let (inputs, lens) = params_and(&[&fusion.params, &head.params], &[rand(n, d, seed + 21), rand(n, d, seed + 22)]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, x) = split(v, &lens);
            let h = fusion.fuse_graph(g, p[0], x, None);
            let out = head.forward(g, p[1], h);
            detection_loss(g, out, &targets).total
        };
        reports.push(check_gradients("fused_detection_loss", &inputs, &f, &opts));
    }

    {
        let agents: Vec<AgentModel> = cfg.agents.iter().map(|a| AgentModel::new(a, &grid, Anchor::default(), 8, seed)).collect();
        let sys = CollabSystem::new(&cfg, agents, Ablation::default(), seed).expect("small system");
        let n = targets.len();
        let features: Vec<Matrix> = (0..2).map(|i| rand(n, 4, seed + 23 + i)).collect();
        let reference = rand(n, d, seed + 25);
        let sets = vec![
            FusionSet { members: vec![0], ego: 0 },
            FusionSet { members: vec![1], ego: 1 },
            FusionSet { members: vec![0, 1], ego: 0 },
        ];
        let groups: Vec<&ParamSet> = sys
            .projectors
            .iter()
            .flatten()
            .map(|p| &p.params)
            .chain([&sys.codec.params, &sys.fusion.params, &sys.fusion.head.params])
            .collect();
        let (inputs, lens) = params_and(&groups, &[]);
        let f = |g: &mut Graph, v: &[Var]| {
            let (p, _) = split(v, &lens);
            let vars = SystemVars {
                projectors: vec![Some(p[0].to_vec()), Some(p[1].to_vec())],
                codec: p[2].to_vec(),
                fusion: p[3].to_vec(),
                head: p[4].to_vec(),
            };
            let sv = step_graph(g, &sys, &vars, &features, &targets, &reference, &sets, &[2], &[0, 1], Some(&ccfg));
            let terms = [(sv.phi.expect("phi"), 1.0), (sv.e.expect("contrastive"), 1.0), (sv.b, 1.0), (sv.rec.expect("codec"), 0.1)];
            g.weighted_sum(&terms)
        };
        reports.push(check_gradients("total_objective", &inputs, &f, &opts));
    }

    GradcheckSuite { step: opts.step, tolerance: opts.tolerance, reports }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let s = run_gradcheck(0);
        for r in &s.reports {
            assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_err);
        }
        assert_eq!(s.reports.len(), 13);
    }
}
