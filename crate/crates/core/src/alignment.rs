//! Projectors into the common space, the agent-axis fusion transformer, and
//! the alignment and contrastive objectives.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowMap, Var};
use crate::error::{Error, Result};
use crate::geometry::{cell_indices_of_box, BevGridSpec, Box3D, FeatureMap};
use crate::head::{Anchor, DetectionHead};
use crate::nn::{LayerNorm, Linear, Mlp, ParamSet};
use crate::tensor::Matrix;

/// Per-cell MLP from an agent's channels to the common channels.
#[derive(Clone, Debug)]
pub struct Projector {
    pub agent_id: String,
    pub params: ParamSet,
    mlp: Mlp,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(agent_id: &str, d_a: usize, hidden: &[usize], d: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut widths = vec![d_a];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let mlp = Mlp::new(&mut params, "proj", &widths, rng);
        Self { agent_id: agent_id.to_string(), params, mlp }
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        self.mlp.forward(g, p, x)
    }

    pub fn project_matrix(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_width() {
            return Err(Error::Shape(format!("projector {} expects {} channels, got {}", self.agent_id, self.input_width(), x.cols())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x.clone());
        let y = self.forward(&mut g, &p, x);
        Ok(g.value(y).clone())
    }

    pub fn project(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let v = self.project_matrix(&f.values)?;
        FeatureMap::new(f.grid.with_channels(self.output_width()), v)
    }
}

/// Raw features zero-padded or truncated to `d` channels.
pub fn pad_or_truncate(g: &mut Graph, x: Var, d: usize) -> Var {
    let (rows, cols) = g.value(x).shape();
    match cols.cmp(&d) {
        std::cmp::Ordering::Equal => x,
        std::cmp::Ordering::Greater => g.slice_cols(x, 0, d),
        std::cmp::Ordering::Less => {
            let z = g.constant(Matrix::zeros(rows, d - cols));
            g.hcat(&[x, z])
        }
    }
}

/// Mean over cells of the per-cell Euclidean distance.
///
/// `weights` (one per row) and `total_cells` let a weighted subset of cells
/// stand for the whole grid; with unit weights over every cell this is the
/// plain mean.
pub fn projector_loss_graph(g: &mut Graph, f_gt: Var, f_proj: Var, weights: &[f64], total_cells: usize) -> Var {
    let diff = g.sub(f_gt, f_proj);
    let norms = g.row_norm(diff);
    let w = g.constant(Matrix::row_vector(weights.to_vec()));
    let s = g.matmul(w, norms);
    g.scale(s, 1.0 / total_cells.max(1) as f64)
}

pub fn projector_loss(f_gt: &FeatureMap, f_proj: &FeatureMap) -> Result<f64> {
    if f_gt.values.shape() != f_proj.values.shape() {
        return Err(Error::Shape("projector loss needs equal shapes".into()));
    }
    let n = f_gt.values.rows();
    let mut g = Graph::new();
    let a = g.constant(f_gt.values.clone());
    let b = g.constant(f_proj.values.clone());
    let l = projector_loss_graph(&mut g, a, b, &vec![1.0; n], n);
    Ok(g.scalar(l))
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc: Linear,
}

/// Agent-axis self-attention fusion and the collaborative head.
///
/// Each cell's agent features are its tokens. A block is
/// `y = x + MHSA(LN(x))`, `z = y + relu(FC(LN(y)))`; the fused cell feature
/// is the mean of the output tokens.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub params: ParamSet,
    pub head: DetectionHead,
    pub heads: usize,
    pub d: usize,
    blocks: Vec<Block>,
}

impl FusionModel {
    pub fn new<R: Rng + ?Sized>(d: usize, n_blocks: usize, heads: usize, head_hidden: usize, anchor: Anchor, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let blocks = (0..n_blocks)
            .map(|i| {
                let n = |s: &str| format!("block.{i}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut params, &n("ln1"), d),
                    q: Linear::new(&mut params, &n("q"), d, d, rng),
                    k: Linear::without_bias(&mut params, &n("k"), d, d, rng),
                    v: Linear::new(&mut params, &n("v"), d, d, rng),
                    o: scaled_linear(&mut params, &n("o"), d, 0.1, rng),
                    ln2: LayerNorm::new(&mut params, &n("ln2"), d),
                    fc: scaled_linear(&mut params, &n("fc"), d, 0.1, rng),
                }
            })
            .collect();
        let head = DetectionHead::new(d, head_hidden, anchor, rng);
        Self { params, head, heads, d, blocks }
    }

    pub fn checksum(&self) -> String {
        format!("{}:{}", self.params.checksum(), self.head.params.checksum())
    }

    /// Runs the blocks over `tokens` (rows grouped by `segs`) and mean-pools
    /// each segment.
    pub fn fuse_tokens(&self, g: &mut Graph, p: &[Var], tokens: Var, segs: Arc<Vec<usize>>) -> Var {
        let mut x = tokens;
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x);
            let q = b.q.forward(g, p, h);
            let k = b.k.forward(g, p, h);
            let v = b.v.forward(g, p, h);
            let a = g.segment_attention(q, k, v, segs.clone(), self.heads);
            let a = b.o.forward(g, p, a);
            x = g.add(x, a);
            let h = b.ln2.forward(g, p, x);
            let h = b.fc.forward(g, p, h);
            let h = g.relu(h);
            x = g.add(x, h);
        }
        g.rows(x, Arc::new(RowMap::segment_mean(&segs)))
    }

    /// Fuses per-agent `rows × d` features; `valid[a][r]` drops agent `a`'s
    /// token at row `r`. Every row needs at least one valid token.
    pub fn fuse_graph(&self, g: &mut Graph, p: &[Var], feats: &[Var], valid: Option<&[Vec<bool>]>) -> Var {
        let k = feats.len();
        assert!(k > 0, "fusion needs at least one input");
        let rows = g.value(feats[0]).rows();
        let (idx, segs) = token_layout(rows, k, valid);
        let joined = if k == 1 { feats[0] } else { g.hcat(feats) };
        let stacked = g.reshape(joined, rows * k, self.d);
        let tokens = g.rows(stacked, Arc::new(RowMap::gather(rows * k, &idx)));
        self.fuse_tokens(g, p, tokens, Arc::new(segs))
    }

    /// Fused feature map of spatially aligned `d`-channel maps.
    pub fn fuse(&self, features: &[FeatureMap]) -> Result<FeatureMap> {
        self.fuse_masked(features, None)
    }

    pub fn fuse_masked(&self, features: &[FeatureMap], valid: Option<&[Vec<bool>]>) -> Result<FeatureMap> {
        if features.is_empty() {
            return Err(Error::Invalid("fusion of an empty feature list".into()));
        }
        for f in features {
            if f.channels() != self.d || f.grid.num_cells() != features[0].grid.num_cells() {
                return Err(Error::Shape("fusion inputs must share the grid and common width".into()));
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let vars: Vec<Var> = features.iter().map(|f| g.constant(f.values.clone())).collect();
        let out = self.fuse_graph(&mut g, &p, &vars, valid);
        FeatureMap::new(features[0].grid, g.value(out).clone())
    }
}

fn scaled_linear<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d: usize, scale: f64, rng: &mut R) -> Linear {
    let l = Linear::new(ps, name, d, d, rng);
    ps.get_mut(l.weight_index()).scale_assign(scale);
    l
}

/// Token gather indices into the `(rows·k) × d` stack and segment offsets.
pub fn token_layout(rows: usize, k: usize, valid: Option<&[Vec<bool>]>) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::with_capacity(rows * k);
    let mut segs = Vec::with_capacity(rows + 1);
    segs.push(0);
    for r in 0..rows {
        for a in 0..k {
            if valid.map_or(true, |v| v[a][r]) {
                idx.push(r * k + a);
            }
        }
        assert!(idx.len() > *segs.last().unwrap(), "row {r} has no valid token");
        segs.push(idx.len());
    }
    (idx, segs)
}

/// Temperature and scale balancing of the object-level contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub balanced: bool,
    /// Mean objects per training frame.
    pub mu: f64,
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || (self.balanced && !(self.mu > 0.0)) {
            return Err(Error::Invalid("contrastive config needs τ > 0 and μ > 0 when balanced".into()));
        }
        Ok(())
    }
}

/// Mean of `F_GT` over the cells covered by `b`.
pub fn pooled_gt_feature(f_gt: &FeatureMap, b: &Box3D) -> Result<Vec<f64>> {
    let cells = cell_indices_of_box(b, &f_gt.grid);
    if cells.is_empty() {
        return Err(Error::EmptyFootprint);
    }
    let mut acc = vec![0.0; f_gt.channels()];
    for &c in &cells {
        for (a, v) in acc.iter_mut().zip(f_gt.values.row(c)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= cells.len() as f64);
    Ok(acc)
}

/// Cosine similarity over `τ`; zero when either vector is zero.
pub fn similarity(f: &[f64], u: &[f64], tau: f64) -> f64 {
    let nf = f.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nf == 0.0 || nu == 0.0 {
        return 0.0;
    }
    f.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / (nf * nu * tau)
}

/// Object-level contrastive loss.
///
/// `box_rows[b]` lists the rows of `fused` covered by object `b`, and
/// `anchors` holds one pooled ground-truth feature per object (same order).
/// Each covered cell is classified among all objects by temperature-scaled
/// cosine similarity; cross-entropies are summed and, when balanced, scaled
/// by `μ / |B|`. Returns `None` when there is no object.
pub fn contrastive_loss_graph(g: &mut Graph, fused: Var, box_rows: &[Vec<usize>], anchors: Var, cfg: &ContrastiveConfig) -> Option<Var> {
    let nb = box_rows.len();
    if nb == 0 {
        return None;
    }
    assert_eq!(g.value(anchors).rows(), nb, "one anchor per object");
    let rows = g.value(fused).rows();
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for (b, rs) in box_rows.iter().enumerate() {
        for &r in rs {
            idx.push(r);
            targets.push(b);
        }
    }
    if idx.is_empty() {
        return Some(g.constant(Matrix::scalar(0.0)));
    }
    let cells = g.rows(fused, Arc::new(RowMap::gather(rows, &idx)));
    let fc = g.row_normalize(cells);
    let un = g.row_normalize(anchors);
    let logits = g.matmul_t(fc, un);
    let logits = g.scale(logits, 1.0 / cfg.tau);
    let ce = g.softmax_cross_entropy(logits, Arc::new(targets));
    Some(if cfg.balanced { g.scale(ce, cfg.mu / nb as f64) } else { ce })
}

/// Objects with at least one covered cell, their covered grid cells, and
/// pooled anchors from `f_gt`.
pub fn object_cells(f_gt: &FeatureMap, boxes: &[Box3D]) -> (Vec<Vec<usize>>, Matrix) {
    let mut rows = Vec::new();
    let mut anchors = Vec::new();
    for b in boxes {
        if let Ok(u) = pooled_gt_feature(f_gt, b) {
            rows.push(cell_indices_of_box(b, &f_gt.grid));
            anchors.extend(u);
        }
    }
    let n = rows.len();
    (rows, Matrix::from_vec(n, f_gt.channels(), anchors))
}

/// Contrastive loss of a fused map against `F_GT` anchors.
pub fn contrastive_loss(fused: &FeatureMap, boxes: &[Box3D], f_gt: &FeatureMap, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    let (rows, anchors) = object_cells(f_gt, boxes);
    if boxes.is_empty() || rows.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let mut g = Graph::new();
    let f = g.constant(fused.values.clone());
    let a = g.constant(anchors);
    let l = contrastive_loss_graph(&mut g, f, &rows, a, cfg).expect("objects present");
    Ok(g.scalar(l))
}

/// Sum of contrastive losses of every unordered pair of modalities, each
/// pair fused by `fusion`.
pub fn combinatorial_loss(
    projected: &[(String, FeatureMap)],
    boxes: &[Box3D],
    f_gt: &FeatureMap,
    fusion: &FusionModel,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    if projected.len() < 2 {
        return Err(Error::Invalid("combinatorial loss needs at least two modalities".into()));
    }
    let mut total = 0.0;
    for (i, j) in pairs(projected.len()) {
        let fused = fusion.fuse(&[projected[i].1.clone(), projected[j].1.clone()])?;
        total += contrastive_loss(&fused, boxes, f_gt, cfg)?;
    }
    Ok(total)
}

/// Unordered index pairs `(i, j)`, `i < j`.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Whole-grid helper for tests and tools: `F_GT`-shaped zero map.
pub fn zero_map(grid: &BevGridSpec, d: usize) -> FeatureMap {
    FeatureMap::zeros(grid.with_channels(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn grid() -> BevGridSpec {
        BevGridSpec { x_min: -6.0, x_max: 6.0, y_min: -4.0, y_max: 4.0, cell: 1.0, channels: 8 }
    }

    fn random_map(grid: &BevGridSpec, d: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(grid.with_channels(d), Matrix::randn(grid.num_cells(), d, 1.0, &mut rng_for(seed, "m", 0))).unwrap()
    }

    #[test]
    fn projector_is_cell_local() {
        let g = grid();
        let p = Projector::new("a", 5, &[16, 8], 8, &mut rng_for(0, "p", 0));
        let f = random_map(&g, 5, 1);
        let mut swapped = f.clone();
        let (a, b) = (3, 17);
        let ra = f.values.row(a).to_vec();
        swapped.values.row_mut(a).copy_from_slice(f.values.row(b));
        swapped.values.row_mut(b).copy_from_slice(&ra);
        let y = p.project(&f).unwrap();
        let ys = p.project(&swapped).unwrap();
        assert_eq!(y.values.row(a), ys.values.row(b));
        assert_eq!(y.values.row(b), ys.values.row(a));
        assert!(p.project(&random_map(&g, 6, 1)).is_err());
    }

    #[test]
    fn projector_loss_identities() {
        let g = grid();
        let f = random_map(&g, 8, 2);
        assert_eq!(projector_loss(&f, &f).unwrap(), 0.0);
        let v = [0.3, -0.4, 0.0, 1.2, 0.0, 0.0, 0.5, -0.1];
        let mut shifted = f.clone();
        for r in 0..shifted.values.rows() {
            for (x, dv) in shifted.values.row_mut(r).iter_mut().zip(&v) {
                *x += dv;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((projector_loss(&f, &shifted).unwrap() - norm).abs() < 1e-12);
        let h = random_map(&g, 8, 3);
        assert_eq!(projector_loss(&f, &h).unwrap(), projector_loss(&h, &f).unwrap());
    }

    #[test]
    fn fusion_is_permutation_invariant_and_variable_width() {
        let g = grid();
        let m = FusionModel::new(8, 2, 4, 16, Anchor::default(), &mut rng_for(0, "f", 0));
        let maps: Vec<FeatureMap> = (0..3).map(|i| random_map(&g, 8, 10 + i)).collect();
        let a = m.fuse(&maps).unwrap();
        let b = m.fuse(&[maps[2].clone(), maps[0].clone(), maps[1].clone()]).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-9);
        assert!(m.fuse(&maps[..1]).is_ok());
        assert!(m.fuse(&[]).is_err());
    }

    #[test]
    fn masked_tokens_are_dropped() {
        let g = grid();
        let m = FusionModel::new(8, 2, 4, 16, Anchor::default(), &mut rng_for(0, "f", 0));
        let maps: Vec<FeatureMap> = (0..2).map(|i| random_map(&g, 8, 20 + i)).collect();
        let n = g.num_cells();
        let valid = vec![vec![true; n], vec![false; n]];
        let masked = m.fuse_masked(&maps, Some(&valid)).unwrap();
        let alone = m.fuse(&maps[..1]).unwrap();
        assert_eq!(masked, alone);
    }

    #[test]
    fn similarity_identities() {
        let f = [0.3, -1.0, 2.0];
        assert!((similarity(&f, &f, 0.1) - 10.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], 0.1), 0.0);
        assert_eq!(similarity(&f, &[0.0; 3], 0.1), 0.0);
        let u = [0.5, 0.5, -0.2];
        assert!((similarity(&f, &u, 0.05) - 2.0 * similarity(&f, &u, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_closed_forms() {
        let g = grid();
        let d = 8;
        let a = Box3D::bev(-3.5, -1.5, 2.0, 2.0, 0.0);
        let b = Box3D::bev(3.5, 1.5, 2.0, 2.0, 0.0);
        let mut f_gt = FeatureMap::zeros(g.with_channels(d));
        for c in cell_indices_of_box(&a, &g) {
            f_gt.values.row_mut(c)[0] = 1.0;
        }
        for c in cell_indices_of_box(&b, &g) {
            f_gt.values.row_mut(c)[1] = 2.0;
        }
        let cfg = ContrastiveConfig { tau: 0.1, balanced: false, mu: 1.0 };
        let l = contrastive_loss(&f_gt, &[a, b], &f_gt, &cfg).unwrap();
        let n_cells = (cell_indices_of_box(&a, &g).len() + cell_indices_of_box(&b, &g).len()) as f64;
        assert!((l - n_cells * (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-12);
        let single = contrastive_loss(&random_map(&g, d, 4), &[a], &f_gt, &cfg).unwrap();
        assert_eq!(single, 0.0);
        let bal = ContrastiveConfig { balanced: true, mu: 2.0, ..cfg };
        assert_eq!(contrastive_loss(&f_gt, &[a, b], &f_gt, &bal).unwrap(), l);
    }

    #[test]
    fn pooled_feature_cases() {
        let g = grid();
        let f = random_map(&g, 8, 5);
        let one = Box3D::bev(0.5, 0.5, 0.9, 0.9, 0.0);
        let c = cell_indices_of_box(&one, &g);
        assert_eq!(c.len(), 1);
        assert_eq!(pooled_gt_feature(&f, &one).unwrap(), f.values.row(c[0]).to_vec());
        let tiny = Box3D::bev(0.0, 0.0, 0.2, 0.2, 0.0);
        assert!(matches!(pooled_gt_feature(&f, &tiny), Err(Error::EmptyFootprint)));
    }
}
