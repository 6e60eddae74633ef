//! Per-cell detection head and the base BEV detection loss.
//!
//! Every cell predicts an objectness logit and eight regression values:
//! `δx, δy` (cell units from the cell centre), `log l, log w` relative to the
//! anchor extent, `sin 2r, cos 2r`, a `z` offset from the anchor centre height
//! and `log h`. Yaw is regressed as a doubled angle because a footprint is
//! unchanged by a half turn.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowMap, Var};
use crate::config::WorldConfig;
use crate::geometry::{cells_of_box, nms, normalize_angle, BevGridSpec, Box3D, Detection, FeatureMap};
use crate::nn::{Mlp, ParamSet};
use crate::tensor::Matrix;

pub const OUTPUTS: usize = 9;
pub const REG_DIMS: usize = OUTPUTS - 1;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const REG_WEIGHT: f64 = 2.0;
const LOG_EXTENT_CLAMP: f64 = 3.0;

/// Default object extent used to scale size regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub l: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn from_world(w: &WorldConfig) -> Self {
        let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
        Self { l: mid(w.length), w: mid(w.width), h: mid(w.height) }
    }
}

impl Default for Anchor {
    fn default() -> Self {
        Self::from_world(&WorldConfig::default())
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub params: ParamSet,
    pub anchor: Anchor,
    mlp: Mlp,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, anchor: Anchor, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "head", &[input, hidden, OUTPUTS], rng);
        Self { params, anchor, mlp }
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    /// `rows × d` features to `rows × 9` outputs.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        self.mlp.forward(g, p, x)
    }

    pub fn predict(&self, features: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(features.clone());
        let y = self.forward(&mut g, &p, x);
        g.value(y).clone()
    }
}

/// Regression targets of `b` seen from the cell centred at `(cx, cy)`.
pub fn encode_target(b: &Box3D, cx: f64, cy: f64, cell: f64, anchor: &Anchor) -> [f64; REG_DIMS] {
    [
        (b.x - cx) / cell,
        (b.y - cy) / cell,
        (b.l / anchor.l).ln(),
        (b.w / anchor.w).ln(),
        (2.0 * b.r).sin(),
        (2.0 * b.r).cos(),
        b.z - anchor.h / 2.0,
        (b.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode_target`]; `out` holds the eight regression values.
pub fn decode_box(out: &[f64], cx: f64, cy: f64, cell: f64, anchor: &Anchor) -> Box3D {
    let ex = |v: f64| v.clamp(-LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP).exp();
    let r = out[4].atan2(out[5]) / 2.0;
    Box3D {
        x: cx + out[0] * cell,
        y: cy + out[1] * cell,
        z: anchor.h / 2.0 + out[6],
        l: anchor.l * ex(out[2]),
        w: anchor.w * ex(out[3]),
        h: anchor.h * ex(out[7]),
        r: normalize_angle(r),
        c: 0,
    }
}

/// Decodes head outputs for the grid cells `cells` (row `i` belongs to
/// `cells[i]`), thresholds scores and applies NMS.
pub fn decode(outputs: &Matrix, cells: &[usize], grid: &BevGridSpec, anchor: &Anchor, score_thr: f64, nms_iou: f64) -> Vec<Detection> {
    assert_eq!(outputs.rows(), cells.len());
    let mut dets = Vec::new();
    for (i, &cell) in cells.iter().enumerate() {
        let row = outputs.row(i);
        let score = crate::autograd::sigmoid(row[0]);
        if score > score_thr {
            let (xc, yc) = grid.coords(cell);
            let (cx, cy) = grid.cell_center(xc, yc);
            dets.push(Detection::new(decode_box(&row[1..], cx, cy, grid.cell, anchor), score));
        }
    }
    nms(&dets, nms_iou)
}

/// Runs the head over every cell of `f` and decodes.
pub fn detect(f: &FeatureMap, head: &DetectionHead, score_thr: f64, nms_iou: f64) -> Vec<Detection> {
    let out = head.predict(&f.values);
    let cells: Vec<usize> = (0..f.grid.num_cells()).collect();
    decode(&out, &cells, &f.grid, &head.anchor, score_thr, nms_iou)
}

/// Supervision for a set of grid cells.
///
/// Rows are cells in ascending grid order. Positives are cells whose centre
/// lies in some box; a cell inside several boxes regresses the one with the
/// nearest centre. `weights` scale each cell's classification term so that a
/// sampled subset of negatives stands in for all of them.
#[derive(Clone, Debug)]
pub struct CellTargets {
    pub cells: Vec<usize>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row positions of positive cells.
    pub positives: Vec<usize>,
    /// `positives × 8` regression targets.
    pub reg: Matrix,
    pub boxes: Vec<Box3D>,
    /// For each box, row positions of every cell it covers.
    pub box_rows: Vec<Vec<usize>>,
    pub total_cells: usize,
}

impl CellTargets {
    /// Supervision over every cell of the grid.
    pub fn full(boxes: &[Box3D], grid: &BevGridSpec, anchor: &Anchor) -> Self {
        let n = grid.num_cells();
        Self::build(boxes, grid, anchor, (0..n).collect(), |_| 1.0)
    }

    /// Positives, their one-cell ring, and `negatives` further cells drawn
    /// uniformly from the rest, reweighted to stand for the whole rest.
    pub fn sampled<R: Rng + ?Sized>(boxes: &[Box3D], grid: &BevGridSpec, anchor: &Anchor, negatives: usize, rng: &mut R) -> Self {
        let n = grid.num_cells();
        let covered: BTreeSet<usize> = boxes.iter().flat_map(|b| cell_indices(b, grid)).collect();
        let mut ring = BTreeSet::new();
        for &c in &covered {
            let (xc, yc) = grid.coords(c);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    let (x, y) = (xc as i64 + dx, yc as i64 + dy);
                    if x >= 0 && y >= 0 && (x as usize) < grid.height() && (y as usize) < grid.width() {
                        let j = grid.index(x as usize, y as usize);
                        if !covered.contains(&j) {
                            ring.insert(j);
                        }
                    }
                }
            }
        }
        let rest: Vec<usize> = (0..n).filter(|c| !covered.contains(c) && !ring.contains(c)).collect();
        let take = negatives.min(rest.len());
        let picked: BTreeSet<usize> = sample(rng, rest.len(), take).into_iter().map(|i| rest[i]).collect();
        let w_rest = if take > 0 { rest.len() as f64 / take as f64 } else { 0.0 };
        let cells: Vec<usize> = covered.iter().chain(&ring).chain(&picked).copied().collect::<BTreeSet<_>>().into_iter().collect();
        Self::build(boxes, grid, anchor, cells, |c| if picked.contains(&c) { w_rest } else { 1.0 })
    }

    /// Supervision over the given ascending cells, all weighted 1.
    pub fn subset(boxes: &[Box3D], grid: &BevGridSpec, anchor: &Anchor, cells: Vec<usize>) -> Self {
        Self::build(boxes, grid, anchor, cells, |_| 1.0)
    }

    /// Positives plus a single uncovered cell weighted by the uncovered count.
    ///
    /// Exact for maps whose uncovered cells all share one feature vector,
    /// which holds for ground-truth maps (they are all zero).
    pub fn with_background(boxes: &[Box3D], grid: &BevGridSpec, anchor: &Anchor) -> Self {
        let covered: BTreeSet<usize> = boxes.iter().flat_map(|b| cell_indices(b, grid)).collect();
        let n_bg = grid.num_cells() - covered.len();
        let bg = (0..grid.num_cells()).find(|c| !covered.contains(c));
        let cells: Vec<usize> = covered.iter().copied().chain(bg).collect::<BTreeSet<_>>().into_iter().collect();
        Self::build(boxes, grid, anchor, cells, |_| n_bg as f64)
    }

    fn build(boxes: &[Box3D], grid: &BevGridSpec, anchor: &Anchor, cells: Vec<usize>, weight: impl Fn(usize) -> f64) -> Self {
        let pos_of = |c: usize| cells.binary_search(&c).ok();
        let mut owner: Vec<Option<(usize, f64)>> = vec![None; cells.len()];
        let mut box_rows = Vec::with_capacity(boxes.len());
        for (bi, b) in boxes.iter().enumerate() {
            let mut rows = Vec::new();
            for c in cell_indices(b, grid) {
                if let Some(r) = pos_of(c) {
                    rows.push(r);
                    let (xc, yc) = grid.coords(c);
                    let (cx, cy) = grid.cell_center(xc, yc);
                    let d = (b.x - cx).hypot(b.y - cy);
                    if owner[r].map_or(true, |(_, od)| d < od) {
                        owner[r] = Some((bi, d));
                    }
                }
            }
            box_rows.push(rows);
        }
        let mut labels = Vec::with_capacity(cells.len());
        let mut weights = Vec::with_capacity(cells.len());
        let mut positives = Vec::new();
        let mut reg = Vec::new();
        for (r, &c) in cells.iter().enumerate() {
            match owner[r] {
                Some((bi, _)) => {
                    labels.push(1.0);
                    weights.push(1.0);
                    positives.push(r);
                    let (xc, yc) = grid.coords(c);
                    let (cx, cy) = grid.cell_center(xc, yc);
                    reg.extend_from_slice(&encode_target(&boxes[bi], cx, cy, grid.cell, anchor));
                }
                None => {
                    labels.push(0.0);
                    weights.push(weight(c));
                }
            }
        }
        let np = positives.len();
        Self {
            cells,
            labels,
            weights,
            positives,
            reg: Matrix::from_vec(np, REG_DIMS, reg),
            boxes: boxes.to_vec(),
            box_rows,
            total_cells: grid.num_cells(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    /// Row map gathering these cells out of a full-grid feature matrix.
    pub fn gather(&self) -> Arc<RowMap> {
        Arc::new(RowMap::gather(self.total_cells, &self.cells))
    }
}

fn cell_indices(b: &Box3D, grid: &BevGridSpec) -> Vec<usize> {
    cells_of_box(b, grid).into_iter().map(|(x, y)| grid.index(x, y)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossTerms {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLossVars {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
}

impl DetectionLossVars {
    pub fn values(&self, g: &Graph) -> DetectionLossTerms {
        DetectionLossTerms { cls_loss: g.scalar(self.cls), reg_loss: g.scalar(self.reg), total: g.scalar(self.total) }
    }
}

/// Focal classification over all target cells, normalized by the positive
/// count, plus mean absolute regression error on positives.
pub fn detection_loss(g: &mut Graph, outputs: Var, t: &CellTargets) -> DetectionLossVars {
    assert_eq!(g.value(outputs).shape(), (t.len(), OUTPUTS), "head outputs do not match targets");
    let np = t.num_positives();
    let logits = g.slice_cols(outputs, 0, 1);
    let focal = g.focal_bce(logits, &t.labels, &t.weights, FOCAL_ALPHA, FOCAL_GAMMA);
    let cls = g.scale(focal, 1.0 / np.max(1) as f64);
    let reg = if np > 0 {
        let pos = g.rows(outputs, Arc::new(RowMap::gather(t.len(), &t.positives)));
        let pred = g.slice_cols(pos, 1, OUTPUTS);
        let target = g.constant(t.reg.clone());
        let diff = g.sub(pred, target);
        let a = g.abs(diff);
        let s = g.sum(a);
        g.scale(s, 1.0 / (np * REG_DIMS) as f64)
    } else {
        g.constant(Matrix::scalar(0.0))
    };
    let total = g.weighted_sum(&[(cls, 1.0), (reg, REG_WEIGHT)]);
    DetectionLossVars { cls, reg, total }
}

/// Loss value of fixed head outputs.
pub fn detection_loss_value(outputs: &Matrix, t: &CellTargets) -> DetectionLossTerms {
    let mut g = Graph::new();
    let o = g.constant(outputs.clone());
    detection_loss(&mut g, o, t).values(&g)
}
