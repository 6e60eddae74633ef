//! The ground-truth feature space: box labels encoded into a BEV feature map
//! that a detection head can decode back into the same boxes.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowMap, Var};
use crate::config::{Config, GtSpaceConfig, WorldConfig};
use crate::dataset::{labels_in, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{average_precision, gt_loss, FrameDetections};
use crate::geometry::{cells_of_box, sinusoidal_pe, BevGridSpec, Box3D, Detection, FeatureMap};
use crate::head::{decode, detection_loss, Anchor, CellTargets, DetectionHead};
use crate::io::{params_container, restore_params, Container};
use crate::nn::{collect_grads, cosine_lr, AdamW, Linear, Mlp, ParamSet, LN_EPS};
use crate::seed::rng_for;
use crate::tensor::Matrix;

/// Scales used to standardize box fields before the box encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxScales {
    pub x_mid: f64,
    pub y_mid: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub l_max: f64,
    pub w_max: f64,
    pub h_max: f64,
    pub num_classes: u32,
}

impl BoxScales {
    pub fn new(grid: &BevGridSpec, world: &WorldConfig) -> Self {
        Self {
            x_mid: 0.5 * (grid.x_min + grid.x_max),
            y_mid: 0.5 * (grid.y_min + grid.y_max),
            half_x: 0.5 * (grid.x_max - grid.x_min),
            half_y: 0.5 * (grid.y_max - grid.y_min),
            l_max: world.length[1],
            w_max: world.width[1],
            h_max: world.height[1],
            num_classes: world.num_classes.max(1),
        }
    }

    pub fn width(&self) -> usize {
        8 + self.num_classes as usize
    }

    /// Centre over half-extent, extents over their maxima, yaw as
    /// `(sin r, cos r)`, class one-hot.
    pub fn standardize(&self, b: &Box3D) -> Vec<f64> {
        let mut v = vec![
            (b.x - self.x_mid) / self.half_x,
            (b.y - self.y_mid) / self.half_y,
            b.z / self.h_max,
            b.l / self.l_max,
            b.w / self.w_max,
            b.h / self.h_max,
            b.r.sin(),
            b.r.cos(),
        ];
        v.extend((0..self.num_classes).map(|c| if c == b.c { 1.0 } else { 0.0 }));
        v
    }
}

/// Box encoder (two affine layers, rectifier between, layer normalization)
/// and the per-cell MLP over `β ⊕ PE(x_c, y_c)`.
#[derive(Clone, Debug)]
pub struct GtEncoder {
    pub params: ParamSet,
    pub grid: BevGridSpec,
    pub scales: BoxScales,
    pub pe_dim: usize,
    fc1: Linear,
    fc2: Linear,
    cell_mlp: Mlp,
}

impl GtEncoder {
    pub fn new<R: Rng + ?Sized>(grid: &BevGridSpec, world: &WorldConfig, cfg: &GtSpaceConfig, rng: &mut R) -> Self {
        let scales = BoxScales::new(grid, world);
        let mut params = ParamSet::new();
        let fc1 = Linear::new(&mut params, "box_fc.0", scales.width(), cfg.box_hidden, rng);
        let fc2 = Linear::new(&mut params, "box_fc.1", cfg.box_hidden, cfg.d_beta, rng);
        let cell_mlp = Mlp::new(&mut params, "cell_mlp", &[cfg.d_beta + cfg.pe_dim, cfg.cell_hidden, grid.channels], rng);
        Self { params, grid: *grid, scales, pe_dim: cfg.pe_dim, fc1, fc2, cell_mlp }
    }

    pub fn d_beta(&self) -> usize {
        self.fc2.fan_out
    }

    pub fn channels(&self) -> usize {
        self.cell_mlp.output_width()
    }

    /// `β` for each row of standardized box inputs.
    pub fn encode_inputs(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h);
        g.layer_norm(h, LN_EPS)
    }

    pub fn encode_box(&self, b: &Box3D) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Matrix::row_vector(self.scales.standardize(b)));
        let beta = self.encode_inputs(&mut g, &p, x);
        g.value(beta).data().to_vec()
    }

    /// Features of the cells `cells` (ascending grid indices) under the
    /// overlap-sum rule; uncovered cells are zero.
    pub fn cell_features(&self, g: &mut Graph, p: &[Var], boxes: &[Box3D], cells: &[usize]) -> Var {
        let d = self.channels();
        let mut pair_box = Vec::new();
        let mut pair_row = Vec::new();
        let mut pe = Vec::new();
        for (bi, b) in boxes.iter().enumerate() {
            for (xc, yc) in cells_of_box(b, &self.grid) {
                if let Ok(r) = cells.binary_search(&self.grid.index(xc, yc)) {
                    pair_box.push(bi);
                    pair_row.push(r);
                    pe.extend(sinusoidal_pe(xc, yc, self.pe_dim));
                }
            }
        }
        if pair_box.is_empty() {
            return g.constant(Matrix::zeros(cells.len(), d));
        }
        let inputs: Vec<f64> = boxes.iter().flat_map(|b| self.scales.standardize(b)).collect();
        let x = g.constant(Matrix::from_vec(boxes.len(), self.scales.width(), inputs));
        let beta = self.encode_inputs(g, p, x);
        let per_pair = g.rows(beta, Arc::new(RowMap::gather(boxes.len(), &pair_box)));
        let pe = g.constant(Matrix::from_vec(pair_box.len(), self.pe_dim, pe));
        let joined = g.hcat(&[per_pair, pe]);
        let u = self.cell_mlp.forward(g, p, joined);
        g.rows(u, Arc::new(RowMap::scatter_add(cells.len(), &pair_row)))
    }

    /// `F_GT` over the whole grid.
    pub fn build_gt_map(&self, boxes: &[Box3D]) -> FeatureMap {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let cells: Vec<usize> = (0..self.grid.num_cells()).collect();
        let f = self.cell_features(&mut g, &p, boxes, &cells);
        FeatureMap::new(self.grid, g.value(f).clone()).expect("grid-shaped features")
    }
}

#[derive(Clone, Debug)]
pub struct GtModel {
    pub encoder: GtEncoder,
    pub head: DetectionHead,
}

impl GtModel {
    pub fn new(cfg: &Config) -> Self {
        let mut rng = rng_for(cfg.seed, "gt/init", 0);
        let encoder = GtEncoder::new(&cfg.grid, &cfg.world, &cfg.gtspace, &mut rng);
        let head = DetectionHead::new(cfg.grid.channels, cfg.gtspace.head_hidden, Anchor::from_world(&cfg.world), &mut rng);
        Self { encoder, head }
    }

    pub fn checksum(&self) -> String {
        format!("{}:{}", self.encoder.params.checksum(), self.head.params.checksum())
    }

    pub fn to_container(&self, config_hash: &str) -> Container {
        let meta = serde_json::json!({
            "kind": "gt-space",
            "d": self.encoder.channels(),
            "config_hash": config_hash,
        });
        params_container(meta, &[("gt_encoder", &self.encoder.params), ("gt_head", &self.head.params)])
    }

    pub fn from_container(cfg: &Config, c: &Container) -> Result<Self> {
        let mut m = Self::new(cfg);
        restore_params(c, "gt_encoder", &mut m.encoder.params)?;
        restore_params(c, "gt_head", &mut m.head.params)?;
        Ok(m)
    }
}

/// Decodes `F_GT` with the ground-truth head.
pub fn gt_detect(f_gt: &FeatureMap, head: &DetectionHead, score_thr: f64, nms_iou: f64) -> Vec<Detection> {
    crate::head::detect(f_gt, head, score_thr, nms_iou)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GtEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_gt_loss: f64,
    pub val_ap50: f64,
}

/// Held-out evaluation of a ground-truth model on label-only scenes, seen
/// from slot 0 of every validation sequence.
pub fn evaluate_gt(model: &GtModel, scenes: &[crate::scene::Scene], grid: &BevGridSpec, score_thr: f64, nms_iou: f64) -> Result<(f64, f64)> {
    let mut frames = Vec::with_capacity(scenes.len());
    let mut losses = Vec::new();
    let cells: Vec<usize> = (0..grid.num_cells()).collect();
    for s in scenes {
        let boxes = labels_in(s, &s.pose(0), grid);
        let f = model.encoder.build_gt_map(&boxes);
        let out = model.head.predict(&f.values);
        let dets = decode(&out, &cells, grid, &model.head.anchor, score_thr, nms_iou);
        if !boxes.is_empty() {
            let preds: Vec<Box3D> = dets.iter().map(|d| d.bbox).collect();
            losses.push(gt_loss(&preds, &boxes)?);
        }
        frames.push(FrameDetections::new(dets, boxes));
    }
    let ap = average_precision(&frames, 0.5)?;
    let l = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    Ok((ap, l))
}

/// Trains the box encoder, cell MLP and head with the detection loss on
/// label-only training scenes. Fails with the training curve attached when
/// held-out AP@0.5 stays below the target.
pub fn train_gt_encoder(ds: &Dataset, cfg: &Config) -> Result<(GtModel, Vec<GtEpoch>)> {
    let (model, curve) = fit_gt(ds.scenes(Split::Train), ds.scenes(Split::Val), cfg)?;
    let last = curve.last().map_or(0.0, |e| e.val_ap50);
    if last < cfg.gtspace.target_ap {
        return Err(Error::NotConverged { ap: last, epochs: curve.len(), curve: curve.iter().map(|e| e.val_ap50).collect() });
    }
    Ok((model, curve))
}

/// The training loop behind [`train_gt_encoder`], without the convergence check.
pub fn fit_gt(train: &[crate::scene::Scene], val: &[crate::scene::Scene], cfg: &Config) -> Result<(GtModel, Vec<GtEpoch>)> {
    let gc = &cfg.gtspace;
    let grid = cfg.grid;
    let mut model = GtModel::new(cfg);
    let mut opt_enc = AdamW::new(gc.lr, gc.weight_decay);
    let mut opt_head = AdamW::new(gc.lr, gc.weight_decay);
    let mut curve = Vec::new();
    let slots = cfg.world.agent_slots.max(1);
    let total_steps = gc.epochs * train.len() * slots;
    let mut step = 0;
    for epoch in 0..gc.epochs {
        let mut rng = rng_for(cfg.seed, "gt/epoch", epoch as u64);
        let mut order: Vec<(usize, usize)> = (0..train.len()).flat_map(|i| (0..slots).map(move |k| (i, k))).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, slot) in &order {
            let lr = cosine_lr(gc.lr, step, total_steps);
            step += 1;
            opt_enc.lr = lr;
            opt_head.lr = lr;
            let s = &train[i];
            let boxes = labels_in(s, &s.pose(slot), &grid);
            let t = CellTargets::with_background(&boxes, &grid, &model.head.anchor);
            let mut g = Graph::new();
            let pe = model.encoder.params.bind(&mut g, true);
            let ph = model.head.params.bind(&mut g, true);
            let f = model.encoder.cell_features(&mut g, &pe, &boxes, &t.cells);
            let out = model.head.forward(&mut g, &ph, f);
            let loss = detection_loss(&mut g, out, &t);
            total += g.scalar(loss.total);
            let grads = g.backward(loss.total);
            opt_enc.step(&mut model.encoder.params, &collect_grads(&g, &grads, &pe));
            opt_head.step(&mut model.head.params, &collect_grads(&g, &grads, &ph));
        }
        let (ap, l_gt) = if val.is_empty() { (0.0, 1.0) } else { evaluate_gt(&model, val, &grid, cfg.eval.score_thr, cfg.eval.nms_iou)? };
        curve.push(GtEpoch { epoch, train_loss: total / order.len().max(1) as f64, val_gt_loss: l_gt, val_ap50: ap });
        if gc.early_stop && ap >= gc.target_ap {
            break;
        }
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Config, GtEncoder) {
        let cfg = Config::default();
        let enc = GtEncoder::new(&cfg.grid, &cfg.world, &cfg.gtspace, &mut rng_for(3, "t", 0));
        (cfg, enc)
    }

    #[test]
    fn beta_is_standardized() {
        let (_, enc) = setup();
        let beta = enc.encode_box(&Box3D::new(3.0, -2.0, 0.8, 4.5, 2.0, 1.6, 0.7, 0));
        let n = beta.len() as f64;
        let mean = beta.iter().sum::<f64>() / n;
        let var = beta.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_weights_give_normalized_bias() {
        let (_, mut enc) = setup();
        for (i, name) in enc.params.names().to_vec().iter().enumerate() {
            if name.starts_with("box_fc.1") {
                let m = enc.params.get_mut(i);
                if name.ends_with("weight") {
                    *m = Matrix::zeros(m.rows(), m.cols());
                } else {
                    *m = Matrix::from_vec(1, m.cols(), (0..m.cols()).map(|j| j as f64).collect());
                }
            }
        }
        let beta = enc.encode_box(&Box3D::new(1.0, 1.0, 0.8, 4.0, 2.0, 1.6, 0.0, 0));
        let n = beta.len() as f64;
        let mean = (n - 1.0) / 2.0;
        let std = ((0..beta.len()).map(|j| (j as f64 - mean).powi(2)).sum::<f64>() / n + LN_EPS).sqrt();
        for (j, v) in beta.iter().enumerate() {
            assert!((v - (j as f64 - mean) / std).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_rule() {
        let (_, enc) = setup();
        let a = Box3D::new(-10.0, 3.0, 0.8, 4.5, 2.0, 1.6, 0.4, 0);
        let b = Box3D::new(12.0, -5.0, 0.8, 4.0, 1.9, 1.5, -1.1, 0);
        assert!(enc.build_gt_map(&[]).values.data().iter().all(|v| *v == 0.0));
        let fa = enc.build_gt_map(&[a]).values;
        let fb = enc.build_gt_map(&[b]).values;
        let fab = enc.build_gt_map(&[a, b]).values;
        let mut sum = fa.clone();
        sum.add_assign(&fb);
        assert!(fab.max_abs_diff(&sum) < 1e-12);
        let faa = enc.build_gt_map(&[a, a]).values;
        assert!(faa.max_abs_diff(&fa.scaled(2.0)) < 1e-12);
        assert_eq!(enc.build_gt_map(&[b, a]).values.max_abs_diff(&fab), 0.0);
    }

    #[test]
    fn support_matches_footprints() {
        let (cfg, enc) = setup();
        let boxes = [Box3D::new(-10.0, 3.0, 0.8, 4.5, 2.0, 1.6, 0.4, 0), Box3D::new(5.0, 0.0, 0.8, 4.0, 1.9, 1.5, 2.0, 0)];
        let f = enc.build_gt_map(&boxes);
        let covered: std::collections::BTreeSet<usize> =
            boxes.iter().flat_map(|b| crate::geometry::cell_indices_of_box(b, &cfg.grid)).collect();
        for c in 0..cfg.grid.num_cells() {
            let nonzero = f.values.row(c).iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, covered.contains(&c), "cell {c}");
        }
    }

    #[test]
    fn background_targets_match_full_loss() {
        let (cfg, enc) = setup();
        let head = DetectionHead::new(cfg.grid.channels, 16, Anchor::default(), &mut rng_for(1, "h", 0));
        let boxes = [Box3D::new(-10.0, 3.0, 0.8, 4.5, 2.0, 1.6, 0.4, 0)];
        let full = CellTargets::full(&boxes, &cfg.grid, &head.anchor);
        let bg = CellTargets::with_background(&boxes, &cfg.grid, &head.anchor);
        let eval = |t: &CellTargets| {
            let mut g = Graph::new();
            let pe = enc.params.bind(&mut g, false);
            let ph = head.params.bind(&mut g, false);
            let f = enc.cell_features(&mut g, &pe, &boxes, &t.cells);
            let o = head.forward(&mut g, &ph, f);
            let l = detection_loss(&mut g, o, t);
            g.scalar(l.total)
        };
        assert!((eval(&full) - eval(&bg)).abs() < 1e-9 * eval(&full).abs().max(1.0));
    }
}
