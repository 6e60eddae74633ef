//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use gtspace::alignment::{combinatorial_loss, contrastive_loss, similarity, ContrastiveConfig, FusionModel};
use gtspace::config::TrainConfig;
use gtspace::geometry::{bev_iou, cells_of_box, nms, BevGridSpec, Box3D, Detection, FeatureMap};
use gtspace::head::Anchor;
use gtspace::tensor::Matrix;
use gtspace::training::total_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Whether `(px, py)` lies inside the footprint, by rotating the point into
/// the box frame.
pub fn in_footprint(b: &Box3D, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - b.x, py - b.y);
    let (s, c) = b.r.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0
}

fn corners(b: &Box3D) -> Vec<[f64; 2]> {
    let (s, c) = b.r.sin_cos();
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|&(a, e)| {
            let (u, v) = (a * b.l / 2.0, e * b.w / 2.0);
            [b.x + c * u - s * v, b.y + s * u + c * v]
        })
        .collect()
}

/// Crossing-number point-in-polygon test.
pub fn point_in_polygon(poly: &[[f64; 2]], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[(i + n - 1) % n];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// Monte-Carlo BEV IoU from `n` uniform samples over the joint bounding
/// rectangle.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut impl Rng) -> f64 {
    let pts: Vec<[f64; 2]> = corners(a).into_iter().chain(corners(b)).collect();
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let mut both = 0usize;
    for _ in 0..n {
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(y0..y1);
        if in_footprint(a, x, y) && in_footprint(b, x, y) {
            both += 1;
        }
    }
    let inter = both as f64 / n as f64 * (x1 - x0) * (y1 - y0);
    inter / (a.l * a.w + b.l * b.w - inter)
}

pub fn random_box(rng: &mut impl Rng, span: f64) -> Box3D {
    Box3D::bev(rng.gen_range(-span..span), rng.gen_range(-span..span), rng.gen_range(0.5..5.0), rng.gen_range(0.5..3.0), rng.gen_range(-3.2..3.2))
}

/// A second box overlapping `a` with a fair chance.
pub fn nearby_box(rng: &mut impl Rng, a: &Box3D) -> Box3D {
    Box3D::bev(a.x + rng.gen_range(-2.0..2.0), a.y + rng.gen_range(-2.0..2.0), rng.gen_range(0.5..5.0), rng.gen_range(0.5..3.0), rng.gen_range(-3.2..3.2))
}

/// Suppression by repeatedly taking the best remaining candidate and
/// discarding everything that overlaps it.
pub fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut pool: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (bi, bd) = pool[best];
            let (ci, cd) = pool[i];
            if cd.score > bd.score || (cd.score == bd.score && ci < bi) {
                best = i;
            }
        }
        let (_, top) = pool.remove(best);
        pool.retain(|(_, d)| bev_iou(&top.bbox, &d.bbox) <= thr);
        out.push(top);
    }
    out
}

/// IoU, cell-membership and NMS oracles. Returns the worst IoU error.
pub fn geometry_oracles(pairs: usize, samples: usize, boxes: usize, nms_trials: usize) -> Result<f64, String> {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let a = random_box(&mut r, 3.0);
        let b = if i % 5 == 4 { random_box(&mut r, 3.0) } else { nearby_box(&mut r, &a) };
        let exact = bev_iou(&a, &b);
        let mc = monte_carlo_iou(&a, &b, samples, &mut r);
        worst = worst.max((exact - mc).abs());
        if (exact - mc).abs() >= 0.01 {
            return Err(format!("iou pair {i}: polygon {exact:.5} vs sampled {mc:.5}"));
        }
    }
    let grid = BevGridSpec { x_min: -10.0, x_max: 10.0, y_min: -8.0, y_max: 8.0, cell: 0.5, channels: 1 };
    for i in 0..boxes {
        let b = random_box(&mut r, 9.0);
        let poly = corners(&b);
        let mut want = Vec::new();
        for xc in 0..grid.height() {
            for yc in 0..grid.width() {
                let (cx, cy) = (grid.x_min + (xc as f64 + 0.5) * grid.cell, grid.y_min + (yc as f64 + 0.5) * grid.cell);
                if point_in_polygon(&poly, cx, cy) {
                    want.push((xc, yc));
                }
            }
        }
        let got = cells_of_box(&b, &grid);
        if got != want {
            return Err(format!("cells of box {i} ({b:?}): {} cells vs {} by exhaustive search", got.len(), want.len()));
        }
    }
    for t in 0..nms_trials {
        let n = r.gen_range(0..=10);
        let centre = random_box(&mut r, 2.0);
        let dets: Vec<Detection> = (0..n).map(|_| Detection::new(nearby_box(&mut r, &centre), (r.gen_range(0..1000) as f64) / 1000.0)).collect();
        let thr = [0.0, 0.1, 0.3, 0.5][t % 4];
        if nms(&dets, thr) != reference_nms(&dets, thr) {
            return Err(format!("nms trial {t} with {n} boxes at threshold {thr}"));
        }
    }
    Ok(worst)
}

fn grid() -> BevGridSpec {
    BevGridSpec { x_min: -6.0, x_max: 6.0, y_min: -4.0, y_max: 4.0, cell: 1.0, channels: 8 }
}

fn random_map(d: usize, r: &mut ChaCha8Rng) -> FeatureMap {
    let g = grid().with_channels(d);
    let n = g.num_cells();
    FeatureMap::new(g, Matrix::from_vec(n, d, (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect())).unwrap()
}

/// Cross-entropy contrastive loss written out directly from its definition.
pub fn contrastive_oracle(fused: &FeatureMap, boxes: &[Box3D], f_gt: &FeatureMap, cfg: &ContrastiveConfig) -> f64 {
    let g = fused.grid;
    let cells: Vec<Vec<usize>> = boxes
        .iter()
        .map(|b| {
            let mut v = Vec::new();
            for xc in 0..g.height() {
                for yc in 0..g.width() {
                    let (cx, cy) = g.cell_center(xc, yc);
                    if in_footprint(b, cx, cy) {
                        v.push(g.index(xc, yc));
                    }
                }
            }
            v
        })
        .collect();
    let anchors: Vec<Vec<f64>> = cells
        .iter()
        .map(|cs| {
            let mut u = vec![0.0; f_gt.channels()];
            for &c in cs {
                for (a, x) in u.iter_mut().zip(f_gt.values.row(c)) {
                    *a += x / cs.len() as f64;
                }
            }
            u
        })
        .collect();
    let mut total = 0.0;
    for (bi, cs) in cells.iter().enumerate() {
        for &c in cs {
            let s: Vec<f64> = anchors.iter().map(|u| similarity(fused.values.row(c), u, cfg.tau)).collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - s[bi];
        }
    }
    if cfg.balanced {
        total *= cfg.mu / boxes.len() as f64;
    }
    total
}

/// The exact loss identities. Returns a short description of what passed.
pub fn loss_identities() -> Result<String, String> {
    let mut r = rng(5);
    let d = 8;
    let a = Box3D::bev(-3.0, -1.2, 3.0, 1.8, 0.4);
    let b = Box3D::bev(2.6, 1.0, 2.5, 1.6, -0.7);
    let c = Box3D::bev(0.0, -2.0, 2.0, 1.5, 1.2);
    let unbal = ContrastiveConfig { tau: 0.1, balanced: false, mu: 1.0 };

    for trial in 0..5 {
        let fused = random_map(d, &mut r);
        let f_gt = random_map(d, &mut r);
        for one in [a, b, c] {
            let l = contrastive_loss(&fused, &[one], &f_gt, &unbal).map_err(|e| e.to_string())?;
            if l != 0.0 {
                return Err(format!("single-object contrastive loss {l} (trial {trial})"));
            }
        }
    }

    let fusion = FusionModel::new(d, 2, 4, 16, Anchor::default(), &mut gtspace::seed::rng_for(3, "fusion", 0));
    let projected: Vec<(String, FeatureMap)> = (0..3).map(|i| (format!("m{i}"), random_map(d, &mut r))).collect();
    let f_gt = random_map(d, &mut r);
    let boxes = [a, b, c];
    let cfg = ContrastiveConfig { tau: 0.1, balanced: true, mu: 2.5 };
    let l_e = combinatorial_loss(&projected, &boxes, &f_gt, &fusion, &cfg).map_err(|e| e.to_string())?;
    let mut pairwise = 0.0;
    let mut pairs = 0;
    for i in 0..3 {
        for j in i + 1..3 {
            let fused = fusion.fuse(&[projected[i].1.clone(), projected[j].1.clone()]).map_err(|e| e.to_string())?;
            let direct = contrastive_oracle(&fused, &boxes, &f_gt, &cfg);
            let lib = contrastive_loss(&fused, &boxes, &f_gt, &cfg).map_err(|e| e.to_string())?;
            if (direct - lib).abs() > 1e-9 * direct.abs().max(1.0) {
                return Err(format!("pair ({i},{j}): loss {lib} vs definition {direct}"));
            }
            pairwise += lib;
            pairs += 1;
        }
    }
    if pairs != 3 || l_e != pairwise {
        return Err(format!("L_E {l_e} vs pairwise sum {pairwise} over {pairs} pairs"));
    }

    let fused = random_map(d, &mut r);
    let three = ContrastiveConfig { tau: 0.1, balanced: true, mu: 3.0 };
    let plain = contrastive_loss(&fused, &boxes, &f_gt, &unbal).map_err(|e| e.to_string())?;
    let bal = contrastive_loss(&fused, &boxes, &f_gt, &three).map_err(|e| e.to_string())?;
    if plain != bal {
        return Err(format!("balanced loss with |B| = mu: {bal} vs {plain}"));
    }

    for _ in 0..100 {
        let f: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let tau = r.gen_range(0.01..1.0);
        if similarity(&f, &u, tau / 2.0) != 2.0 * similarity(&f, &u, tau) {
            return Err(format!("similarity scaling fails at tau {tau}"));
        }
    }

    let mut tc = TrainConfig { w_phi: 1.0, w_e: 1.0, w_b: 1.0, ..TrainConfig::default() };
    let (phi, e, bl) = (0.75, 3.5, 1.25);
    if total_loss(phi, e, bl, 0.2, &tc).total != phi + e + bl {
        return Err("unit-weight total is not the sum of its terms".into());
    }
    for (wp, we, wb) in [(0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0), (0.0, 0.0, 0.0), (1.0, 0.0, 0.0)] {
        tc.w_phi = wp;
        tc.w_e = we;
        tc.w_b = wb;
        let want = [(wp, phi), (we, e), (wb, bl)].iter().filter(|(w, _)| *w != 0.0).map(|(w, v)| w * v).sum::<f64>();
        if total_loss(phi, e, bl, 0.2, &tc).total != want {
            return Err(format!("total with weights ({wp}, {we}, {wb})"));
        }
    }
    Ok("single-object zero, pairwise recomposition, unit prefactor, temperature scaling, additivity".into())
}
