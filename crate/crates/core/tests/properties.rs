use gtspace::eval::{average_precision, FrameDetections};
use gtspace::geometry::{bev_iou, nms, transform_boxes, Box3D, Detection, Pose};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box3D> {
    (-4.0..4.0f64, -4.0..4.0f64, 0.5..4.0f64, 0.5..2.5f64, -3.1..3.1f64).prop_map(|(x, y, l, w, r)| Box3D::bev(x, y, l, w, r))
}

fn arb_frame() -> impl Strategy<Value = FrameDetections> {
    (prop::collection::vec((arb_box(), 0.01..1.0f64), 0..8), prop::collection::vec(arb_box(), 1..6))
        .prop_map(|(d, g)| FrameDetections::new(d.into_iter().map(|(b, s)| Detection::new(b, s)).collect(), g))
}

/// Precision/recall at every score cut, each cut matched from scratch.
fn brute_force_ap(frames: &[FrameDetections], thr: f64) -> f64 {
    let total: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    let mut cuts: Vec<f64> = frames.iter().flat_map(|f| f.detections.iter().map(|d| d.score)).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut points = Vec::new();
    for &c in &cuts {
        let (mut tp, mut n) = (0usize, 0usize);
        for f in frames {
            let mut kept: Vec<Detection> = f.detections.iter().copied().filter(|d| d.score >= c).collect();
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut taken = vec![false; f.ground_truth.len()];
            for d in &kept {
                n += 1;
                let best = (0..f.ground_truth.len()).filter(|&j| !taken[j]).map(|j| (j, bev_iou(&d.bbox, &f.ground_truth[j]))).fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
                if let Some((j, iou)) = best {
                    if iou >= thr {
                        taken[j] = true;
                        tp += 1;
                    }
                }
            }
        }
        points.push((tp as f64 / total as f64, tp as f64 / n as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let pmax = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * pmax;
        prev = r;
    }
    ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let x = bev_iou(&a, &b);
        prop_assert!((x - bev_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ap_ignores_score_scale(frames in prop::collection::vec(arb_frame(), 1..4), k in 0.1..10.0f64) {
        let scaled: Vec<FrameDetections> = frames
            .iter()
            .map(|f| FrameDetections::new(f.detections.iter().map(|d| Detection::new(d.bbox, d.score * k)).collect(), f.ground_truth.clone()))
            .collect();
        prop_assert_eq!(average_precision(&frames, 0.5).unwrap(), average_precision(&scaled, 0.5).unwrap());
    }

    #[test]
    fn ap_matches_brute_force(frames in prop::collection::vec(arb_frame(), 1..4), thr in prop::sample::select(vec![0.1, 0.5, 0.7])) {
        let ap = average_precision(&frames, thr).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - brute_force_ap(&frames, thr)).abs() < 1e-12);
    }

    #[test]
    fn nms_survivors_do_not_overlap(dets in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..10), thr in 0.0..0.8f64) {
        let dets: Vec<Detection> = dets.into_iter().map(|(b, s)| Detection::new(b, s)).collect();
        let kept = nms(&dets, thr);
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(bev_iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn box_transforms_round_trip(b in arb_box(), (x, y, r) in (-20.0..20.0f64, -20.0..20.0f64, -3.1..3.1f64), (u, v, q) in (-20.0..20.0f64, -20.0..20.0f64, -3.1..3.1f64)) {
        let p = Pose::new(x, y, r);
        let o = Pose::new(u, v, q);
        let there = transform_boxes(&[b], &p, &o);
        let back = transform_boxes(&there, &o, &p)[0];
        prop_assert!((back.x - b.x).abs() < 1e-9 && (back.y - b.y).abs() < 1e-9);
        prop_assert!(bev_iou(&back, &b) > 1.0 - 1e-6);
    }
}
