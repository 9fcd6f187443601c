use super::*;
use crate::rng::Rng;

fn gt(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize) -> GroundTruth {
    GroundTruth {
        x1,
        y1,
        x2,
        y2,
        class_id,
    }
}

fn grid_anchors(n: usize, stride: usize) -> Vec<AnchorPoint> {
    anchor_points(&[(n, n)], &[stride])
}

// --------------------------------------------------------------- trivial cases

#[test]
fn atss_single_gt_covering_one_anchor() {
    let anchors = grid_anchors(1, 16); // single center at (8, 8)
    let gts = vec![gt(0.0, 0.0, 16.0, 16.0, 0)];
    let a = atss_assign(&anchors, &gts, 1).unwrap();
    assert_eq!(a.num_positive(), 1);
    assert_eq!(a.per_anchor[0].unwrap().gt_index, 0);
}

#[test]
fn atss_no_center_inside_means_all_negative() {
    let anchors = grid_anchors(2, 16); // centers at 8 and 24
    let gts = vec![gt(10.0, 10.0, 14.0, 14.0, 0)]; // contains no center
    let a = atss_assign(&anchors, &gts, 2).unwrap();
    assert_eq!(a.num_positive(), 0);
}

#[test]
fn atss_empty_anchor_set_is_an_error() {
    assert!(atss_assign(&[], &[gt(0.0, 0.0, 1.0, 1.0, 0)], 3).is_err());
}

#[test]
fn simota_single_candidate_is_assigned_regardless_of_cost() {
    let anchors = grid_anchors(1, 16);
    let gts = vec![gt(0.0, 0.0, 16.0, 16.0, 1)];
    // terrible prediction: wrong class confident, box far away
    let cls = vec![0.99, 0.01];
    let boxes = vec![[100.0, 100.0, 110.0, 110.0]];
    let a = simota_assign(&anchors, &gts, &cls, &boxes, 3.0).unwrap();
    assert_eq!(a.num_positive(), 1);
    assert_eq!(a.per_anchor[0].unwrap().gt_index, 0);
}

#[test]
fn simota_empty_gts_is_all_negative_not_error() {
    let anchors = grid_anchors(2, 16);
    let a = simota_assign(&anchors, &[], &[], &[], 3.0).unwrap();
    assert_eq!(a.num_positive(), 0);
    assert_eq!(a.per_anchor.len(), 4);
}

#[test]
fn simota_two_gts_competing_lower_cost_wins() {
    let anchors = grid_anchors(1, 16); // one anchor at (8, 8)
    // both boxes contain the anchor center
    let gts = vec![gt(0.0, 0.0, 16.0, 16.0, 0), gt(4.0, 4.0, 12.0, 12.0, 1)];
    // prediction matches gt 1 tightly: high class-1 prob, box over gt 1
    let cls = vec![0.05, 0.95];
    let boxes = vec![[4.0, 4.0, 12.0, 12.0]];
    let a = simota_assign(&anchors, &gts, &cls, &boxes, 3.0).unwrap();
    assert_eq!(a.per_anchor[0].unwrap().gt_index, 1);
}

#[test]
fn tal_perfect_prediction_is_positive_with_max_t() {
    let anchors = grid_anchors(2, 16);
    let gts = vec![gt(0.0, 0.0, 16.0, 16.0, 0)]; // contains anchor 0 only
    let mut cls = vec![0.1; 4 * 2];
    cls[0] = 0.9; // anchor 0, class 0
    let boxes = vec![
        [0.0, 0.0, 16.0, 16.0],
        [16.0, 0.0, 32.0, 16.0],
        [0.0, 16.0, 16.0, 32.0],
        [16.0, 16.0, 32.0, 32.0],
    ];
    let a = tal_assign(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 13).unwrap();
    let t0 = a.per_anchor[0].expect("anchor 0 positive");
    assert_eq!(t0.gt_index, 0);
    assert!((t0.q - 1.0).abs() < 1e-6, "q should equal the max IoU of 1");
    assert_eq!(a.num_positive(), 1);
}

#[test]
fn tal_zero_scores_still_fill_topk_by_index() {
    let anchors = grid_anchors(2, 8); // all four centers inside the gt below
    let gts = vec![gt(0.0, 0.0, 16.0, 16.0, 0)];
    let cls = vec![0.0; 4];
    let boxes = vec![[0.0; 4]; 4];
    let a = tal_assign(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 2).unwrap();
    // all t = 0: ties break toward lower anchor index, topk = 2
    assert_eq!(a.num_positive(), 2);
    assert!(a.per_anchor[0].is_some() && a.per_anchor[1].is_some());
    assert_eq!(a.per_anchor[0].unwrap().q, 0.0);
}

#[test]
fn assignments_are_deterministic() {
    let (anchors, gts, cls, boxes) = random_instance(&mut Rng::new(99));
    let a = tal_assign(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 13).unwrap();
    let b = tal_assign(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 13).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tal_is_invariant_to_monotone_transform_of_t() {
    // t -> t^3 is the same ordering, realized by tripling both exponents
    let mut rng = Rng::new(123);
    for _ in 0..50 {
        let (anchors, gts, cls, boxes) = random_instance(&mut rng);
        if gts.is_empty() {
            continue;
        }
        let a = tal_assign(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 3).unwrap();
        let b = tal_assign(&anchors, &gts, &cls, &boxes, 3.0, 18.0, 3).unwrap();
        let idx = |x: &Assignment| -> Vec<Option<usize>> {
            x.per_anchor.iter().map(|t| t.map(|t| t.gt_index)).collect()
        };
        assert_eq!(idx(&a), idx(&b));
    }
}

// ------------------------------------------------------- exhaustive oracles

/// Oracle ATSS: same rule, written as repeated scans over full matrices.
fn oracle_atss(anchors: &[AnchorPoint], gts: &[GroundTruth], topk: usize) -> Vec<Option<usize>> {
    let mut best_iou = vec![f32::NEG_INFINITY; anchors.len()];
    let mut best_gt: Vec<Option<usize>> = vec![None; anchors.len()];
    for (gi, g) in gts.iter().enumerate() {
        let gcx = (g.x1 + g.x2) / 2.0;
        let gcy = (g.y1 + g.y2) / 2.0;
        // candidate selection: topk nearest per stride level by repeated scan
        let mut strides: Vec<usize> = anchors.iter().map(|a| a.stride).collect();
        strides.sort_unstable();
        strides.dedup();
        let mut cand: Vec<usize> = Vec::new();
        for s in strides {
            let mut taken = vec![false; anchors.len()];
            for _ in 0..topk {
                let mut pick: Option<(f32, usize)> = None;
                for (i, a) in anchors.iter().enumerate() {
                    if a.stride != s || taken[i] {
                        continue;
                    }
                    let d = (a.x - gcx).powi(2) + (a.y - gcy).powi(2);
                    if pick.map_or(true, |(pd, _)| d < pd) {
                        pick = Some((d, i));
                    }
                }
                if let Some((_, i)) = pick {
                    taken[i] = true;
                    cand.push(i);
                }
            }
        }
        let iou_of = |i: usize| {
            let a = &anchors[i];
            let half = 0.5 * ATSS_ANCHOR_STRIDES * a.stride as f32;
            iou_xyxy([a.x - half, a.y - half, a.x + half, a.y + half], g.corners())
        };
        let n = cand.len() as f32;
        let mean: f32 = cand.iter().map(|&i| iou_of(i)).sum::<f32>() / n;
        let std = (cand.iter().map(|&i| (iou_of(i) - mean).powi(2)).sum::<f32>() / n).sqrt();
        for &i in &cand {
            let a = &anchors[i];
            let inside = a.x >= g.x1 && a.x <= g.x2 && a.y >= g.y1 && a.y <= g.y2;
            if inside && iou_of(i) >= mean + std && iou_of(i) > best_iou[i] {
                best_iou[i] = iou_of(i);
                best_gt[i] = Some(gi);
            }
        }
    }
    best_gt
}

/// Oracle SimOTA: full cost matrix, dynamic k by scanning, no sorting.
fn oracle_simota(
    anchors: &[AnchorPoint],
    gts: &[GroundTruth],
    cls: &[f32],
    boxes: &[[f32; 4]],
    lambda: f64,
) -> Vec<Option<usize>> {
    if gts.is_empty() {
        return vec![None; anchors.len()];
    }
    let nc = cls.len() / anchors.len();
    let mut claimed: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (gi, g) in gts.iter().enumerate() {
        let gcx = (g.x1 + g.x2) / 2.0;
        let gcy = (g.y1 + g.y2) / 2.0;
        let is_cand = |a: &AnchorPoint| {
            let inside = a.x >= g.x1 && a.x <= g.x2 && a.y >= g.y1 && a.y <= g.y2;
            let r = 2.5 * a.stride as f32;
            inside || ((a.x - gcx).abs() <= r && (a.y - gcy).abs() <= r)
        };
        let cand: Vec<usize> = (0..anchors.len()).filter(|&i| is_cand(&anchors[i])).collect();
        if cand.is_empty() {
            continue;
        }
        let mut ious: Vec<f32> = cand.iter().map(|&i| iou_xyxy(boxes[i], g.corners())).collect();
        // top-10 sum by destructive max scan
        let mut ksum = 0.0f32;
        let mut tmp = ious.clone();
        for _ in 0..10.min(tmp.len()) {
            let (mut mi, mut mv) = (0, f32::NEG_INFINITY);
            for (i, &v) in tmp.iter().enumerate() {
                if v > mv {
                    mv = v;
                    mi = i;
                }
            }
            ksum += mv;
            tmp.remove(mi);
        }
        let k = (ksum.round() as usize).clamp(1, cand.len());
        let cost = |ci: usize| {
            let i = cand[ci];
            let mut ce = 0.0f64;
            for c in 0..nc {
                let p = cls[i * nc + c].clamp(1e-7, 1.0 - 1e-7) as f64;
                ce -= if c == g.class_id { p.ln() } else { (1.0 - p).ln() };
            }
            ce + lambda * -((ious[ci] as f64).max(1e-9).ln())
        };
        // pick k lowest costs by repeated min scan (ties: lower anchor index)
        let mut used = vec![false; cand.len()];
        for _ in 0..k {
            let mut pick: Option<(f64, usize)> = None;
            for ci in 0..cand.len() {
                if used[ci] {
                    continue;
                }
                let c = cost(ci);
                if pick.map_or(true, |(pc, pi)| c < pc || (c == pc && cand[ci] < cand[pi])) {
                    pick = Some((c, ci));
                }
            }
            let (c, ci) = pick.expect("k <= candidates");
            used[ci] = true;
            let i = cand[ci];
            if claimed[i].map_or(true, |(pc, _)| c < pc) {
                claimed[i] = Some((c, gi));
            }
        }
        ious.clear();
    }
    claimed.iter().map(|c| c.map(|(_, g)| g)).collect()
}

/// Oracle TAL: full alignment matrix, top-k by repeated max scan.
fn oracle_tal(
    anchors: &[AnchorPoint],
    gts: &[GroundTruth],
    cls: &[f32],
    boxes: &[[f32; 4]],
    alpha: f64,
    beta: f64,
    topk: usize,
) -> Vec<Option<usize>> {
    if gts.is_empty() {
        return vec![None; anchors.len()];
    }
    let nc = cls.len() / anchors.len();
    let mut best_t: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (gi, g) in gts.iter().enumerate() {
        let mut t_of: Vec<Option<f64>> = vec![None; anchors.len()];
        for (i, a) in anchors.iter().enumerate() {
            if a.x >= g.x1 && a.x <= g.x2 && a.y >= g.y1 && a.y <= g.y2 {
                let s = cls[i * nc + g.class_id] as f64;
                let u = iou_xyxy(boxes[i], g.corners()) as f64;
                t_of[i] = Some(s.powf(alpha) * u.powf(beta));
            }
        }
        let mut taken = vec![false; anchors.len()];
        for _ in 0..topk {
            let mut pick: Option<(f64, usize)> = None;
            for i in 0..anchors.len() {
                if taken[i] {
                    continue;
                }
                if let Some(t) = t_of[i] {
                    if pick.map_or(true, |(pt, _)| t > pt) {
                        pick = Some((t, i));
                    }
                }
            }
            match pick {
                Some((t, i)) => {
                    taken[i] = true;
                    if best_t[i].map_or(true, |(pt, _)| t > pt) {
                        best_t[i] = Some((t, gi));
                    }
                }
                None => break,
            }
        }
    }
    best_t.iter().map(|c| c.map(|(_, g)| g)).collect()
}

type Instance = (Vec<AnchorPoint>, Vec<GroundTruth>, Vec<f32>, Vec<[f32; 4]>);

fn random_instance(rng: &mut Rng) -> Instance {
    let nc = 3;
    let n_anchors = rng.int_range(1, 8);
    let anchors: Vec<AnchorPoint> = (0..n_anchors)
        .map(|_| AnchorPoint {
            x: rng.range(0.0, 64.0) as f32,
            y: rng.range(0.0, 64.0) as f32,
            stride: if rng.uniform() < 0.5 { 8 } else { 16 },
        })
        .collect();
    let n_gts = rng.below(4); // 0..=3
    let gts: Vec<GroundTruth> = (0..n_gts)
        .map(|_| {
            let x1 = rng.range(0.0, 40.0) as f32;
            let y1 = rng.range(0.0, 40.0) as f32;
            gt(
                x1,
                y1,
                x1 + rng.range(4.0, 24.0) as f32,
                y1 + rng.range(4.0, 24.0) as f32,
                rng.below(nc),
            )
        })
        .collect();
    let cls: Vec<f32> = (0..n_anchors * nc).map(|_| rng.range(0.0, 1.0) as f32).collect();
    let boxes: Vec<[f32; 4]> = (0..n_anchors)
        .map(|i| {
            // half the boxes hover near a gt so IoUs are informative
            if !gts.is_empty() && rng.uniform() < 0.5 {
                let g = &gts[rng.below(gts.len())];
                [
                    g.x1 + rng.range(-3.0, 3.0) as f32,
                    g.y1 + rng.range(-3.0, 3.0) as f32,
                    g.x2 + rng.range(-3.0, 3.0) as f32,
                    g.y2 + rng.range(-3.0, 3.0) as f32,
                ]
            } else {
                let a = &anchors[i];
                [a.x - 4.0, a.y - 4.0, a.x + 4.0, a.y + 4.0]
            }
        })
        .collect();
    (anchors, gts, cls, boxes)
}

#[test]
fn all_three_assigners_match_exhaustive_oracles_on_500_instances() {
    let mut rng = Rng::new(2024);
    for case in 0..500 {
        let (anchors, gts, cls, boxes) = random_instance(&mut rng);

        if !gts.is_empty() {
            let got = atss_assign(&anchors, &gts, 2).unwrap();
            let want = oracle_atss(&anchors, &gts, 2);
            let got_idx: Vec<Option<usize>> =
                got.per_anchor.iter().map(|t| t.map(|t| t.gt_index)).collect();
            assert_eq!(got_idx, want, "atss case {case}");
        }

        let got = simota_assign(&anchors, &gts, &cls, &boxes, 3.0).unwrap();
        let want = oracle_simota(&anchors, &gts, &cls, &boxes, 3.0);
        let got_idx: Vec<Option<usize>> =
            got.per_anchor.iter().map(|t| t.map(|t| t.gt_index)).collect();
        assert_eq!(got_idx, want, "simota case {case}");

        let got = tal_assign(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 4).unwrap();
        let want = oracle_tal(&anchors, &gts, &cls, &boxes, 1.0, 6.0, 4);
        let got_idx: Vec<Option<usize>> =
            got.per_anchor.iter().map(|t| t.map(|t| t.gt_index)).collect();
        assert_eq!(got_idx, want, "tal case {case}");

        // no anchor is positive for two gts, and q stays in [0, 1]
        for t in got.per_anchor.iter().flatten() {
            assert!((0.0..=1.0).contains(&t.q));
        }
    }
}
