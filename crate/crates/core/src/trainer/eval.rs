//! COCO-style average precision with 101-point interpolation.

use crate::netdef::{iou_xyxy, Detection, GroundTruth};

/// IoU thresholds 0.50:0.95:0.05.
pub fn coco_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    /// Mean over classes and thresholds.
    pub ap: f64,
    /// Mean over classes at IoU 0.50.
    pub ap50: f64,
    /// Set when there were no ground truths to score against.
    pub empty: bool,
}

/// Greedy matching per class and IoU threshold: detections in descending
/// score order claim the highest-IoU unmatched ground truth of their image;
/// the precision-recall curve is
/// interpolated at 101 recall points.
pub fn evaluate_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thresholds: &[f32],
) -> ApResult {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return ApResult {
            ap: 0.0,
            ap50: 0.0,
            empty: true,
        };
    }

    let mut ap_sum = 0.0f64;
    let mut ap50_sum = 0.0f64;
    for &class in &classes {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|g| g.class_id == class).count())
            .sum();
        // all detections of this class with their image index, by score
        let mut flat: Vec<(usize, Detection)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            for d in ds.iter().filter(|d| d.class_id == class) {
                flat.push((img, *d));
            }
        }
        flat.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.x1.partial_cmp(&b.1.x1).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.1.y1.partial_cmp(&b.1.y1).unwrap_or(std::cmp::Ordering::Equal))
        });

        for (ti, &thresh) in iou_thresholds.iter().enumerate() {
            let ap = ap_single(&flat, gts, class, n_gt, thresh);
            ap_sum += ap / iou_thresholds.len() as f64;
            if ti == 0 && (thresh - 0.5).abs() < 1e-6 {
                ap50_sum += ap;
            }
        }
    }
    ApResult {
        ap: ap_sum / classes.len() as f64,
        ap50: ap50_sum / classes.len() as f64,
        empty: false,
    }
}

fn ap_single(
    flat: &[(usize, Detection)],
    gts: &[Vec<GroundTruth>],
    class: usize,
    n_gt: usize,
    thresh: f32,
) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prec_rec: Vec<(f64, f64)> = Vec::with_capacity(flat.len());
    for &(img, d) in flat {
        // best unmatched gt of the same class in this image
        let mut best: Option<(f32, usize)> = None;
        for (gi, g) in gts[img].iter().enumerate() {
            if g.class_id != class || matched[img][gi] {
                continue;
            }
            let iou = iou_xyxy([d.x1, d.y1, d.x2, d.y2], g.corners());
            if iou >= thresh && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                matched[img][gi] = true;
                tp += 1;
            }
            None => fp = fp + 1,
        }
        prec_rec.push((
            tp as f64 / (tp + fp) as f64,
            tp as f64 / n_gt as f64,
        ));
    }
    // 101-point interpolated AP: mean of the precision envelope at
    // recalls 0.00, 0.01, ..., 1.00
    let mut sum = 0.0f64;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = prec_rec
            .iter()
            .filter(|(_, rec)| *rec >= r - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize, score: f32) -> Detection {
        Detection {
            x1,
            y1,
            x2,
            y2,
            class_id,
            score,
        }
    }

    fn gt(x1: f32, y1: f32, x2: f32, y2: f32, class_id: usize) -> GroundTruth {
        GroundTruth {
            x1,
            y1,
            x2,
            y2,
            class_id,
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(20.0, 20.0, 30.0, 30.0, 1)],
            vec![gt(5.0, 5.0, 15.0, 15.0, 0)],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|gs| {
                gs.iter()
                    .map(|g| det(g.x1, g.y1, g.x2, g.y2, g.class_id, 1.0))
                    .collect()
            })
            .collect();
        let r = evaluate_ap(&dets, &gts, &coco_thresholds());
        assert!((r.ap - 1.0).abs() < 1e-12, "ap {}", r.ap);
        assert!((r.ap50 - 1.0).abs() < 1e-12, "ap50 {}", r.ap50);
        assert!(!r.empty);
    }

    #[test]
    fn no_detections_is_zero_and_no_gts_sets_the_flag() {
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0, 0)]];
        let r = evaluate_ap(&[vec![]], &gts, &coco_thresholds());
        assert_eq!(r.ap, 0.0);
        assert!(!r.empty);

        let r = evaluate_ap(&[vec![]], &[vec![]], &coco_thresholds());
        assert_eq!(r.ap, 0.0);
        assert!(r.empty);
    }

    /// Hand-computed case: class 0 over three images has three ground
    /// truths, detections TP(0.9), FP(0.8), TP(0.7): envelope gives
    /// 34 points at precision 1, 33 at 2/3, 34 at 0, AP50 = 56/101.
    /// Class 1 is one clean TP: AP50 = 1. Mean = 157/202.
    #[test]
    fn hand_constructed_pr_curve_reproduces_by_hand_ap50() {
        let gts = vec![
            vec![gt(0.0, 0.0, 10.0, 10.0, 0), gt(50.0, 50.0, 60.0, 60.0, 1)],
            vec![gt(0.0, 0.0, 10.0, 10.0, 0)],
            vec![gt(0.0, 0.0, 10.0, 10.0, 0)],
        ];
        let dets = vec![
            vec![
                det(0.0, 0.0, 10.0, 10.0, 0, 0.9),  // TP
                det(50.0, 50.0, 60.0, 60.0, 1, 0.6), // TP class 1
            ],
            vec![det(30.0, 30.0, 40.0, 40.0, 0, 0.8)], // FP (no overlap)
            vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.7)],   // TP; one FN remains
        ];
        let r = evaluate_ap(&dets, &gts, &[0.5]);
        let want = 157.0 / 202.0;
        assert!(
            (r.ap50 - want).abs() < 1e-12,
            "ap50 {} vs hand value {want}",
            r.ap50
        );
        assert!((r.ap - want).abs() < 1e-12, "single-threshold ap equals ap50");
    }

    /// Brute-force oracle: same greedy definition, re-derived with repeated
    /// scans instead of sorting, PR points re-accumulated from scratch.
    fn oracle_ap50(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> f64 {
        let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return 0.0;
        }
        let mut total = 0.0f64;
        for &c in &classes {
            let n_gt: usize = gts.iter().flatten().filter(|g| g.class_id == c).count();
            let mut pool: Vec<(usize, Detection)> = Vec::new();
            for (i, ds) in dets.iter().enumerate() {
                for d in ds.iter().filter(|d| d.class_id == c) {
                    pool.push((i, *d));
                }
            }
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut curve: Vec<(f64, f64)> = Vec::new();
            let (mut tp, mut fp) = (0.0f64, 0.0f64);
            while !pool.is_empty() {
                // highest score first, ties by (image, x1, y1)
                let mut bi = 0;
                for i in 1..pool.len() {
                    let (ia, a) = &pool[i];
                    let (ib, b) = &pool[bi];
                    if a.score > b.score
                        || (a.score == b.score
                            && (ia < ib
                                || (ia == ib && (a.x1 < b.x1 || (a.x1 == b.x1 && a.y1 < b.y1)))))
                    {
                        bi = i;
                    }
                }
                let (img, d) = pool.remove(bi);
                let mut best_gt = None;
                let mut best_iou = 0.0f32;
                for (gi, g) in gts[img].iter().enumerate() {
                    if g.class_id != c || matched[img][gi] {
                        continue;
                    }
                    let iou = iou_xyxy([d.x1, d.y1, d.x2, d.y2], g.corners());
                    if iou >= 0.5 && iou > best_iou {
                        best_iou = iou;
                        best_gt = Some(gi);
                    }
                }
                if let Some(gi) = best_gt {
                    matched[img][gi] = true;
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                curve.push((tp / (tp + fp), tp / n_gt as f64));
            }
            let mut sum = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let mut best = 0.0f64;
                for &(p, rec) in &curve {
                    if rec >= r - 1e-12 && p > best {
                        best = p;
                    }
                }
                sum += best;
            }
            total += sum / 101.0;
        }
        total / classes.len() as f64
    }

    #[test]
    fn ap_matches_brute_force_oracle_on_small_instances() {
        let mut rng = crate::rng::Rng::new(55);
        for _ in 0..50 {
            let n_imgs = rng.int_range(1, 3);
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            let mut total_boxes = 0usize;
            for _ in 0..n_imgs {
                let mut g = Vec::new();
                let mut d = Vec::new();
                while total_boxes < 10 && rng.uniform() < 0.7 {
                    let x1 = rng.range(0.0, 40.0) as f32;
                    let y1 = rng.range(0.0, 40.0) as f32;
                    let gt_box = gt(
                        x1,
                        y1,
                        x1 + rng.range(4.0, 16.0) as f32,
                        y1 + rng.range(4.0, 16.0) as f32,
                        rng.below(2),
                    );
                    g.push(gt_box);
                    total_boxes += 1;
                    // detection near the gt (sometimes off)
                    let jitter = rng.range(0.0, 8.0) as f32;
                    d.push(det(
                        gt_box.x1 + jitter,
                        gt_box.y1,
                        gt_box.x2 + jitter,
                        gt_box.y2,
                        if rng.uniform() < 0.8 { gt_box.class_id } else { 1 - gt_box.class_id },
                        (rng.range(0.1, 1.0) * 100.0).round() as f32 / 100.0,
                    ));
                }
                gts.push(g);
                dets.push(d);
            }
            let got = evaluate_ap(&dets, &gts, &[0.5]);
            let want = oracle_ap50(&dets, &gts);
            if gts.iter().all(|g| g.is_empty()) {
                continue;
            }
            assert!(
                (got.ap50 - want).abs() < 1e-9,
                "ap50 {} vs oracle {want}",
                got.ap50
            );
        }
    }
}
