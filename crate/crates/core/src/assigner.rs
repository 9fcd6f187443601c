//! Label assignment: mapping ground-truth boxes to anchor points.
//!
//! Three strategies with one output contract: ATSS (statistical IoU
//! thresholding, used as the warm-up assigner), SimOTA (cost-based dynamic-k
//! matching), and TAL (task-aligned top-k). All tie-breaking is fixed as
//! (higher metric, then lower anchor index), so assignments are
//! deterministic; small instances are verified against exhaustive oracles.

use crate::error::{arg_err, Result};
use crate::netdef::{iou_xyxy, GroundTruth};

/// Grid-cell center in input pixels: ((j+0.5)s, (i+0.5)s) at stride s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPoint {
    pub x: f32,
    pub y: f32,
    pub stride: usize,
}

/// Anchor points of one feature pyramid, scale-major then row-major.
pub fn anchor_points(grid_hw: &[(usize, usize)], strides: &[usize]) -> Vec<AnchorPoint> {
    let mut out = Vec::new();
    for (&(h, w), &s) in grid_hw.iter().zip(strides.iter()) {
        for i in 0..h {
            for j in 0..w {
                out.push(AnchorPoint {
                    x: (j as f32 + 0.5) * s as f32,
                    y: (i as f32 + 0.5) * s as f32,
                    stride: s,
                });
            }
        }
    }
    out
}

/// Targets for one positive anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosTarget {
    pub gt_index: usize,
    pub class_id: usize,
    pub gt_box: [f32; 4],
    /// Soft classification quality in [0, 1].
    pub q: f32,
}

/// Per-anchor assignment; None marks a negative anchor. Each anchor is
/// assigned to at most one ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub per_anchor: Vec<Option<PosTarget>>,
}

impl Assignment {
    fn negatives(n: usize) -> Assignment {
        Assignment {
            per_anchor: vec![None; n],
        }
    }

    pub fn num_positive(&self) -> usize {
        self.per_anchor.iter().filter(|t| t.is_some()).count()
    }
}

/// Side of the synthetic anchor box used by point-based ATSS, in strides.
/// Small enough that candidate IoUs spread with center distance at toy
/// object sizes; a statistical threshold over near-identical IoUs would
/// select nothing.
pub const ATSS_ANCHOR_STRIDES: f32 = 2.0;

fn atss_anchor_box(a: &AnchorPoint) -> [f32; 4] {
    let half = 0.5 * ATSS_ANCHOR_STRIDES * a.stride as f32;
    [a.x - half, a.y - half, a.x + half, a.y + half]
}

/// Adaptive training sample selection. Per ground truth: the topk closest
/// anchors per stride level are candidates; the IoU threshold is the mean
/// plus standard deviation of candidate IoUs; positives are candidates at or
/// above the threshold whose centers lie inside the box. Anchors claimed by
/// several ground truths go to the highest IoU.
pub fn atss_assign(
    anchors: &[AnchorPoint],
    gts: &[GroundTruth],
    topk: usize,
) -> Result<Assignment> {
    if anchors.is_empty() {
        return Err(arg_err("atss_assign", "empty anchor set"));
    }
    if topk == 0 {
        return Err(arg_err("atss_assign", "topk must be at least 1"));
    }
    let mut levels: Vec<usize> = anchors.iter().map(|a| a.stride).collect();
    levels.sort_unstable();
    levels.dedup();

    // best (iou, gt) per anchor
    let mut claims: Vec<Option<(f32, usize)>> = vec![None; anchors.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let (gcx, gcy) = gt.center();
        let mut candidates: Vec<usize> = Vec::new();
        for &level in &levels {
            let mut level_anchors: Vec<(f32, usize)> = anchors
                .iter()
                .enumerate()
                .filter(|(_, a)| a.stride == level)
                .map(|(i, a)| {
                    let d2 = (a.x - gcx) * (a.x - gcx) + (a.y - gcy) * (a.y - gcy);
                    (d2, i)
                })
                .collect();
            level_anchors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            candidates.extend(level_anchors.iter().take(topk).map(|&(_, i)| i));
        }
        let ious: Vec<f32> = candidates
            .iter()
            .map(|&i| iou_xyxy(atss_anchor_box(&anchors[i]), gt.corners()))
            .collect();
        let mean = ious.iter().sum::<f32>() / ious.len() as f32;
        let var = ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / ious.len() as f32;
        let thresh = mean + var.sqrt();
        for (&i, &iou) in candidates.iter().zip(ious.iter()) {
            let a = &anchors[i];
            if iou >= thresh && gt.contains(a.x, a.y) {
                let better = match claims[i] {
                    None => true,
                    Some((prev, _)) => iou > prev,
                };
                if better {
                    claims[i] = Some((iou, gi));
                }
            }
        }
    }

    let per_anchor = claims
        .into_iter()
        .map(|c| {
            c.map(|(iou, gi)| PosTarget {
                gt_index: gi,
                class_id: gts[gi].class_id,
                gt_box: gts[gi].corners(),
                q: iou,
            })
        })
        .collect();
    Ok(Assignment { per_anchor })
}

/// Candidate test shared by SimOTA: center inside the box, or within a
/// square radius of the box center measured in strides.
fn in_center_region(a: &AnchorPoint, gt: &GroundTruth, radius: f32) -> bool {
    if gt.contains(a.x, a.y) {
        return true;
    }
    let (gcx, gcy) = gt.center();
    let r = radius * a.stride as f32;
    (a.x - gcx).abs() <= r && (a.y - gcy).abs() <= r
}

fn bce_cost(p: f32) -> f64 {
    -(p.clamp(1e-7, 1.0 - 1e-7) as f64).ln()
}

/// Assignment cost: full binary cross-entropy against the one-hot class plus
/// lambda * (-log IoU).
fn simota_cost(
    cls_row: &[f32],
    class_id: usize,
    iou: f32,
    lambda_iou: f64,
) -> f64 {
    let mut ce = 0.0f64;
    for (c, &p) in cls_row.iter().enumerate() {
        if c == class_id {
            ce += bce_cost(p);
        } else {
            ce += bce_cost(1.0 - p);
        }
    }
    ce + lambda_iou * -((iou as f64).max(1e-9).ln())
}

pub const SIMOTA_CENTER_RADIUS: f32 = 2.5;
const SIMOTA_DYNAMIC_K_TOP: usize = 10;

/// Simplified optimal-transport assignment with dynamic k per ground truth.
/// `cls_pred` holds per-anchor class probabilities (num_classes per row),
/// `box_pred` the decoded boxes.
pub fn simota_assign(
    anchors: &[AnchorPoint],
    gts: &[GroundTruth],
    cls_pred: &[f32],
    box_pred: &[[f32; 4]],
    lambda_iou: f64,
) -> Result<Assignment> {
    if gts.is_empty() {
        return Ok(Assignment::negatives(anchors.len()));
    }
    if anchors.is_empty() {
        return Err(arg_err("simota_assign", "empty anchor set"));
    }
    let nc = cls_pred.len() / anchors.len();
    if nc * anchors.len() != cls_pred.len() || box_pred.len() != anchors.len() {
        return Err(arg_err("simota_assign", "predictions not shaped to anchors"));
    }

    // per-gt candidate lists with costs, then per-gt top-k picks
    let mut picks: Vec<Vec<usize>> = Vec::with_capacity(gts.len());
    let mut pick_cost: Vec<Vec<f64>> = Vec::with_capacity(gts.len());
    for gt in gts {
        let cand: Vec<usize> = (0..anchors.len())
            .filter(|&i| in_center_region(&anchors[i], gt, SIMOTA_CENTER_RADIUS))
            .collect();
        if cand.is_empty() {
            picks.push(Vec::new());
            pick_cost.push(Vec::new());
            continue;
        }
        let ious: Vec<f32> = cand
            .iter()
            .map(|&i| iou_xyxy(box_pred[i], gt.corners()))
            .collect();
        // dynamic k: the rounded sum of the top-10 candidate IoUs
        let mut sorted_ious = ious.clone();
        sorted_ious.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k_raw: f32 = sorted_ious.iter().take(SIMOTA_DYNAMIC_K_TOP).sum();
        let k = (k_raw.round() as usize).clamp(1, cand.len());

        let mut costs: Vec<(f64, usize)> = cand
            .iter()
            .zip(ious.iter())
            .map(|(&i, &iou)| {
                (
                    simota_cost(&cls_pred[i * nc..(i + 1) * nc], gt.class_id, iou, lambda_iou),
                    i,
                )
            })
            .collect();
        costs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        picks.push(costs.iter().take(k).map(|&(_, i)| i).collect());
        pick_cost.push(costs.iter().take(k).map(|&(c, _)| c).collect());
    }

    // resolve anchors claimed by several ground truths: lowest cost wins
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (gi, (pick, costs)) in picks.iter().zip(pick_cost.iter()).enumerate() {
        for (&i, &cost) in pick.iter().zip(costs.iter()) {
            let better = match claims[i] {
                None => true,
                Some((prev, _)) => cost < prev,
            };
            if better {
                claims[i] = Some((cost, gi));
            }
        }
    }

    let per_anchor = claims
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.map(|(_, gi)| PosTarget {
                gt_index: gi,
                class_id: gts[gi].class_id,
                gt_box: gts[gi].corners(),
                q: iou_xyxy(box_pred[i], gts[gi].corners()),
            })
        })
        .collect();
    Ok(Assignment { per_anchor })
}

/// Task-aligned assignment: alignment metric t = s^alpha * u^beta over
/// anchors whose centers fall inside the box; top-k by t per ground truth;
/// anchor conflicts go to the higher t. Quality targets are t normalized per
/// ground truth and rescaled so its maximum equals the maximum IoU.
pub fn tal_assign(
    anchors: &[AnchorPoint],
    gts: &[GroundTruth],
    cls_pred: &[f32],
    box_pred: &[[f32; 4]],
    alpha: f64,
    beta: f64,
    topk: usize,
) -> Result<Assignment> {
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(arg_err("tal_assign", "alpha and beta must be positive"));
    }
    if gts.is_empty() {
        return Ok(Assignment::negatives(anchors.len()));
    }
    if anchors.is_empty() {
        return Err(arg_err("tal_assign", "empty anchor set"));
    }
    let nc = cls_pred.len() / anchors.len();
    if nc * anchors.len() != cls_pred.len() || box_pred.len() != anchors.len() {
        return Err(arg_err("tal_assign", "predictions not shaped to anchors"));
    }

    // per-gt: candidates inside the box, aligned metric, top-k
    struct Pick {
        anchor: usize,
        t: f64,
        u: f32,
    }
    let mut picks: Vec<Vec<Pick>> = Vec::with_capacity(gts.len());
    for gt in gts {
        let mut scored: Vec<Pick> = (0..anchors.len())
            .filter(|&i| gt.contains(anchors[i].x, anchors[i].y))
            .map(|i| {
                let s = cls_pred[i * nc + gt.class_id] as f64;
                let u = iou_xyxy(box_pred[i], gt.corners());
                Pick {
                    anchor: i,
                    t: s.max(0.0).powf(alpha) * (u as f64).max(0.0).powf(beta),
                    u,
                }
            })
            .collect();
        scored.sort_by(|a, b| {
            b.t.partial_cmp(&a.t)
                .unwrap()
                .then(a.anchor.cmp(&b.anchor))
        });
        scored.truncate(topk);
        picks.push(scored);
    }

    // conflicts: higher t wins, then lower gt index
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (gi, pick) in picks.iter().enumerate() {
        for p in pick {
            let better = match claims[p.anchor] {
                None => true,
                Some((prev, _)) => p.t > prev,
            };
            if better {
                claims[p.anchor] = Some((p.t, gi));
            }
        }
    }

    // q: normalized t rescaled so each gt's max q equals its max IoU
    let mut per_anchor: Vec<Option<PosTarget>> = vec![None; anchors.len()];
    for (gi, pick) in picks.iter().enumerate() {
        let survivors: Vec<&Pick> = pick
            .iter()
            .filter(|p| matches!(claims[p.anchor], Some((_, g)) if g == gi))
            .collect();
        if survivors.is_empty() {
            continue;
        }
        let max_t = survivors.iter().map(|p| p.t).fold(0.0f64, f64::max);
        let max_u = survivors.iter().map(|p| p.u).fold(0.0f32, f32::max);
        for p in survivors {
            let q = if max_t > 0.0 {
                ((p.t / max_t) as f32) * max_u
            } else {
                0.0
            };
            per_anchor[p.anchor] = Some(PosTarget {
                gt_index: gi,
                class_id: gts[gi].class_id,
                gt_box: gts[gi].corners(),
                q,
            });
        }
    }
    Ok(Assignment { per_anchor })
}

#[cfg(test)]
mod tests;
