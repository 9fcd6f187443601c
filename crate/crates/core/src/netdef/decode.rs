//! Anchor-free box decoding and non-maximum suppression.

use super::HeadOutputs;
use crate::error::{arg_err, Result};
use crate::tensor::sigmoid;

/// A decoded box in input-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
    pub score: f32,
}

/// A labeled box in input-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn corners(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

impl Detection {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &Detection) -> f32 {
        iou_xyxy(
            [self.x1, self.y1, self.x2, self.y2],
            [other.x1, other.y1, other.x2, other.y2],
        )
    }
}

pub fn iou_xyxy(a: [f32; 4], b: [f32; 4]) -> f32 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-side distances for one grid cell: raw channel values when reg_max is
/// zero, otherwise the expectation of the softmax over reg_max+1 bins.
pub fn side_distances(raw: &[f32], reg_max: usize) -> [f32; 4] {
    let mut out = [0.0f32; 4];
    if reg_max == 0 {
        out.copy_from_slice(&raw[..4]);
        return out;
    }
    let bins = reg_max + 1;
    for (side, slot) in out.iter_mut().enumerate() {
        let logits = &raw[side * bins..(side + 1) * bins];
        *slot = dfl_expectation(logits);
    }
    out
}

/// E[k] under softmax(logits), computed in f64 with max-shift.
pub fn dfl_expectation(logits: &[f32]) -> f32 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0.0f64;
    let mut num = 0.0f64;
    for (k, &z) in logits.iter().enumerate() {
        let e = ((z as f64) - m).exp();
        denom += e;
        num += k as f64 * e;
    }
    (num / denom) as f32
}

/// Decode head maps into detections. Cell (i, j) at stride s has its anchor
/// point at ((j+0.5)s, (i+0.5)s); the box spans (cx-l, cy-t, cx+r, cy+b)
/// with distances scaled by s. Scores are per-class sigmoids; entries at or
/// below `conf_thresh` are dropped.
pub fn decode(h: &HeadOutputs, conf_thresh: f32) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (scale, (cls, boxes)) in h.cls.iter().zip(h.boxes.iter()).enumerate() {
        let cs = cls.shape();
        let bs = boxes.shape();
        if cs.n != 1 || bs.n != 1 {
            return Err(arg_err("decode", "decode expects single-image maps"));
        }
        let stride = h.strides[scale] as f32;
        let nc = cs.c;
        let box_ch = bs.c;
        let bins4 = if h.reg_max == 0 { 4 } else { 4 * (h.reg_max + 1) };
        if box_ch != bins4 {
            return Err(arg_err(
                "decode",
                format!("box map has {box_ch} channels, expected {bins4}"),
            ));
        }
        let hw = cs.h * cs.w;
        let mut raw = vec![0.0f32; box_ch];
        for i in 0..cs.h {
            for j in 0..cs.w {
                let cell = i * cs.w + j;
                for (ch, r) in raw.iter_mut().enumerate() {
                    *r = boxes.data()[ch * hw + cell];
                }
                let d = side_distances(&raw, h.reg_max);
                let cx = (j as f32 + 0.5) * stride;
                let cy = (i as f32 + 0.5) * stride;
                let bx = [
                    cx - d[0] * stride,
                    cy - d[1] * stride,
                    cx + d[2] * stride,
                    cy + d[3] * stride,
                ];
                for c in 0..nc {
                    let score = sigmoid(cls.data()[c * hw + cell]);
                    if score > conf_thresh {
                        dets.push(Detection {
                            x1: bx[0],
                            y1: bx[1],
                            x2: bx[2],
                            y2: bx[3],
                            class_id: c,
                            score,
                        });
                    }
                }
            }
        }
    }
    Ok(dets)
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.x1.partial_cmp(&b.x1).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.y1.partial_cmp(&b.y1).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.class_id.cmp(&b.class_id))
}

/// Class-wise greedy suppression by descending score with a deterministic
/// (score, x1, y1) tie-break. Emission order is non-increasing in score.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(arg_err("nms", "iou_thresh must lie in (0, 1)"));
    }
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(det_order);
    let mut keep: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        let d = sorted[i];
        keep.push(d);
        for (j, other) in sorted.iter().enumerate().skip(i + 1) {
            if !suppressed[j] && other.class_id == d.class_id && d.iou(other) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}
