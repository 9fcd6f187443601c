//! Classification and box-regression losses with analytic gradients.
//!
//! Scalar losses run in f64 and clamp probabilities to [1e-7, 1 - 1e-7].
//! Each loss has a `_grad` twin returning (value, d value / d input); the
//! gradients are checked against central finite differences in the tests.

use crate::error::{arg_err, Result};
use crate::netdef::HeadOutputs;
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-7;

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// IoU-aware soft classification target: positives carry the IoU with their
/// assigned ground truth, negatives zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsTarget {
    pub q: f64,
}

impl ClsTarget {
    pub fn new(q: f64) -> Result<ClsTarget> {
        if !(0.0..=1.0).contains(&q) {
            return Err(arg_err("cls_target", format!("q = {q} outside [0, 1]")));
        }
        Ok(ClsTarget { q })
    }
}

// ------------------------------------------------------------ focal family

pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    focal_loss_grad(p, y, alpha, gamma).0
}

pub fn focal_loss_grad(p: f64, y: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = clamp_p(p);
    if y {
        let loss = -alpha * (1.0 - p).powf(gamma) * p.ln();
        let grad = -alpha
            * (-gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() + (1.0 - p).powf(gamma) / p);
        (loss, grad)
    } else {
        let loss = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
        let grad = -(1.0 - alpha)
            * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p));
        (loss, grad)
    }
}

fn bce(p: f64, q: f64) -> f64 {
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

fn bce_grad(p: f64, q: f64) -> f64 {
    -(q / p) + (1.0 - q) / (1.0 - p)
}

/// Quality focal loss: |q - p|^beta * BCE(p, q).
pub fn qfl(p: f64, q: f64, beta: f64) -> f64 {
    qfl_grad(p, q, beta).0
}

pub fn qfl_grad(p: f64, q: f64, beta: f64) -> (f64, f64) {
    let p = clamp_p(p);
    let diff = (q - p).abs();
    if beta == 0.0 {
        return (bce(p, q), bce_grad(p, q));
    }
    let w = diff.powf(beta);
    let dw = if diff == 0.0 {
        0.0
    } else {
        beta * diff.powf(beta - 1.0) * -(q - p).signum()
    };
    let b = bce(p, q);
    (w * b, dw * b + w * bce_grad(p, q))
}

/// Varifocal loss: IoU-aware positives, focally down-weighted negatives.
pub fn vfl(p: f64, q: f64, alpha: f64, gamma: f64) -> f64 {
    vfl_grad(p, q, alpha, gamma).0
}

pub fn vfl_grad(p: f64, q: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = clamp_p(p);
    if q > 0.0 {
        let loss = -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln());
        let grad = -q * (q / p - (1.0 - q) / (1.0 - p));
        (loss, grad)
    } else {
        let loss = -alpha * p.powf(gamma) * (1.0 - p).ln();
        let grad =
            -alpha * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p));
        (loss, grad)
    }
}

/// Cross-entropy plus the first polynomial correction: CE + eps1 * (1 - pt).
pub fn poly_loss(p: f64, y: bool, eps1: f64) -> f64 {
    poly_loss_grad(p, y, eps1).0
}

pub fn poly_loss_grad(p: f64, y: bool, eps1: f64) -> (f64, f64) {
    let p = clamp_p(p);
    let (pt, dpt_dp) = if y { (p, 1.0) } else { (1.0 - p, -1.0) };
    let loss = -pt.ln() + eps1 * (1.0 - pt);
    let grad = (-1.0 / pt - eps1) * dpt_dp;
    (loss, grad)
}

// -------------------------------------------------------------- IoU family

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Iou,
    Giou,
    Siou,
}

impl std::str::FromStr for IouKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<IouKind> {
        match s {
            "iou" => Ok(IouKind::Iou),
            "giou" => Ok(IouKind::Giou),
            "siou" => Ok(IouKind::Siou),
            other => Err(arg_err("iou_kind", format!("unknown kind `{other}`"))),
        }
    }
}

/// Pred/gt box pair in (x1, y1, x2, y2) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPair {
    pub pred: [f64; 4],
    pub gt: [f64; 4],
}

/// Loss = 1 - metric. GIoU subtracts the enclosing-box excess; SIoU adds
/// angle-steered distance and shape costs: metric = IoU - (delta + omega)/2
/// with angle cost lambda = 1 - 2 sin^2(arcsin(sin a) - pi/4), distance cost
/// delta = sum(1 - exp(-gamma rho)) over normalized center offsets with
/// gamma = 2 - lambda, and shape cost omega = sum((1 - exp(-w))^theta) with
/// theta = 4 over normalized width/height differences.
pub fn iou_family(b: &BoxPair, kind: IouKind) -> Result<f64> {
    iou_family_grad(b, kind).map(|(l, _)| l)
}

const SIOU_THETA: f64 = 4.0;

/// Returns (loss, d loss / d pred).
pub fn iou_family_grad(b: &BoxPair, kind: IouKind) -> Result<(f64, [f64; 4])> {
    let [px1, py1, px2, py2] = b.pred;
    let [gx1, gy1, gx2, gy2] = b.gt;
    if gx2 < gx1 || gy2 < gy1 {
        return Err(arg_err("iou_family", "gt must satisfy x2 >= x1, y2 >= y1"));
    }

    // enclosing box
    let cx1 = px1.min(gx1);
    let cy1 = py1.min(gy1);
    let cx2 = px2.max(gx2);
    let cy2 = py2.max(gy2);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    if cw <= 0.0 || ch <= 0.0 {
        if b.pred == b.gt {
            // identical degenerate point: metric 1, loss 0 by definition
            return Ok((0.0, [0.0; 4]));
        }
        return Err(arg_err("iou_family", "zero-area enclosing box"));
    }

    // d cw / d pred and d ch / d pred
    let dcw = [
        if px1 < gx1 { -1.0 } else { 0.0 },
        0.0,
        if px2 > gx2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let dch = [
        0.0,
        if py1 < gy1 { -1.0 } else { 0.0 },
        0.0,
        if py2 > gy2 { 1.0 } else { 0.0 },
    ];

    // intersection
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let diw = if iw > 0.0 {
        [
            if px1 > gx1 { -1.0 } else { 0.0 },
            0.0,
            if px2 < gx2 { 1.0 } else { 0.0 },
            0.0,
        ]
    } else {
        [0.0; 4]
    };
    let dih = if ih > 0.0 {
        [
            0.0,
            if py1 > gy1 { -1.0 } else { 0.0 },
            0.0,
            if py2 < gy2 { 1.0 } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let mut dinter = [0.0; 4];
    for i in 0..4 {
        dinter[i] = diw[i] * ih + iw * dih[i];
    }

    // areas and union
    let pw = px2 - px1;
    let ph = py2 - py1;
    let parea = pw.max(0.0) * ph.max(0.0);
    let dparea = if pw > 0.0 && ph > 0.0 {
        [-ph, -pw, ph, pw]
    } else {
        [0.0; 4]
    };
    let garea = (gx2 - gx1) * (gy2 - gy1);
    let union = parea + garea - inter;
    let mut dunion = [0.0; 4];
    for i in 0..4 {
        dunion[i] = dparea[i] - dinter[i];
    }

    let (iou, diou): (f64, [f64; 4]) = if union > 0.0 {
        let v = inter / union;
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = (dinter[i] * union - inter * dunion[i]) / (union * union);
        }
        (v, d)
    } else {
        (0.0, [0.0; 4])
    };

    let (metric, dmetric) = match kind {
        IouKind::Iou => (iou, diou),
        IouKind::Giou => {
            // GIoU = IoU - (C - U)/C = IoU - 1 + U/C
            let c = cw * ch;
            let mut dc = [0.0; 4];
            for i in 0..4 {
                dc[i] = dcw[i] * ch + cw * dch[i];
            }
            let mut d = [0.0; 4];
            for i in 0..4 {
                d[i] = diou[i] + (dunion[i] * c - union * dc[i]) / (c * c);
            }
            (iou - 1.0 + union / c, d)
        }
        IouKind::Siou => {
            let pcx = (px1 + px2) / 2.0;
            let pcy = (py1 + py2) / 2.0;
            let gcx = (gx1 + gx2) / 2.0;
            let gcy = (gy1 + gy2) / 2.0;
            let dx = gcx - pcx;
            let dy = gcy - pcy;
            // d dx / d pred = (-1/2, 0, -1/2, 0); d dy similar on y coords
            let sigma = (dx * dx + dy * dy).sqrt();

            // angle cost and its derivative through sin_a = |dy| / sigma
            let (lambda, dl_ddx, dl_ddy) = if sigma > 1e-12 {
                let sin_a = (dy.abs() / sigma).clamp(0.0, 1.0 - 1e-12);
                let theta = sin_a.asin() - std::f64::consts::FRAC_PI_4;
                let lambda = 1.0 - 2.0 * theta.sin() * theta.sin();
                // dLambda/dsin_a = -2 sin(2 theta) / sqrt(1 - sin_a^2)
                let dl_dsin = -2.0 * (2.0 * theta).sin() / (1.0 - sin_a * sin_a).sqrt();
                let s3 = sigma * sigma * sigma;
                let dsin_ddy = dy.signum() / sigma - dy.signum() * dy * dy / s3;
                let dsin_ddx = -dy.abs() * dx / s3;
                (lambda, dl_dsin * dsin_ddx, dl_dsin * dsin_ddy)
            } else {
                (0.0, 0.0, 0.0)
            };
            let gamma = 2.0 - lambda;

            // distance cost
            let rho_x = (dx / cw) * (dx / cw);
            let rho_y = (dy / ch) * (dy / ch);
            let ex = (-gamma * rho_x).exp();
            let ey = (-gamma * rho_y).exp();
            let delta = (1.0 - ex) + (1.0 - ey);

            // shape cost
            let ww_den = pw.max(gx2 - gx1).max(1e-12);
            let wh_den = ph.max(gy2 - gy1).max(1e-12);
            let om_w = (pw - (gx2 - gx1)).abs() / ww_den;
            let om_h = (ph - (gy2 - gy1)).abs() / wh_den;
            let fw = 1.0 - (-om_w).exp();
            let fh = 1.0 - (-om_h).exp();
            let omega = fw.powf(SIOU_THETA) + fh.powf(SIOU_THETA);

            let metric = iou - (delta + omega) / 2.0;

            // assemble d(delta)/dpred
            let mut ddelta = [0.0; 4];
            // partials of dx, dy w.r.t. pred coords
            let ddx = [-0.5, 0.0, -0.5, 0.0];
            let ddy = [0.0, -0.5, 0.0, -0.5];
            // gamma depends on dx, dy through lambda
            let dgamma_ddx = -dl_ddx;
            let dgamma_ddy = -dl_ddy;
            for i in 0..4 {
                // rho_x depends on dx and cw
                let drho_x = 2.0 * dx / (cw * cw) * ddx[i] - 2.0 * dx * dx / (cw * cw * cw) * dcw[i];
                let drho_y = 2.0 * dy / (ch * ch) * ddy[i] - 2.0 * dy * dy / (ch * ch * ch) * dch[i];
                let dgamma = dgamma_ddx * ddx[i] + dgamma_ddy * ddy[i];
                // d(1 - e^{-g r}) = e^{-g r} (g dr + r dg)
                ddelta[i] = ex * (gamma * drho_x + rho_x * dgamma)
                    + ey * (gamma * drho_y + rho_y * dgamma);
            }

            // assemble d(omega)/dpred: pw = px2 - px1, ph = py2 - py1
            let gw = gx2 - gx1;
            let gh = gy2 - gy1;
            let dom_w_dpw = {
                let num = (pw - gw).abs();
                let dnum = (pw - gw).signum();
                let dden = if pw > gw { 1.0 } else { 0.0 };
                (dnum * ww_den - num * dden) / (ww_den * ww_den)
            };
            let dom_h_dph = {
                let num = (ph - gh).abs();
                let dnum = (ph - gh).signum();
                let dden = if ph > gh { 1.0 } else { 0.0 };
                (dnum * wh_den - num * dden) / (wh_den * wh_den)
            };
            let dfw = SIOU_THETA * fw.powf(SIOU_THETA - 1.0) * (-om_w).exp() * dom_w_dpw;
            let dfh = SIOU_THETA * fh.powf(SIOU_THETA - 1.0) * (-om_h).exp() * dom_h_dph;
            let domega = [-dfw, -dfh, dfw, dfh];

            let mut d = [0.0; 4];
            for i in 0..4 {
                d[i] = diou[i] - (ddelta[i] + domega[i]) / 2.0;
            }
            (metric, d)
        }
    };

    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = -dmetric[i];
    }
    Ok((1.0 - metric, grad))
}

// ---------------------------------------------------------------------- DFL

/// A continuous bin-space distance plus the logits that should regress it.
#[derive(Debug, Clone)]
pub struct DflTarget {
    pub y: f64,
    pub logits: Vec<f32>,
}

/// Distribution focal loss over reg_max+1 bins.
pub fn dfl(y: f64, logits: &[f32]) -> Result<f64> {
    dfl_grad(y, logits).map(|(l, _)| l)
}

/// Returns (loss, d loss / d logits) with d/dz_k = S_k - t_k, t the two-hot
/// interpolation weights of y.
pub fn dfl_grad(y: f64, logits: &[f32]) -> Result<(f64, Vec<f64>)> {
    let reg_max = logits.len().checked_sub(1).ok_or_else(|| {
        arg_err("dfl", "logits must hold at least one bin")
    })?;
    if !(0.0..=reg_max as f64).contains(&y) {
        return Err(arg_err(
            "dfl",
            format!("target {y} outside [0, {reg_max}]"),
        ));
    }
    let i = (y.floor() as usize).min(reg_max);
    let wl = (i + 1) as f64 - y;
    let wr = y - i as f64;

    // softmax in f64 with max shift
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64) - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let soft: Vec<f64> = exps.iter().map(|e| e / denom).collect();

    let mut loss = -wl * soft[i].max(PROB_EPS).ln();
    if wr > 0.0 {
        loss -= wr * soft[i + 1].max(PROB_EPS).ln();
    }
    let mut grad = soft;
    grad[i] -= wl;
    if wr > 0.0 {
        grad[i + 1] -= wr;
    }
    Ok((loss, grad))
}

// ------------------------------------------------------------- distillation

/// Cosine decay of the soft-label weight over normalized training time.
pub fn distill_weight(t_epoch: f64) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * t_epoch).cos())
}

/// Soft-label distillation term and its gradients with respect to the
/// student maps, already scaled by the cosine-decayed weight.
#[derive(Debug)]
pub struct DistillGrads {
    pub value: f64,
    pub weight: f64,
    pub d_cls: Vec<Tensor>,
    pub d_box: Vec<Tensor>,
}

/// KL divergence between per-class sigmoid distributions plus, when the box
/// branch carries bins, cross-entropy between the per-side bin
/// distributions. Both terms are means over their elements.
pub fn distill_loss(student: &HeadOutputs, teacher: &HeadOutputs, t_epoch: f64) -> Result<DistillGrads> {
    if !(0.0..=1.0).contains(&t_epoch) {
        return Err(arg_err("distill_loss", "t_epoch must lie in [0, 1]"));
    }
    if student.cls.len() != teacher.cls.len() || student.reg_max != teacher.reg_max {
        return Err(arg_err("distill_loss", "student/teacher structure differs"));
    }
    let w = distill_weight(t_epoch);
    let mut value = 0.0f64;
    let mut d_cls = Vec::with_capacity(student.cls.len());
    let mut d_box = Vec::with_capacity(student.boxes.len());

    // classification: Bernoulli KL per (anchor, class)
    let mut cls_sum = 0.0f64;
    let mut cls_count = 0usize;
    let mut cls_grads = Vec::new();
    for (s, t) in student.cls.iter().zip(teacher.cls.iter()) {
        if s.shape() != t.shape() {
            return Err(crate::error::shape_err("distill_loss", t.shape(), s.shape()));
        }
        cls_count += s.numel();
        let mut g = vec![0.0f32; s.numel()];
        for (i, (&zs, &zt)) in s.data().iter().zip(t.data().iter()).enumerate() {
            let ps = clamp_p(crate::tensor::sigmoid(zs) as f64);
            let pt = clamp_p(crate::tensor::sigmoid(zt) as f64);
            cls_sum += pt * (pt / ps).ln() + (1.0 - pt) * ((1.0 - pt) / (1.0 - ps)).ln();
            g[i] = (ps - pt) as f32;
        }
        cls_grads.push((s.shape(), g));
    }
    let cls_norm = cls_count.max(1) as f64;
    value += cls_sum / cls_norm;
    for (shape, mut g) in cls_grads {
        for v in &mut g {
            *v = (*v as f64 * w / cls_norm) as f32;
        }
        d_cls.push(Tensor::new(shape, g)?);
    }

    // box branch: per-side bin distribution cross-entropy when bins exist
    if student.reg_max > 0 {
        let bins = student.reg_max + 1;
        let mut box_sum = 0.0f64;
        let mut box_count = 0usize;
        let mut box_grads = Vec::new();
        for (s, t) in student.boxes.iter().zip(teacher.boxes.iter()) {
            if s.shape() != t.shape() {
                return Err(crate::error::shape_err("distill_loss", t.shape(), s.shape()));
            }
            let sh = s.shape();
            let hw = sh.h * sh.w;
            let mut g = vec![0.0f32; s.numel()];
            for n in 0..sh.n {
                for side in 0..4 {
                    for cell in 0..hw {
                        let mut zs = Vec::with_capacity(bins);
                        let mut zt = Vec::with_capacity(bins);
                        for k in 0..bins {
                            let ch = side * bins + k;
                            zs.push(s.data()[(n * sh.c + ch) * hw + cell]);
                            zt.push(t.data()[(n * sh.c + ch) * hw + cell]);
                        }
                        let ss = softmax64(&zs);
                        let tt = softmax64(&zt);
                        box_count += 1;
                        for k in 0..bins {
                            // KL form: the teacher-entropy offset keeps the
                            // term zero at equality; the gradient matches
                            // plain cross-entropy
                            box_sum +=
                                tt[k] * (tt[k].max(PROB_EPS).ln() - ss[k].max(PROB_EPS).ln());
                            let ch = side * bins + k;
                            g[(n * sh.c + ch) * hw + cell] = (ss[k] - tt[k]) as f32;
                        }
                    }
                }
            }
            box_grads.push((sh, g));
        }
        let box_norm = box_count.max(1) as f64;
        value += box_sum / box_norm;
        for (shape, mut g) in box_grads {
            for v in &mut g {
                *v = (*v as f64 * w / box_norm) as f32;
            }
            d_box.push(Tensor::new(shape, g)?);
        }
    } else {
        for s in &student.boxes {
            d_box.push(Tensor::zeros(s.shape()));
        }
    }

    Ok(DistillGrads {
        value: w * value,
        weight: w,
        d_cls,
        d_box,
    })
}

fn softmax64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| ((z as f64) - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}
