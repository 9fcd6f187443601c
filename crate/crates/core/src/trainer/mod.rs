//! Desk-scale training harness: SGD + momentum + cosine decay, EMA weights,
//! mosaic/mixup augmentation, ATSS warm-up into TAL assignment, per-variant
//! loss wiring, optional self-distillation, and per-epoch AP evaluation on a
//! held-out split. Runs are bit-deterministic for a fixed seed and thread
//! count does not affect results.

mod augment;
mod eval;
mod optim;
mod synth;

pub use augment::{gray_border_preprocess, mixup, mosaic, Letterbox, PreprocessMode, GRAY};
pub use eval::{coco_thresholds, evaluate_ap, ApResult};
pub use optim::{cosine_lr, ema_update, SgdState};
pub use synth::{gen_synth_dataset, load_dataset, save_dataset, SynthSample};

use crate::assigner::{anchor_points, atss_assign, simota_assign, tal_assign, Assignment};
use crate::error::{arg_err, Error, Result};
use crate::losses::{dfl_grad, distill_loss, iou_family_grad, vfl_grad, BoxPair, IouKind};
use crate::netdef::{decode, nms, Detection, GroundTruth, HeadOutputs, Model, Variant};
use crate::quantsim::QuantSim;
use crate::rng::Rng;
use crate::tensor::{sigmoid, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignerKind {
    Atss,
    SimOta,
    Tal,
}

/// Training hyperparameters. Defaults follow the toy schedule; the optimizer
/// family (SGD + momentum + cosine decay + EMA) is fixed.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub warmup_epochs: f64,
    pub seed: u64,
    /// Epochs assigned with ATSS before switching to TAL.
    pub atss_warmup_epochs: usize,
    /// Assigner used after warm-up.
    pub assigner: AssignerKind,
    pub mosaic_prob: f64,
    /// Mosaic is disabled after this fraction of training.
    pub mosaic_until: f64,
    pub mixup_prob: f64,
    pub cls_weight: f64,
    pub box_weight: f64,
    pub dfl_weight: f64,
    /// Held-out fraction of the dataset used for per-epoch AP.
    pub val_fraction: f64,
    /// Evaluation preprocessing mode and target size.
    pub eval_mode: PreprocessMode,
    pub eval_target: usize,
    pub conf_thresh: f32,
    pub nms_iou: f32,
    /// Regression loss override; the default follows the variant wiring.
    pub iou_kind: Option<IouKind>,
    /// Teacher for self-distillation (same-variant checkpoint).
    pub distill_teacher: Option<Model>,
    /// Worker threads (0 = available parallelism). Results do not depend on
    /// this value.
    pub threads: usize,
}

impl TrainConfig {
    pub fn toy(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr0: 0.01,
            lrf: 0.0002,
            momentum: 0.937,
            weight_decay: 5e-4,
            ema_decay: 0.9999,
            warmup_epochs: 3.0,
            seed,
            atss_warmup_epochs: 4,
            assigner: AssignerKind::Tal,
            mosaic_prob: 1.0,
            mosaic_until: 0.9,
            mixup_prob: 0.1,
            cls_weight: 1.0,
            box_weight: 2.5,
            dfl_weight: 0.5,
            val_fraction: 0.1,
            eval_mode: PreprocessMode::Border,
            eval_target: 64,
            conf_thresh: 0.03,
            nms_iou: 0.65,
            iou_kind: None,
            distill_teacher: None,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lrf && self.lrf >= 0.0) {
            return Err(arg_err("train_config", "need lr0 > lrf >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(arg_err("train_config", "momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(arg_err("train_config", "ema_decay must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(arg_err("train_config", "epochs and batch_size must be positive"));
        }
        Ok(())
    }

    fn thread_count(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

/// Regression-loss wiring per variant: SIoU for the smallest model, GIoU for
/// the rest.
pub fn default_iou_kind(variant: Variant) -> IouKind {
    match variant {
        Variant::N => IouKind::Siou,
        _ => IouKind::Giou,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub dfl_loss: f64,
    pub distill_loss: f64,
    pub ap: f64,
    pub ap50: f64,
    pub wall_seconds: f64,
}

/// Tab-separated metrics log, one line per epoch.
pub fn format_metrics_log(stats: &[EpochStats]) -> String {
    let mut out =
        String::from("epoch\tlr\tcls_loss\tbox_loss\tdfl_loss\tdistill_loss\tap\tap50\twall_seconds\n");
    for s in stats {
        out.push_str(&format!(
            "{}\t{:.8}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
            s.epoch, s.lr, s.cls_loss, s.box_loss, s.dfl_loss, s.distill_loss, s.ap, s.ap50,
            s.wall_seconds
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub ema_model: Model,
    pub log: Vec<EpochStats>,
}

// ---------------------------------------------------------------- loss core

struct LossBreakdown {
    cls: f64,
    box_: f64,
    dfl: f64,
    distill: f64,
}

struct SampleGrads {
    /// Gradients for cls maps then box maps, in scale order.
    grads: Vec<Tensor>,
    total: f64,
    parts: LossBreakdown,
}

struct LossSettings {
    iou_kind: IouKind,
    cls_weight: f64,
    box_weight: f64,
    dfl_weight: f64,
    assigner: AssignerKind,
}

/// Samples per gradient tape. Fixed (not derived from the worker count) so
/// the f64 accumulation boundaries, and therefore the results, are identical
/// for any thread configuration.
const GRAD_CHUNK: usize = 4;

/// Minimum box-loss weight for a positive anchor (see detection_loss).
const BOX_Q_FLOOR: f64 = 0.05;

const VFL_ALPHA: f64 = 0.75;
const VFL_GAMMA: f64 = 2.0;
const TAL_ALPHA: f64 = 1.0;
const TAL_BETA: f64 = 6.0;
const TAL_TOPK: usize = 13;
const ATSS_TOPK: usize = 9;
const SIMOTA_LAMBDA: f64 = 3.0;

/// Detection loss over a batch of head maps, with analytic gradients with
/// respect to every map element. Images are processed independently (one
/// assignment and normalization per image) and their losses summed.
#[allow(clippy::too_many_arguments)]
fn detection_loss(
    cls_maps: &[&Tensor],
    box_maps: &[&Tensor],
    strides: &[usize],
    reg_max: usize,
    gts_per_image: &[&[GroundTruth]],
    settings: &LossSettings,
    distill: Option<(&HeadOutputs, f64)>,
) -> Result<SampleGrads> {
    let n_images = cls_maps[0].shape().n;
    if gts_per_image.len() != n_images {
        return Err(arg_err("detection_loss", "one ground-truth list per image"));
    }
    let nc = cls_maps[0].shape().c;
    let grid_hw: Vec<(usize, usize)> = cls_maps.iter().map(|m| (m.shape().h, m.shape().w)).collect();
    let anchors = anchor_points(&grid_hw, strides);
    let n_anchors = anchors.len();
    let bins = reg_max + 1;

    // gradient buffers per map (batch-shaped)
    let mut cls_grads: Vec<Vec<f32>> = cls_maps.iter().map(|m| vec![0.0f32; m.numel()]).collect();
    let mut box_grads: Vec<Vec<f32>> = box_maps.iter().map(|m| vec![0.0f32; m.numel()]).collect();

    let mut cls_loss = 0.0f64;
    let mut box_loss = 0.0f64;
    let mut dfl_loss = 0.0f64;

    let mut cls_probs = vec![0.0f32; n_anchors * nc];
    let mut distances = vec![[0.0f32; 4]; n_anchors]; // bin units (or raw)
    let mut softmaxes: Vec<Vec<f64>> = if reg_max > 0 {
        vec![Vec::new(); n_anchors * 4]
    } else {
        Vec::new()
    };

    for img in 0..n_images {
        let gts = gts_per_image[img];
        // flatten this image's predictions per anchor
        let mut offset = 0usize;
        for (si, (cm, bm)) in cls_maps.iter().zip(box_maps.iter()).enumerate() {
            let (h, w) = grid_hw[si];
            let hw = h * w;
            let cbase = img * nc * hw;
            let bbase = img * bm.shape().c * hw;
            for cell in 0..hw {
                let a = offset + cell;
                for c in 0..nc {
                    cls_probs[a * nc + c] = sigmoid(cm.data()[cbase + c * hw + cell]);
                }
                if reg_max == 0 {
                    for side in 0..4 {
                        distances[a][side] = bm.data()[bbase + side * hw + cell];
                    }
                } else {
                    for side in 0..4 {
                        let mut logits = Vec::with_capacity(bins);
                        for k in 0..bins {
                            logits.push(bm.data()[bbase + (side * bins + k) * hw + cell]);
                        }
                        let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                        let exps: Vec<f64> =
                            logits.iter().map(|&z| ((z as f64) - m).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        let soft: Vec<f64> = exps.iter().map(|e| e / denom).collect();
                        let e: f64 = soft.iter().enumerate().map(|(k, s)| k as f64 * s).sum();
                        distances[a][side] = e as f32;
                        softmaxes[a * 4 + side] = soft;
                    }
                }
            }
            offset += hw;
        }
        let pred_boxes: Vec<[f32; 4]> = anchors
            .iter()
            .zip(distances.iter())
            .map(|(a, d)| {
                let s = a.stride as f32;
                [
                    a.x - d[0] * s,
                    a.y - d[1] * s,
                    a.x + d[2] * s,
                    a.y + d[3] * s,
                ]
            })
            .collect();

        let assignment: Assignment = if gts.is_empty() {
            Assignment {
                per_anchor: vec![None; n_anchors],
            }
        } else {
            match settings.assigner {
                AssignerKind::Atss => atss_assign(&anchors, gts, ATSS_TOPK)?,
                AssignerKind::SimOta => {
                    simota_assign(&anchors, gts, &cls_probs, &pred_boxes, SIMOTA_LAMBDA)?
                }
                AssignerKind::Tal => tal_assign(
                    &anchors,
                    gts,
                    &cls_probs,
                    &pred_boxes,
                    TAL_ALPHA,
                    TAL_BETA,
                    TAL_TOPK,
                )?,
            }
        };
        let q_sum: f64 = assignment
            .per_anchor
            .iter()
            .flatten()
            .map(|t| t.q as f64)
            .sum();
        let norm = q_sum.max(1.0);
        // box-term weights get a floor: a positive whose predicted box has
        // collapsed (q = 0) must still receive a regression gradient, or the
        // assignment can never recover
        let box_q_sum: f64 = assignment
            .per_anchor
            .iter()
            .flatten()
            .map(|t| (t.q as f64).max(BOX_Q_FLOOR))
            .sum();
        let box_norm = box_q_sum.max(1.0);

        let mut offset = 0usize;
        for (si, bm) in box_maps.iter().enumerate() {
            let (h, w) = grid_hw[si];
            let hw = h * w;
            let stride = strides[si] as f64;
            let cbase = img * nc * hw;
            let bbase = img * bm.shape().c * hw;
            for cell in 0..hw {
                let a = offset + cell;
                let target = &assignment.per_anchor[a];
                for c in 0..nc {
                    let p = cls_probs[a * nc + c] as f64;
                    let q = match target {
                        Some(t) if t.class_id == c => t.q as f64,
                        _ => 0.0,
                    };
                    let (loss, dldp) = vfl_grad(p, q, VFL_ALPHA, VFL_GAMMA);
                    cls_loss += loss / norm;
                    let dldz = dldp * p * (1.0 - p);
                    cls_grads[si][cbase + c * hw + cell] +=
                        (settings.cls_weight * dldz / norm) as f32;
                }

                if let Some(t) = target {
                    let wq = (t.q as f64).max(BOX_Q_FLOOR) / box_norm;
                    let pair = BoxPair {
                        pred: pred_boxes[a].map(|v| v as f64),
                        gt: t.gt_box.map(|v| v as f64),
                    };
                    let (bl, dpred) = iou_family_grad(&pair, settings.iou_kind)?;
                    box_loss += bl * wq;
                    // chain into per-side distances: x1 = ax - d0*s,
                    // y1 = ay - d1*s, x2 = ax + d2*s, y2 = ay + d3*s
                    let dl_dd = [
                        -dpred[0] * stride,
                        -dpred[1] * stride,
                        dpred[2] * stride,
                        dpred[3] * stride,
                    ];
                    if reg_max == 0 {
                        for side in 0..4 {
                            box_grads[si][bbase + side * hw + cell] +=
                                (settings.box_weight * dl_dd[side] * wq) as f32;
                        }
                    } else {
                        let ax = anchors[a].x as f64;
                        let ay = anchors[a].y as f64;
                        let tgt = [
                            (ax - t.gt_box[0] as f64) / stride,
                            (ay - t.gt_box[1] as f64) / stride,
                            (t.gt_box[2] as f64 - ax) / stride,
                            (t.gt_box[3] as f64 - ay) / stride,
                        ];
                        for side in 0..4 {
                            let soft = &softmaxes[a * 4 + side];
                            let e = distances[a][side] as f64;
                            // IoU term through the softmax expectation
                            for k in 0..bins {
                                let de_dz = soft[k] * (k as f64 - e);
                                box_grads[si][bbase + (side * bins + k) * hw + cell] +=
                                    (settings.box_weight * dl_dd[side] * de_dz * wq) as f32;
                            }
                            // distribution focal term on the same logits
                            let y = tgt[side].clamp(0.0, (reg_max as f64) - 0.01);
                            let mut logits = Vec::with_capacity(bins);
                            for k in 0..bins {
                                logits.push(bm.data()[bbase + (side * bins + k) * hw + cell]);
                            }
                            let (dl, dgrad) = dfl_grad(y, &logits)?;
                            dfl_loss += dl * wq;
                            for k in 0..bins {
                                box_grads[si][bbase + (side * bins + k) * hw + cell] +=
                                    (settings.dfl_weight * dgrad[k] * wq) as f32;
                            }
                        }
                    }
                }
            }
            offset += hw;
        }
    }

    let mut total = settings.cls_weight * cls_loss
        + settings.box_weight * box_loss
        + settings.dfl_weight * dfl_loss;

    // optional soft-label distillation (scaled to a per-image sum so chunk
    // sizes cannot change the result)
    let mut distill_value = 0.0f64;
    if let Some((teacher, t_epoch)) = distill {
        let student = HeadOutputs {
            cls: cls_maps.iter().map(|m| (*m).clone()).collect(),
            boxes: box_maps.iter().map(|m| (*m).clone()).collect(),
            strides: strides.to_vec(),
            reg_max,
        };
        let d = distill_loss(&student, teacher, t_epoch)?;
        let scale = n_images as f64;
        distill_value = d.value * scale;
        total += distill_value;
        for (g, add) in cls_grads.iter_mut().zip(d.d_cls.iter()) {
            for (gv, &av) in g.iter_mut().zip(add.data().iter()) {
                *gv += av * scale as f32;
            }
        }
        for (g, add) in box_grads.iter_mut().zip(d.d_box.iter()) {
            for (gv, &av) in g.iter_mut().zip(add.data().iter()) {
                *gv += av * scale as f32;
            }
        }
    }

    let mut grads = Vec::with_capacity(cls_grads.len() + box_grads.len());
    for (m, g) in cls_maps.iter().zip(cls_grads) {
        grads.push(Tensor::new(m.shape(), g)?);
    }
    for (m, g) in box_maps.iter().zip(box_grads) {
        grads.push(Tensor::new(m.shape(), g)?);
    }
    Ok(SampleGrads {
        grads,
        total,
        parts: LossBreakdown {
            cls: settings.cls_weight * cls_loss,
            box_: settings.box_weight * box_loss,
            dfl: settings.dfl_weight * dfl_loss,
            distill: distill_value,
        },
    })
}

/// Stack per-image (1, c, h, w) tensors into one (n, c, h, w) batch.
fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let s = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * s.numel());
    for img in images {
        if img.shape() != s {
            return Err(crate::error::shape_err("stack_images", s, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(Shape::new(images.len() * s.n, s.c, s.h, s.w), data)
}

/// One taped training step over a chunk of samples: batched forward, summed
/// per-image losses, one backward.
fn chunk_step(
    model: &Model,
    samples: &[SynthSample],
    settings: &LossSettings,
    teacher: Option<(&Model, f64)>,
) -> Result<(Vec<Tensor>, f64, LossBreakdown)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let batch = stack_images(&images)?;
    let teacher_out = match teacher {
        Some((t, t_epoch)) => Some((t.forward(&batch)?, t_epoch)),
        None => None,
    };
    let mut tape = Tape::new();
    let (head, params) = model.forward_taped(&mut tape, &batch)?;
    let cls_vals: Vec<&Tensor> = head
        .cls
        .iter()
        .map(|&v| tape.value(v))
        .collect::<Result<_>>()?;
    let box_vals: Vec<&Tensor> = head
        .boxes
        .iter()
        .map(|&v| tape.value(v))
        .collect::<Result<_>>()?;
    let gts: Vec<&[GroundTruth]> = samples.iter().map(|s| s.gts.as_slice()).collect();
    let out = detection_loss(
        &cls_vals,
        &box_vals,
        &head.strides,
        head.reg_max,
        &gts,
        settings,
        teacher_out.as_ref().map(|(h, t)| (h, *t)),
    )?;
    let mut inputs: Vec<Var> = head.cls.clone();
    inputs.extend(head.boxes.iter().copied());
    let loss_var = tape.external(&inputs, out.total as f32, out.grads)?;
    let grads = tape.backward(loss_var, &params)?;
    Ok((grads, out.total, out.parts))
}

/// Deterministic chunked parallel map: results are ordered by index and do
/// not depend on the worker count.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = items.len();
    if threads <= 1 || n <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let mut handles = Vec::new();
        for (ci, part) in items.chunks(chunk).enumerate() {
            handles.push(scope.spawn(move || {
                part.iter()
                    .enumerate()
                    .map(|(j, t)| (ci * chunk + j, f(ci * chunk + j, t)))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("all slots filled")).collect()
}

/// Evaluate any forward function on labeled samples: preprocess, forward,
/// decode, NMS, map boxes back, and score COCO-style AP.
pub fn evaluate_forward(
    forward: &(dyn Fn(&Tensor) -> Result<HeadOutputs> + Sync),
    data: &[SynthSample],
    mode: PreprocessMode,
    target: usize,
    conf_thresh: f32,
    nms_iou: f32,
    threads: usize,
) -> Result<ApResult> {
    let per_image: Vec<Result<Vec<Detection>>> = parallel_map(data, threads, |_, sample| {
        let (pre, tf) = gray_border_preprocess(sample, 32, mode, target)?;
        let h = forward(&pre.image)?;
        let dets = decode(&h, conf_thresh)?;
        let kept = nms(&dets, nms_iou)?;
        Ok(kept
            .into_iter()
            .map(|d| {
                let b = tf.invert_box([d.x1, d.y1, d.x2, d.y2]);
                Detection {
                    x1: b[0],
                    y1: b[1],
                    x2: b[2],
                    y2: b[3],
                    ..d
                }
            })
            .collect())
    });
    let mut dets = Vec::with_capacity(data.len());
    for r in per_image {
        dets.push(r?);
    }
    let gts: Vec<Vec<GroundTruth>> = data.iter().map(|s| s.gts.clone()).collect();
    Ok(evaluate_ap(&dets, &gts, &coco_thresholds()))
}

/// [`evaluate_forward`] over a plain model.
pub fn evaluate_model(
    model: &Model,
    data: &[SynthSample],
    mode: PreprocessMode,
    target: usize,
    conf_thresh: f32,
    nms_iou: f32,
    threads: usize,
) -> Result<ApResult> {
    evaluate_forward(
        &|x| model.forward(x),
        data,
        mode,
        target,
        conf_thresh,
        nms_iou,
        threads,
    )
}

/// Clone a model with its trainable tensors replaced by the EMA shadows.
fn model_with_params(model: &Model, params: &[Tensor]) -> Model {
    let mut m = model.clone();
    let mut i = 0;
    m.for_each_trainable(&mut |t| {
        *t = params[i].clone();
        i += 1;
    });
    m
}

fn collect_param_sizes(model: &mut Model) -> Vec<usize> {
    let mut sizes = Vec::new();
    model.for_each_trainable(&mut |t| sizes.push(t.numel()));
    sizes
}

/// Full training loop. Deterministic for a fixed seed: two runs produce
/// bit-identical weights and (wall-clock column aside) identical logs.
pub fn train(model: Model, cfg: &TrainConfig, data: &[SynthSample]) -> Result<TrainResult> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(arg_err("train", "dataset too small to split"));
    }
    let mut model = model;
    let mut rng = Rng::new(cfg.seed);
    let threads = cfg.thread_count();

    // split
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut idx);
    let val_len = ((data.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val_idx, train_idx) = idx.split_at(val_len);
    let val: Vec<SynthSample> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let train_pool: Vec<usize> = train_idx.to_vec();

    let iou_kind = cfg
        .iou_kind
        .unwrap_or_else(|| default_iou_kind(model.config.variant));
    let settings_for = move |epoch: usize| LossSettings {
        iou_kind,
        cls_weight: cfg.cls_weight,
        box_weight: cfg.box_weight,
        dfl_weight: cfg.dfl_weight,
        assigner: if epoch < cfg.atss_warmup_epochs {
            AssignerKind::Atss
        } else {
            cfg.assigner
        },
    };

    let sizes = collect_param_sizes(&mut model);
    let mut sgd = SgdState::new(&sizes, cfg.momentum, cfg.weight_decay);
    let mut ema: Vec<Tensor> = {
        let mut v = Vec::with_capacity(sizes.len());
        model.for_each_trainable(&mut |t| v.push(t.clone()));
        v
    };

    let steps_per_epoch = train_pool.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch as f64).round() as usize;

    let hw = {
        let s = data[0].image.shape();
        (s.h, s.w)
    };
    let teacher = cfg.distill_teacher.as_ref();

    let mut log: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut step_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut order = train_pool.clone();
        rng.shuffle(&mut order);
        let settings = settings_for(epoch);
        let t_epoch = epoch as f64 / (cfg.epochs.max(2) - 1) as f64;

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // cls, box, dfl, distill
        let mut n_samples = 0usize;
        let mut lr = 0.0f64;
        let mosaic_on = (epoch as f64) < cfg.mosaic_until * cfg.epochs as f64;

        for batch in order.chunks(cfg.batch_size) {
            // assemble the batch in the main thread so RNG use is ordered
            let mut samples: Vec<SynthSample> = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut s = if mosaic_on && rng.uniform() < cfg.mosaic_prob {
                    let picks = [
                        i,
                        train_pool[rng.below(train_pool.len())],
                        train_pool[rng.below(train_pool.len())],
                        train_pool[rng.below(train_pool.len())],
                    ];
                    mosaic(
                        &[
                            data[picks[0]].clone(),
                            data[picks[1]].clone(),
                            data[picks[2]].clone(),
                            data[picks[3]].clone(),
                        ],
                        hw,
                        &mut rng,
                    )
                } else {
                    data[i].clone()
                };
                if cfg.mixup_prob > 0.0 && rng.uniform() < cfg.mixup_prob {
                    let other = &data[train_pool[rng.below(train_pool.len())]];
                    if other.image.shape() == s.image.shape() {
                        s = mixup(&s, other, 32.0, &mut rng)?;
                    }
                }
                samples.push(s);
            }

            // one tape per fixed-size chunk; chunk boundaries depend only on
            // the batch order, so results do not depend on the thread count
            let chunks: Vec<&[SynthSample]> = samples.chunks(GRAD_CHUNK).collect();
            let results: Vec<Result<(Vec<Tensor>, f64, LossBreakdown)>> =
                parallel_map(&chunks, threads, |_, chunk| {
                    chunk_step(&model, chunk, &settings, teacher.map(|t| (t, t_epoch)))
                });

            // reduce gradients in chunk order
            let mut batch_grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (grads, total, parts) = r?;
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: step_counter,
                    });
                }
                sums.0 += parts.cls;
                sums.1 += parts.box_;
                sums.2 += parts.dfl;
                sums.3 += parts.distill;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads.iter()) {
                            let ad = a.data_mut();
                            for (av, &gv) in ad.iter_mut().zip(g.data().iter()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            n_samples += samples.len();
            let mut grads = batch_grads.expect("non-empty batch");
            let inv = 1.0 / samples.len() as f32;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }

            lr = cosine_lr(step_counter, total_steps, cfg.lr0, cfg.lrf, warmup_steps);
            if lr > 0.0 {
                sgd.step_with(&grads, lr, |each| model.for_each_trainable(each))?;
            }
            optim::ema_update_with(&mut ema, cfg.ema_decay, step_counter, |each| {
                model.for_each_trainable(each)
            });
            step_counter += 1;
        }

        // per-epoch AP on the held-out split, always through the EMA weights
        let ema_model = model_with_params(&model, &ema);
        let ap = evaluate_model(
            &ema_model,
            &val,
            cfg.eval_mode,
            cfg.eval_target,
            cfg.conf_thresh,
            cfg.nms_iou,
            threads,
        )?;

        let denom = n_samples.max(1) as f64;
        log.push(EpochStats {
            epoch,
            lr,
            cls_loss: sums.0 / denom,
            box_loss: sums.1 / denom,
            dfl_loss: sums.2 / denom,
            distill_loss: sums.3 / denom,
            ap: ap.ap,
            ap50: ap.ap50,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    let ema_model = model_with_params(&model, &ema);
    Ok(TrainResult {
        model,
        ema_model,
        log,
    })
}

/// A few epochs of quantization-aware fine-tuning through straight-through
/// gradients on a prepared [`QuantSim`]. Scales stay frozen; only the fused
/// weights move.
pub fn qat_finetune(
    qs: &mut QuantSim,
    data: &[SynthSample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    if !qs.is_qat_prepared() {
        return Err(arg_err("qat_finetune", "call qat_prepare first"));
    }
    let mut rng = Rng::new(seed);
    let settings = LossSettings {
        iou_kind: default_iou_kind(qs.model.config.variant),
        cls_weight: 1.0,
        box_weight: 2.5,
        dfl_weight: 0.5,
        assigner: AssignerKind::Tal,
    };
    let sizes = collect_param_sizes(&mut qs.model);
    let mut sgd = SgdState::new(&sizes, 0.9, 0.0);
    let batch = 4usize;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut count = 0usize;
            for &i in chunk {
                let sample = &data[i];
                let mut tape = Tape::new();
                let (head, params) = qs.forward_taped(&mut tape, &sample.image)?;
                let cls_vals: Vec<&Tensor> = head
                    .cls
                    .iter()
                    .map(|&v| tape.value(v))
                    .collect::<Result<_>>()?;
                let box_vals: Vec<&Tensor> = head
                    .boxes
                    .iter()
                    .map(|&v| tape.value(v))
                    .collect::<Result<_>>()?;
                let out = detection_loss(
                    &cls_vals,
                    &box_vals,
                    &head.strides,
                    head.reg_max,
                    &[sample.gts.as_slice()],
                    &settings,
                    None,
                )?;
                let mut inputs: Vec<Var> = head.cls.clone();
                inputs.extend(head.boxes.iter().copied());
                let loss_var = tape.external(&inputs, out.total as f32, out.grads)?;
                let grads = tape.backward(loss_var, &params)?;
                count += 1;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (av, g) in a.iter_mut().zip(grads.iter()) {
                            for (x, &y) in av.data_mut().iter_mut().zip(g.data().iter()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            if let Some(mut grads) = acc {
                let inv = 1.0 / count as f32;
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                sgd.step_with(&grads, lr, |each| qs.model.for_each_trainable(each))?;
            }
        }
    }
    Ok(())
}
