//! SGD with momentum, cosine learning-rate decay, and EMA weights.

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

/// Momentum buffers for one parameter set.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(param_shapes: &[usize], momentum: f64, weight_decay: f64) -> SgdState {
        SgdState {
            momentum,
            weight_decay,
            velocity: param_shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v.
    /// Gradients are scanned for NaN when checked mode is on.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(arg_err("sgd_step", "parameter/gradient arity mismatch"));
        }
        if lr <= 0.0 {
            return Err(arg_err("sgd_step", "lr must be positive"));
        }
        let checked = crate::tensor::checked_enabled();
        for ((w, g), v) in params.iter_mut().zip(grads.iter()).zip(self.velocity.iter_mut()) {
            if checked && !g.data().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
            let wd = self.weight_decay as f32;
            let m = self.momentum as f32;
            let lr = lr as f32;
            let wdat = w.data_mut();
            for i in 0..wdat.len() {
                v[i] = m * v[i] + g.data()[i] + wd * wdat[i];
                wdat[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

impl SgdState {
    /// Visitor form of [`SgdState::step`]: `for_each` must call its
    /// callback once per parameter in the same order as the gradients.
    pub fn step_with(
        &mut self,
        grads: &[Tensor],
        lr: f64,
        for_each: impl FnOnce(&mut dyn FnMut(&mut Tensor)),
    ) -> Result<()> {
        if lr <= 0.0 {
            return Err(arg_err("sgd_step", "lr must be positive"));
        }
        if crate::tensor::checked_enabled() {
            for g in grads {
                if !g.data().iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { op: "sgd_step" });
                }
            }
        }
        let m = self.momentum as f32;
        let wd = self.weight_decay as f32;
        let lr = lr as f32;
        let mut i = 0usize;
        let velocity = &mut self.velocity;
        for_each(&mut |w: &mut Tensor| {
            let g = &grads[i];
            let v = &mut velocity[i];
            let wdat = w.data_mut();
            for k in 0..wdat.len() {
                v[k] = m * v[k] + g.data()[k] + wd * wdat[k];
                wdat[k] -= lr * v[k];
            }
            i += 1;
        });
        if i != grads.len() {
            return Err(arg_err("sgd_step", "parameter/gradient arity mismatch"));
        }
        Ok(())
    }
}

/// Visitor form of [`ema_update`], reading parameters through the model's
/// trainable walk.
pub fn ema_update_with(
    ema: &mut [Tensor],
    decay: f64,
    step: usize,
    for_each: impl FnOnce(&mut dyn FnMut(&mut Tensor)),
) {
    let d = decay * (1.0 - (-(step as f64) / 2000.0).exp());
    let mut i = 0usize;
    for_each(&mut |p: &mut Tensor| {
        let edat = ema[i].data_mut();
        for (ev, &pv) in edat.iter_mut().zip(p.data().iter()) {
            *ev = (d * *ev as f64 + (1.0 - d) * pv as f64) as f32;
        }
        i += 1;
    });
    assert_eq!(i, ema.len(), "ema shadow arity");
}

/// Cosine decay from lr0 to lrf over T steps, with an optional linear
/// warmup from zero over the first `warmup` steps.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lrf: f64, warmup: usize) -> f64 {
    if warmup > 0 && t < warmup {
        return lr0 * (t + 1) as f64 / warmup as f64;
    }
    let total = total.max(warmup + 1);
    let u = (t - warmup) as f64 / (total - warmup) as f64;
    lrf + 0.5 * (lr0 - lrf) * (1.0 + (std::f64::consts::PI * u.min(1.0)).cos())
}

/// EMA with warmup-ramped effective decay d = decay * (1 - exp(-step/2000)).
/// At step 0 the shadow copies the raw parameters (bootstrap).
pub fn ema_update(ema: &mut [Tensor], params: &[&Tensor], decay: f64, step: usize) {
    let d = decay * (1.0 - (-(step as f64) / 2000.0).exp());
    for (e, p) in ema.iter_mut().zip(params.iter()) {
        let edat = e.data_mut();
        for (ev, &pv) in edat.iter_mut().zip(p.data().iter()) {
            *ev = (d * *ev as f64 + (1.0 - d) * pv as f64) as f32;
        }
    }
}
