//! Reverse-mode gradient tape.
//!
//! Forward ops record onto a [`Tape`]; [`Tape::backward`] walks the recorded
//! nodes in reverse creation order with a fixed accumulation order, so
//! gradients are deterministic given an identical forward pass.

use super::ops::{
    self, activation, add, batchnorm_infer, concat_channels, conv2d, fake_quantize_slice,
    upsample_nearest2x, Activation,
};
use super::{BnParams, ConvParams, Shape, Tensor};
use crate::error::{arg_err, Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BnInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Upsample {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f32,
    },
    MulElem {
        a: Var,
        b: Var,
    },
    /// Broadcast multiply by a scalar-shaped tensor (residual scales).
    MulScalarT {
        x: Var,
        s: Var,
    },
    SumAll {
        x: Var,
    },
    FakeQuant {
        x: Var,
        scales: Vec<f32>,
        per_channel: bool,
    },
    /// Loss bridge: forward value and analytic input gradients are supplied
    /// by the caller (the loss layer differentiates itself).
    External {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape { op: "tape" });
        }
        self.nodes.get(v.idx).ok_or(Error::NotOnTape { op: "tape" })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    /// Current value of a recorded node.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    /// Record an input or parameter. Gradient participation follows the
    /// tensor's requires_grad flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let params = self.conv_params(w, bias, stride, padding)?;
        let out = conv2d(&self.node(x)?.value, &params)?;
        let needs = self.needs(x) || self.needs(w) || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            out,
            needs,
        ))
    }

    fn conv_params(
        &self,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<ConvParams> {
        let weight = self.node(w)?.value.clone();
        let bias = match bias {
            Some(b) => Some(self.node(b)?.value.clone()),
            None => None,
        };
        ConvParams::new(weight, bias, stride, padding)
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let params = BnParams {
            gamma: self.node(gamma)?.value.clone(),
            beta: self.node(beta)?.value.clone(),
            running_mean: mean.to_vec(),
            running_var: var.to_vec(),
            eps,
        };
        let out = batchnorm_infer(&self.node(x)?.value, &params)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
            },
            out,
            needs,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = activation(&self.node(x)?.value, kind)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Act { x, kind }, out, needs))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let out = upsample_nearest2x(&self.node(x)?.value)?;
        let needs = self.needs(x);
        Ok(self.push(Op::Upsample { x }, out, needs))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = xs
            .iter()
            .map(|&v| self.node(v).map(|n| &n.value))
            .collect::<Result<_>>()?;
        let out = concat_channels(&tensors)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add(&self.node(a)?.value, &self.node(b)?.value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| k * v).collect())?;
        let needs = self.needs(x);
        Ok(self.push(Op::Scale { x, k }, out, needs))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        if av.shape() != bv.shape() {
            return Err(crate::error::shape_err("mul_elem", av.shape(), bv.shape()));
        }
        let out = Tensor::new(
            av.shape(),
            av.data()
                .iter()
                .zip(bv.data().iter())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MulElem { a, b }, out, needs))
    }

    /// x scaled by a (1,1,1,1) tensor, with gradient into both.
    pub fn mul_scalar_t(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.node(s)?.value;
        if sv.numel() != 1 {
            return Err(arg_err("mul_scalar_t", "scale must be a scalar tensor"));
        }
        let k = sv.data()[0];
        let xv = &self.node(x)?.value;
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| k * v).collect())?;
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Op::MulScalarT { x, s }, out, needs))
    }

    /// Scalar-valued sum of all elements, shape (1,1,1,1).
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        Ok(self.push(Op::SumAll { x }, Tensor::scalar(s as f32), needs))
    }

    /// Fake quantization with straight-through gradient. `scales` has one
    /// entry (per-tensor) or one per leading-dim channel (per-channel).
    pub fn fake_quant(&mut self, x: Var, scales: Vec<f32>, per_channel: bool) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = fake_quant_tensor(xv, &scales, per_channel)?;
        let needs = self.needs(x);
        Ok(self.push(
            Op::FakeQuant {
                x,
                scales,
                per_channel,
            },
            out,
            needs,
        ))
    }

    /// Record an externally differentiated scalar (the loss layers supply
    /// analytic gradients with respect to each listed input).
    pub fn external(&mut self, inputs: &[Var], value: f32, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(arg_err("external", "one gradient per input required"));
        }
        for (&v, g) in inputs.iter().zip(grads.iter()) {
            let shape = self.node(v)?.value.shape();
            if g.shape() != shape {
                return Err(crate::error::shape_err("external", shape, g.shape()));
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Op::External {
                inputs: inputs.to_vec(),
                grads,
            },
            Tensor::scalar(value),
            needs,
        ))
    }

    /// Reverse-mode gradients of a scalar with respect to `params`.
    /// Every param must be a grad-participating leaf of this tape.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let loss_node = self.node(loss)?;
        if loss_node.value.numel() != 1 {
            return Err(arg_err(
                "backward",
                format!("loss must be scalar, got {}", loss_node.value.shape()),
            ));
        }
        for &p in params {
            let n = self.node(p)?;
            if !matches!(n.op, Op::Leaf) {
                return Err(arg_err("backward", "param is not a leaf"));
            }
            if !n.needs_grad {
                return Err(arg_err("backward", "param does not require grad"));
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    let params = self.conv_params(*w, *bias, *stride, *padding)?;
                    let (dx, dw, db) = ops::conv2d_backward(
                        &self.nodes[x.idx].value,
                        &params,
                        &g,
                        self.needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x.idx, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, w.idx, dw);
                    }
                    if let (Some(b), Some(db)) = (bias, db) {
                        if self.needs(*b) {
                            accumulate(&mut grads, b.idx, db);
                        }
                    }
                }
                Op::BnInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let params = BnParams {
                        gamma: self.nodes[gamma.idx].value.clone(),
                        beta: self.nodes[beta.idx].value.clone(),
                        running_mean: mean.clone(),
                        running_var: var.clone(),
                        eps: *eps,
                    };
                    let (dx, dgamma, dbeta) =
                        ops::batchnorm_backward(&self.nodes[x.idx].value, &params, &g)?;
                    if self.needs(*x) {
                        accumulate(&mut grads, x.idx, dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, gamma.idx, dgamma);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, beta.idx, dbeta);
                    }
                }
                Op::Act { x, kind } => {
                    let dx = ops::activation_backward(&self.nodes[x.idx].value, *kind, &g);
                    accumulate(&mut grads, x.idx, dx);
                }
                Op::Upsample { x } => {
                    let dx = ops::upsample_backward(self.nodes[x.idx].value.shape(), &g);
                    accumulate(&mut grads, x.idx, dx);
                }
                Op::Concat { xs } => {
                    let shapes: Vec<Shape> =
                        xs.iter().map(|v| self.nodes[v.idx].value.shape()).collect();
                    let parts = ops::concat_backward(&shapes, &g);
                    for (v, part) in xs.iter().zip(parts) {
                        if self.needs(*v) {
                            accumulate(&mut grads, v.idx, part);
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.idx, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.idx, g.clone());
                    }
                }
                Op::Scale { x, k } => {
                    let dx = Tensor::new(g.shape(), g.data().iter().map(|&v| v * k).collect())?;
                    accumulate(&mut grads, x.idx, dx);
                }
                Op::MulElem { a, b } => {
                    if self.needs(*a) {
                        let bv = &self.nodes[b.idx].value;
                        let da = Tensor::new(
                            g.shape(),
                            g.data()
                                .iter()
                                .zip(bv.data().iter())
                                .map(|(&gi, &bi)| gi * bi)
                                .collect(),
                        )?;
                        accumulate(&mut grads, a.idx, da);
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[a.idx].value;
                        let db = Tensor::new(
                            g.shape(),
                            g.data()
                                .iter()
                                .zip(av.data().iter())
                                .map(|(&gi, &ai)| gi * ai)
                                .collect(),
                        )?;
                        accumulate(&mut grads, b.idx, db);
                    }
                }
                Op::MulScalarT { x, s } => {
                    let k = self.nodes[s.idx].value.data()[0];
                    if self.needs(*x) {
                        let dx =
                            Tensor::new(g.shape(), g.data().iter().map(|&v| v * k).collect())?;
                        accumulate(&mut grads, x.idx, dx);
                    }
                    if self.needs(*s) {
                        let xv = &self.nodes[x.idx].value;
                        let ds: f64 = g
                            .data()
                            .iter()
                            .zip(xv.data().iter())
                            .map(|(&gi, &xi)| gi as f64 * xi as f64)
                            .sum();
                        accumulate(&mut grads, s.idx, Tensor::scalar(ds as f32));
                    }
                }
                Op::SumAll { x } => {
                    let gv = g.data()[0];
                    let xs = self.nodes[x.idx].value.shape();
                    accumulate(&mut grads, x.idx, Tensor::full(xs, gv));
                }
                Op::FakeQuant {
                    x,
                    scales,
                    per_channel,
                } => {
                    let xv = &self.nodes[x.idx].value;
                    let dx = fake_quant_backward(xv, scales, *per_channel, &g);
                    accumulate(&mut grads, x.idx, dx);
                }
                Op::External { inputs, grads: igs } => {
                    let gv = g.data()[0];
                    for (v, ig) in inputs.iter().zip(igs.iter()) {
                        if self.needs(*v) {
                            let scaled = Tensor::new(
                                ig.shape(),
                                ig.data().iter().map(|&x| x * gv).collect(),
                            )?;
                            accumulate(&mut grads, v.idx, scaled);
                        }
                    }
                }
            }
        }

        params
            .iter()
            .map(|&p| {
                Ok(grads[p.idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.idx].value.shape())))
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            let data = existing.data_mut();
            for (d, &src) in data.iter_mut().zip(g.data().iter()) {
                *d += src;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Apply fake quantization over a whole tensor (per-tensor scale, or one
/// scale per leading-dimension channel).
pub(crate) fn fake_quant_tensor(x: &Tensor, scales: &[f32], per_channel: bool) -> Result<Tensor> {
    let s = x.shape();
    let mut out = vec![0.0f32; x.numel()];
    if per_channel {
        if scales.len() != s.n {
            return Err(arg_err(
                "fake_quant",
                format!("need {} channel scales, got {}", s.n, scales.len()),
            ));
        }
        let chunk = s.c * s.h * s.w;
        for (i, (o, xs)) in out.chunks_mut(chunk).zip(x.data().chunks(chunk)).enumerate() {
            fake_quantize_slice(xs, scales[i], o);
        }
    } else {
        if scales.len() != 1 {
            return Err(arg_err("fake_quant", "per-tensor mode takes one scale"));
        }
        fake_quantize_slice(x.data(), scales[0], &mut out);
    }
    Tensor::new(s, out)
}

fn fake_quant_backward(x: &Tensor, scales: &[f32], per_channel: bool, dout: &Tensor) -> Tensor {
    let s = x.shape();
    let mut dx = vec![0.0f32; x.numel()];
    if per_channel {
        let chunk = s.c * s.h * s.w;
        for (i, ((d, xs), gs)) in dx
            .chunks_mut(chunk)
            .zip(x.data().chunks(chunk))
            .zip(dout.data().chunks(chunk))
            .enumerate()
        {
            for j in 0..d.len() {
                d[j] = gs[j] * ops::fake_quantize_ste_mask(xs[j], scales[i]);
            }
        }
    } else {
        for j in 0..dx.len() {
            dx[j] = dout.data()[j] * ops::fake_quantize_ste_mask(x.data()[j], scales[0]);
        }
    }
    Tensor::new(s, dx).expect("same shape")
}
