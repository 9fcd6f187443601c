//! Re-parameterizable blocks and their structural fusion.
//!
//! Training-time units carry three parallel branches (3x3 conv + BN,
//! 1x1 conv + BN, and an identity BN when shapes permit); [`RepConvUnit::fuse`]
//! collapses them into a single 3x3 convolution with bias whose outputs match
//! the multi-branch form to within floating-point reassociation error.
//! RepBlock stacks units for small models; CSPStackRep wraps stacked
//! bottleneck units in a cross-stage partial structure for larger ones.

use crate::error::{arg_err, Result};
use crate::rng::Rng;
use crate::tensor::{
    activation, add, batchnorm_infer, conv2d, Activation, BnParams, ConvParams, Shape, Tape,
    Tensor, Var,
};


/// Fold inference-mode batch norm into the preceding convolution:
/// w' = w * gamma / sqrt(var + eps), b' = beta + (b - mean) * gamma / sqrt(var + eps).
pub fn fold_bn(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    let ws = conv.weight.shape();
    if bn.channels() != ws.n {
        return Err(arg_err(
            "fold_bn",
            format!("bn has {} channels, conv has {}", bn.channels(), ws.n),
        ));
    }
    let gamma = bn.gamma.data();
    let beta = bn.beta.data();
    let per = ws.c * ws.h * ws.w;
    let mut w = vec![0.0f32; conv.weight.numel()];
    let mut b = vec![0.0f32; ws.n];
    for co in 0..ws.n {
        let denom = bn.running_var[co] as f64 + bn.eps as f64;
        if denom <= 0.0 {
            return Err(arg_err("fold_bn", format!("var + eps <= 0 at channel {co}")));
        }
        let scale = gamma[co] as f64 / denom.sqrt();
        let src = &conv.weight.data()[co * per..][..per];
        let dst = &mut w[co * per..][..per];
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = (s as f64 * scale) as f32;
        }
        let prior = conv.bias.as_ref().map_or(0.0, |t| t.data()[co]) as f64;
        b[co] = (beta[co] as f64 + (prior - bn.running_mean[co] as f64) * scale) as f32;
    }
    let mut folded = ConvParams::new(
        Tensor::new(ws, w)?,
        Some(Tensor::new(Shape::new(1, ws.n, 1, 1), b)?),
        conv.stride,
        conv.padding,
    )?;
    folded.pad_mode = conv.pad_mode;
    Ok(folded)
}

/// Embed a 1x1 kernel at the center of a zero 3x3 kernel. With padding 1 the
/// result convolves identically to the 1x1 kernel with padding 0.
pub fn pad_1x1_to_3x3(kernel: &Tensor) -> Result<Tensor> {
    let s = kernel.shape();
    if s.h != 1 || s.w != 1 {
        return Err(arg_err(
            "pad_1x1_to_3x3",
            format!("kernel spatial size must be 1x1, got {}x{}", s.h, s.w),
        ));
    }
    let os = Shape::new(s.n, s.c, 3, 3);
    let mut out = vec![0.0f32; os.numel()];
    for co in 0..s.n {
        for ci in 0..s.c {
            out[((co * s.c + ci) * 3 + 1) * 3 + 1] = kernel.at(co, ci, 0, 0);
        }
    }
    Tensor::new(os, out)
}

/// (c, c, 3, 3) kernel that is the identity map under stride 1, padding 1.
pub fn identity_to_3x3(c: usize) -> Tensor {
    let s = Shape::new(c, c, 3, 3);
    let mut out = vec![0.0f32; s.numel()];
    for i in 0..c {
        out[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
    }
    Tensor::new(s, out).expect("shape matches data")
}

/// Three-branch re-parameterizable convolution unit.
///
/// Training mode evaluates act(bn(conv3x3(x)) + bn(conv1x1(x)) + bn(x)),
/// the identity branch present only when c_in == c_out and stride == 1.
/// Fused mode evaluates act(conv3x3_fused(x)).
#[derive(Debug, Clone)]
pub struct RepConvUnit {
    pub dense: ConvParams,
    pub dense_bn: BnParams,
    pub one_by_one: ConvParams,
    pub one_bn: BnParams,
    pub identity_bn: Option<BnParams>,
    pub act: Activation,
    pub fused: Option<ConvParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepMode {
    Training,
    Fused,
}

impl RepConvUnit {
    /// Fresh unit with Gaussian fan-in init. The identity branch is attached
    /// whenever `identity` is requested and shapes permit.
    pub fn new(
        c_in: usize,
        c_out: usize,
        stride: usize,
        act: Activation,
        identity: bool,
        rng: &mut Rng,
    ) -> Result<RepConvUnit> {
        let dense_std = (2.0 / (c_in * 9) as f64).sqrt() as f32;
        let one_std = (2.0 / c_in as f64).sqrt() as f32;
        let dense = ConvParams::new(
            Tensor::randn(Shape::new(c_out, c_in, 3, 3), rng, 0.0, dense_std),
            None,
            stride,
            1,
        )?;
        let one_by_one = ConvParams::new(
            Tensor::randn(Shape::new(c_out, c_in, 1, 1), rng, 0.0, one_std),
            None,
            stride,
            0,
        )?;
        let identity_bn = if identity && c_in == c_out && stride == 1 {
            Some(BnParams::identity(c_out))
        } else {
            None
        };
        Ok(RepConvUnit {
            dense,
            dense_bn: BnParams::identity(c_out),
            one_by_one,
            one_bn: BnParams::identity(c_out),
            identity_bn,
            act,
            fused: None,
        })
    }

    pub fn mode(&self) -> RepMode {
        if self.fused.is_some() {
            RepMode::Fused
        } else {
            RepMode::Training
        }
    }

    pub fn c_in(&self) -> usize {
        self.dense.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.dense.c_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(fused) = &self.fused {
            return activation(&conv2d(x, fused)?, self.act);
        }
        let mut acc = batchnorm_infer(&conv2d(x, &self.dense)?, &self.dense_bn)?;
        let one = batchnorm_infer(&conv2d(x, &self.one_by_one)?, &self.one_bn)?;
        acc = add(&acc, &one)?;
        if let Some(id_bn) = &self.identity_bn {
            acc = add(&acc, &batchnorm_infer(x, id_bn)?)?;
        }
        activation(&acc, self.act)
    }

    /// Tape-recorded training forward. Registers trainable leaves in the same
    /// order as [`RepConvUnit::for_each_trainable`].
    pub fn forward_taped(&self, tape: &mut Tape, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        assert!(self.fused.is_none(), "taped forward is for training mode");
        let wd = tape.leaf(self.dense.weight.clone().with_requires_grad());
        let (gd, bd) = leaf_bn(tape, &self.dense_bn);
        let w1 = tape.leaf(self.one_by_one.weight.clone().with_requires_grad());
        let (g1, b1) = leaf_bn(tape, &self.one_bn);
        vars.extend([wd, gd, bd, w1, g1, b1]);

        let dense = tape.conv2d(x, wd, None, self.dense.stride, self.dense.padding)?;
        let dense = tape.batchnorm_infer(
            dense,
            gd,
            bd,
            &self.dense_bn.running_mean,
            &self.dense_bn.running_var,
            self.dense_bn.eps,
        )?;
        let one = tape.conv2d(x, w1, None, self.one_by_one.stride, self.one_by_one.padding)?;
        let one = tape.batchnorm_infer(
            one,
            g1,
            b1,
            &self.one_bn.running_mean,
            &self.one_bn.running_var,
            self.one_bn.eps,
        )?;
        let mut acc = tape.add(dense, one)?;
        if let Some(id_bn) = &self.identity_bn {
            let (gi, bi) = leaf_bn(tape, id_bn);
            vars.extend([gi, bi]);
            let id = tape.batchnorm_infer(
                x,
                gi,
                bi,
                &id_bn.running_mean,
                &id_bn.running_var,
                id_bn.eps,
            )?;
            acc = tape.add(acc, id)?;
        }
        tape.activation(acc, self.act)
    }

    pub fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(fused) = &mut self.fused {
            f(&mut fused.weight);
            f(fused.bias.as_mut().expect("fused conv has bias"));
            return;
        }
        f(&mut self.dense.weight);
        f(&mut self.dense_bn.gamma);
        f(&mut self.dense_bn.beta);
        f(&mut self.one_by_one.weight);
        f(&mut self.one_bn.gamma);
        f(&mut self.one_bn.beta);
        if let Some(id) = &mut self.identity_bn {
            f(&mut id.gamma);
            f(&mut id.beta);
        }
    }

    /// Named tensors for checkpointing: trainables plus BN running statistics.
    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(fused) = &self.fused {
            out.push((format!("{prefix}.fused.w"), fused.weight.clone()));
            out.push((
                format!("{prefix}.fused.b"),
                fused.bias.clone().expect("fused conv has bias"),
            ));
            return;
        }
        collect_conv_bn(prefix, "dense", &self.dense, &self.dense_bn, out);
        collect_conv_bn(prefix, "one", &self.one_by_one, &self.one_bn, out);
        if let Some(id) = &self.identity_bn {
            collect_bn(&format!("{prefix}.id_bn"), id, out);
        }
    }

    pub fn assign_tensors(
        &mut self,
        prefix: &str,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        if self.fused.is_some() {
            let ws = self.dense.weight.shape();
            let w = src(&format!("{prefix}.fused.w"), ws)?;
            let b = src(&format!("{prefix}.fused.b"), Shape::new(1, ws.n, 1, 1))?;
            self.fused = Some(ConvParams::new(w, Some(b), self.dense.stride, 1)?);
            return Ok(());
        }
        assign_conv_bn(prefix, "dense", &mut self.dense, &mut self.dense_bn, src)?;
        assign_conv_bn(prefix, "one", &mut self.one_by_one, &mut self.one_bn, src)?;
        if let Some(id) = &mut self.identity_bn {
            assign_bn(&format!("{prefix}.id_bn"), id, src)?;
        }
        Ok(())
    }

    /// Trainable value count in the unit's current mode.
    pub fn param_count(&self) -> usize {
        match &self.fused {
            Some(f) => f.param_count(),
            None => {
                let mut n = self.dense.weight.numel()
                    + 2 * self.dense_bn.channels()
                    + self.one_by_one.weight.numel()
                    + 2 * self.one_bn.channels();
                if let Some(id) = &self.identity_bn {
                    n += 2 * id.channels();
                }
                n
            }
        }
    }

    /// Collapse the branches into one 3x3 convolution with bias.
    pub fn fuse(&self) -> Result<RepConvUnit> {
        if self.fused.is_some() {
            return Err(arg_err("fuse", "unit is already fused"));
        }
        let folded_dense = fold_bn(&self.dense, &self.dense_bn)?;
        let folded_one = fold_bn(&self.one_by_one, &self.one_bn)?;
        let one_as_3x3 = pad_1x1_to_3x3(&folded_one.weight)?;

        let ws = folded_dense.weight.shape();
        let mut w: Vec<f32> = folded_dense
            .weight
            .data()
            .iter()
            .zip(one_as_3x3.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let mut b: Vec<f32> = folded_dense
            .bias
            .as_ref()
            .expect("folded conv has bias")
            .data()
            .iter()
            .zip(folded_one.bias.as_ref().expect("folded conv has bias").data().iter())
            .map(|(&a, &c)| a + c)
            .collect();

        if let Some(id_bn) = &self.identity_bn {
            let id_conv = ConvParams::new(identity_to_3x3(ws.n), None, 1, 1)?;
            let folded_id = fold_bn(&id_conv, id_bn)?;
            for (dst, &src) in w.iter_mut().zip(folded_id.weight.data().iter()) {
                *dst += src;
            }
            for (dst, &src) in b
                .iter_mut()
                .zip(folded_id.bias.as_ref().expect("folded conv has bias").data().iter())
            {
                *dst += src;
            }
        }

        let mut fused = ConvParams::new(
            Tensor::new(ws, w)?,
            Some(Tensor::new(Shape::new(1, ws.n, 1, 1), b)?),
            self.dense.stride,
            1,
        )?;
        fused.pad_mode = self.dense.pad_mode;
        Ok(RepConvUnit {
            fused: Some(fused),
            ..self.clone()
        })
    }
}

fn leaf_bn(tape: &mut Tape, bn: &BnParams) -> (Var, Var) {
    (
        tape.leaf(bn.gamma.clone().with_requires_grad()),
        tape.leaf(bn.beta.clone().with_requires_grad()),
    )
}

fn collect_bn(prefix: &str, bn: &BnParams, out: &mut Vec<(String, Tensor)>) {
    let c = bn.channels();
    out.push((format!("{prefix}.g"), bn.gamma.clone()));
    out.push((format!("{prefix}.b"), bn.beta.clone()));
    out.push((
        format!("{prefix}.rm"),
        Tensor::new(Shape::new(1, c, 1, 1), bn.running_mean.clone()).expect("len c"),
    ));
    out.push((
        format!("{prefix}.rv"),
        Tensor::new(Shape::new(1, c, 1, 1), bn.running_var.clone()).expect("len c"),
    ));
}

fn collect_conv_bn(
    prefix: &str,
    name: &str,
    conv: &ConvParams,
    bn: &BnParams,
    out: &mut Vec<(String, Tensor)>,
) {
    out.push((format!("{prefix}.{name}.w"), conv.weight.clone()));
    collect_bn(&format!("{prefix}.{name}.bn"), bn, out);
}

fn assign_bn(
    prefix: &str,
    bn: &mut BnParams,
    src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
) -> Result<()> {
    let c = bn.channels();
    let cs = Shape::new(1, c, 1, 1);
    bn.gamma = src(&format!("{prefix}.g"), cs)?;
    bn.beta = src(&format!("{prefix}.b"), cs)?;
    bn.running_mean = src(&format!("{prefix}.rm"), cs)?.data().to_vec();
    bn.running_var = src(&format!("{prefix}.rv"), cs)?.data().to_vec();
    Ok(())
}

fn assign_conv_bn(
    prefix: &str,
    name: &str,
    conv: &mut ConvParams,
    bn: &mut BnParams,
    src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
) -> Result<()> {
    conv.weight = src(&format!("{prefix}.{name}.w"), conv.weight.shape())?;
    assign_bn(&format!("{prefix}.{name}.bn"), bn, src)
}

/// Plain convolution + BN + optional activation (head stems and the 1x1
/// projections inside CSPStackRep). Fusing folds the BN into a conv bias.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: ConvParams,
    pub bn: BnParams,
    pub act: Option<Activation>,
    pub fused: Option<ConvParams>,
}

impl ConvBnAct {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        act: Option<Activation>,
        rng: &mut Rng,
    ) -> Result<ConvBnAct> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt() as f32;
        let conv = ConvParams::new(
            Tensor::randn(Shape::new(c_out, c_in, k, k), rng, 0.0, std),
            None,
            stride,
            if k == 3 { 1 } else { 0 },
        )?;
        Ok(ConvBnAct {
            conv,
            bn: BnParams::identity(c_out),
            act,
            fused: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match &self.fused {
            Some(fused) => conv2d(x, fused)?,
            None => batchnorm_infer(&conv2d(x, &self.conv)?, &self.bn)?,
        };
        match self.act {
            Some(a) => activation(&y, a),
            None => Ok(y),
        }
    }

    pub fn forward_taped(&self, tape: &mut Tape, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        assert!(self.fused.is_none(), "taped forward is for training mode");
        let w = tape.leaf(self.conv.weight.clone().with_requires_grad());
        let (g, b) = leaf_bn(tape, &self.bn);
        vars.extend([w, g, b]);
        let y = tape.conv2d(x, w, None, self.conv.stride, self.conv.padding)?;
        let y = tape.batchnorm_infer(
            y,
            g,
            b,
            &self.bn.running_mean,
            &self.bn.running_var,
            self.bn.eps,
        )?;
        match self.act {
            Some(a) => tape.activation(y, a),
            None => Ok(y),
        }
    }

    pub fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(fused) = &mut self.fused {
            f(&mut fused.weight);
            f(fused.bias.as_mut().expect("fused conv has bias"));
            return;
        }
        f(&mut self.conv.weight);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(fused) = &self.fused {
            out.push((format!("{prefix}.fused.w"), fused.weight.clone()));
            out.push((
                format!("{prefix}.fused.b"),
                fused.bias.clone().expect("fused conv has bias"),
            ));
            return;
        }
        collect_conv_bn(prefix, "conv", &self.conv, &self.bn, out);
    }

    pub fn assign_tensors(
        &mut self,
        prefix: &str,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        if self.fused.is_some() {
            let ws = self.conv.weight.shape();
            let w = src(&format!("{prefix}.fused.w"), ws)?;
            let b = src(&format!("{prefix}.fused.b"), Shape::new(1, ws.n, 1, 1))?;
            self.fused = Some(ConvParams::new(w, Some(b), self.conv.stride, self.conv.padding)?);
            return Ok(());
        }
        assign_conv_bn(prefix, "conv", &mut self.conv, &mut self.bn, src)
    }

    pub fn param_count(&self) -> usize {
        match &self.fused {
            Some(f) => f.param_count(),
            None => self.conv.weight.numel() + 2 * self.bn.channels(),
        }
    }

    pub fn fuse(&self) -> Result<ConvBnAct> {
        if self.fused.is_some() {
            return Err(arg_err("fuse", "conv is already fused"));
        }
        Ok(ConvBnAct {
            fused: Some(fold_bn(&self.conv, &self.bn)?),
            ..self.clone()
        })
    }
}

/// Stack of RepConv units; the first maps c_in to c_out at the block stride,
/// the rest keep c_out at stride 1 with identity branches.
#[derive(Debug, Clone)]
pub struct RepBlock {
    pub units: Vec<RepConvUnit>,
}

impl RepBlock {
    pub fn new(
        c_in: usize,
        c_out: usize,
        n_units: usize,
        stride: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<RepBlock> {
        if n_units == 0 {
            return Err(arg_err("rep_block", "repeat count must be positive"));
        }
        let mut units = Vec::with_capacity(n_units);
        units.push(RepConvUnit::new(c_in, c_out, stride, act, true, rng)?);
        for _ in 1..n_units {
            units.push(RepConvUnit::new(c_out, c_out, 1, act, true, rng)?);
        }
        Ok(RepBlock { units })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(&y)?;
        }
        Ok(y)
    }

    pub fn forward_taped(&self, tape: &mut Tape, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let mut y = x;
        for u in &self.units {
            y = u.forward_taped(tape, y, vars)?;
        }
        Ok(y)
    }

    pub fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for u in &mut self.units {
            u.for_each_trainable(f);
        }
    }

    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, u) in self.units.iter().enumerate() {
            u.collect_tensors(&format!("{prefix}.u{i}"), out);
        }
    }

    pub fn assign_tensors(
        &mut self,
        prefix: &str,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.assign_tensors(&format!("{prefix}.u{i}"), src)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(RepConvUnit::param_count).sum()
    }

    pub fn fuse(&self) -> Result<RepBlock> {
        Ok(RepBlock {
            units: self.units.iter().map(RepConvUnit::fuse).collect::<Result<_>>()?,
        })
    }
}

/// Two RepConv units with a learnable scalar residual scale (init 1).
#[derive(Debug, Clone)]
pub struct BottleRep {
    pub conv1: RepConvUnit,
    pub conv2: RepConvUnit,
    pub alpha: Tensor,
}

impl BottleRep {
    pub fn new(channels: usize, act: Activation, rng: &mut Rng) -> Result<BottleRep> {
        Ok(BottleRep {
            conv1: RepConvUnit::new(channels, channels, 1, act, true, rng)?,
            conv2: RepConvUnit::new(channels, channels, 1, act, true, rng)?,
            alpha: Tensor::scalar(1.0),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?)?;
        let a = self.alpha.data()[0];
        let scaled = Tensor::new(x.shape(), x.data().iter().map(|&v| a * v).collect())?;
        add(&y, &scaled)
    }

    pub fn forward_taped(&self, tape: &mut Tape, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let y1 = self.conv1.forward_taped(tape, x, vars)?;
        let y2 = self.conv2.forward_taped(tape, y1, vars)?;
        let a = tape.leaf(self.alpha.clone().with_requires_grad());
        vars.push(a);
        let scaled = tape.mul_scalar_t(x, a)?;
        tape.add(y2, scaled)
    }

    pub fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.conv1.for_each_trainable(f);
        self.conv2.for_each_trainable(f);
        f(&mut self.alpha);
    }

    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect_tensors(&format!("{prefix}.c1"), out);
        self.conv2.collect_tensors(&format!("{prefix}.c2"), out);
        out.push((format!("{prefix}.alpha"), self.alpha.clone()));
    }

    pub fn assign_tensors(
        &mut self,
        prefix: &str,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        self.conv1.assign_tensors(&format!("{prefix}.c1"), src)?;
        self.conv2.assign_tensors(&format!("{prefix}.c2"), src)?;
        self.alpha = src(&format!("{prefix}.alpha"), Shape::new(1, 1, 1, 1))?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + 1
    }

    pub fn fuse(&self) -> Result<BottleRep> {
        Ok(BottleRep {
            conv1: self.conv1.fuse()?,
            conv2: self.conv2.fuse()?,
            alpha: self.alpha.clone(),
        })
    }
}

/// Hidden width of a CSPStackRep block: round-half-up of channels * cc,
/// floored at 1.
pub fn csp_hidden_channels(channels: usize, cc: f64) -> usize {
    (((channels as f64 * cc) + 0.5).floor() as usize).max(1)
}

/// Cross-stage partial structure over stacked BottleRep units.
///
/// Split path: 1x1 to hidden, then n BottleRep units. Bypass path: 1x1 to
/// hidden. The two concatenate and a final 1x1 restores the output width.
#[derive(Debug, Clone)]
pub struct CspStackRep {
    pub split: ConvBnAct,
    pub bypass: ConvBnAct,
    pub blocks: Vec<BottleRep>,
    pub merge: ConvBnAct,
}

impl CspStackRep {
    pub fn new(
        c_in: usize,
        c_out: usize,
        cc: f64,
        n_bottlerep: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Result<CspStackRep> {
        let hidden = csp_hidden_channels(c_out, cc);
        if n_bottlerep == 0 {
            return Err(arg_err("cspstackrep", "n_bottlerep must be positive"));
        }
        let split = ConvBnAct::new(c_in, hidden, 1, 1, Some(act), rng)?;
        let bypass = ConvBnAct::new(c_in, hidden, 1, 1, Some(act), rng)?;
        let blocks = (0..n_bottlerep)
            .map(|_| BottleRep::new(hidden, act, rng))
            .collect::<Result<_>>()?;
        let merge = ConvBnAct::new(2 * hidden, c_out, 1, 1, Some(act), rng)?;
        Ok(CspStackRep {
            split,
            bypass,
            blocks,
            merge,
        })
    }

    pub fn hidden(&self) -> usize {
        self.split.conv.c_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut main = self.split.forward(x)?;
        for b in &self.blocks {
            main = b.forward(&main)?;
        }
        let side = self.bypass.forward(x)?;
        let merged = crate::tensor::concat_channels(&[&main, &side])?;
        self.merge.forward(&merged)
    }

    pub fn forward_taped(&self, tape: &mut Tape, x: Var, vars: &mut Vec<Var>) -> Result<Var> {
        let mut main = self.split.forward_taped(tape, x, vars)?;
        for b in &self.blocks {
            main = b.forward_taped(tape, main, vars)?;
        }
        let side = self.bypass.forward_taped(tape, x, vars)?;
        let merged = tape.concat_channels(&[main, side])?;
        self.merge.forward_taped(tape, merged, vars)
    }

    pub fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.split.for_each_trainable(f);
        for b in &mut self.blocks {
            b.for_each_trainable(f);
        }
        self.bypass.for_each_trainable(f);
        self.merge.for_each_trainable(f);
    }

    pub fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.split.collect_tensors(&format!("{prefix}.split"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_tensors(&format!("{prefix}.b{i}"), out);
        }
        self.bypass.collect_tensors(&format!("{prefix}.bypass"), out);
        self.merge.collect_tensors(&format!("{prefix}.merge"), out);
    }

    pub fn assign_tensors(
        &mut self,
        prefix: &str,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        self.split.assign_tensors(&format!("{prefix}.split"), src)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.assign_tensors(&format!("{prefix}.b{i}"), src)?;
        }
        self.bypass.assign_tensors(&format!("{prefix}.bypass"), src)?;
        self.merge.assign_tensors(&format!("{prefix}.merge"), src)
    }

    pub fn param_count(&self) -> usize {
        self.split.param_count()
            + self.bypass.param_count()
            + self.merge.param_count()
            + self.blocks.iter().map(BottleRep::param_count).sum::<usize>()
    }

    pub fn fuse(&self) -> Result<CspStackRep> {
        Ok(CspStackRep {
            split: self.split.fuse()?,
            bypass: self.bypass.fuse()?,
            blocks: self.blocks.iter().map(BottleRep::fuse).collect::<Result<_>>()?,
            merge: self.merge.fuse()?,
        })
    }
}
