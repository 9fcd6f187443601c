//! Compiled executable models: build, forward (plain and taped), fuse.

use super::{GraphDef, ModelConfig, RowInput, RowKind};
use crate::error::{arg_err, Error, Result};
use crate::reparam::{ConvBnAct, CspStackRep, RepBlock, RepConvUnit};
use crate::rng::Rng;
use crate::tensor::{PadMode, Shape, Tape, Tensor, Var};

/// Initial classification-logit bias: sigmoid(-4.595) is roughly 0.01, which
/// keeps the early negative-class loss small.
const CLS_BIAS_INIT: f32 = -4.595;
/// Initial box-distance bias of one cell per side.
const BOX_BIAS_INIT: f32 = 1.0;

/// One detection scale of the decoupled head: a shared 1x1 stem, then
/// parallel single-conv classification and box branches.
#[derive(Debug, Clone)]
pub struct HeadScale {
    pub stem: ConvBnAct,
    pub cls_pred: crate::tensor::ConvParams,
    pub box_pred: crate::tensor::ConvParams,
}

#[derive(Debug, Clone)]
pub struct DetectHead {
    pub scales: Vec<HeadScale>,
    pub reg_max: usize,
    pub num_classes: usize,
}

impl DetectHead {
    fn new(
        in_channels: &[usize],
        widths: &[usize],
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<DetectHead> {
        let mut scales = Vec::with_capacity(widths.len());
        for (&cin, &width) in in_channels.iter().zip(widths.iter()) {
            let stem = ConvBnAct::new(cin, width, 1, 1, Some(cfg.activation), rng)?;
            let cls_pred = pred_conv(width, cfg.num_classes, CLS_BIAS_INIT, rng)?;
            let box_pred = pred_conv(width, cfg.box_channels(), BOX_BIAS_INIT, rng)?;
            scales.push(HeadScale {
                stem,
                cls_pred,
                box_pred,
            });
        }
        Ok(DetectHead {
            scales,
            reg_max: cfg.reg_max,
            num_classes: cfg.num_classes,
        })
    }

    fn forward(&self, xs: &[&Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut cls = Vec::with_capacity(self.scales.len());
        let mut boxes = Vec::with_capacity(self.scales.len());
        for (scale, &x) in self.scales.iter().zip(xs.iter()) {
            let stem = scale.stem.forward(x)?;
            cls.push(crate::tensor::conv2d(&stem, &scale.cls_pred)?);
            boxes.push(crate::tensor::conv2d(&stem, &scale.box_pred)?);
        }
        Ok((cls, boxes))
    }

    fn forward_taped(
        &self,
        tape: &mut Tape,
        xs: &[Var],
        vars: &mut Vec<Var>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut cls = Vec::new();
        let mut boxes = Vec::new();
        for (scale, &x) in self.scales.iter().zip(xs.iter()) {
            let stem = scale.stem.forward_taped(tape, x, vars)?;
            let wc = tape.leaf(scale.cls_pred.weight.clone().with_requires_grad());
            let bc = tape.leaf(
                scale
                    .cls_pred
                    .bias
                    .clone()
                    .expect("pred conv has bias")
                    .with_requires_grad(),
            );
            vars.extend([wc, bc]);
            cls.push(tape.conv2d(stem, wc, Some(bc), 1, 0)?);
            let wb = tape.leaf(scale.box_pred.weight.clone().with_requires_grad());
            let bb = tape.leaf(
                scale
                    .box_pred
                    .bias
                    .clone()
                    .expect("pred conv has bias")
                    .with_requires_grad(),
            );
            vars.extend([wb, bb]);
            boxes.push(tape.conv2d(stem, wb, Some(bb), 1, 0)?);
        }
        Ok((cls, boxes))
    }

    fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for s in &mut self.scales {
            s.stem.for_each_trainable(f);
            f(&mut s.cls_pred.weight);
            f(s.cls_pred.bias.as_mut().expect("pred conv has bias"));
            f(&mut s.box_pred.weight);
            f(s.box_pred.bias.as_mut().expect("pred conv has bias"));
        }
    }

    fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, s) in self.scales.iter().enumerate() {
            s.stem.collect_tensors(&format!("{prefix}.s{i}.stem"), out);
            out.push((format!("{prefix}.s{i}.cls.w"), s.cls_pred.weight.clone()));
            out.push((
                format!("{prefix}.s{i}.cls.b"),
                s.cls_pred.bias.clone().expect("pred conv has bias"),
            ));
            out.push((format!("{prefix}.s{i}.box.w"), s.box_pred.weight.clone()));
            out.push((
                format!("{prefix}.s{i}.box.b"),
                s.box_pred.bias.clone().expect("pred conv has bias"),
            ));
        }
    }

    fn assign_tensors(
        &mut self,
        prefix: &str,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        for (i, s) in self.scales.iter_mut().enumerate() {
            s.stem.assign_tensors(&format!("{prefix}.s{i}.stem"), src)?;
            s.cls_pred.weight = src(&format!("{prefix}.s{i}.cls.w"), s.cls_pred.weight.shape())?;
            let cb = s.cls_pred.bias.as_ref().expect("pred conv has bias").shape();
            s.cls_pred.bias = Some(src(&format!("{prefix}.s{i}.cls.b"), cb)?);
            s.box_pred.weight = src(&format!("{prefix}.s{i}.box.w"), s.box_pred.weight.shape())?;
            let bb = s.box_pred.bias.as_ref().expect("pred conv has bias").shape();
            s.box_pred.bias = Some(src(&format!("{prefix}.s{i}.box.b"), bb)?);
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.stem.param_count() + s.cls_pred.param_count() + s.box_pred.param_count())
            .sum()
    }

    fn fuse(&self) -> Result<DetectHead> {
        Ok(DetectHead {
            scales: self
                .scales
                .iter()
                .map(|s| {
                    Ok(HeadScale {
                        stem: s.stem.fuse()?,
                        cls_pred: s.cls_pred.clone(),
                        box_pred: s.box_pred.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            reg_max: self.reg_max,
            num_classes: self.num_classes,
        })
    }
}

fn pred_conv(
    c_in: usize,
    c_out: usize,
    bias_init: f32,
    rng: &mut Rng,
) -> Result<crate::tensor::ConvParams> {
    let std = (2.0 / c_in as f64).sqrt() as f32 * 0.1;
    crate::tensor::ConvParams::new(
        Tensor::randn(Shape::new(c_out, c_in, 1, 1), rng, 0.0, std),
        Some(Tensor::full(Shape::new(1, c_out, 1, 1), bias_init)),
        1,
        0,
    )
}

/// Executable form of one graph row.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(RepConvUnit),
    Rep(RepBlock),
    Csp(CspStackRep),
    Upsample,
    Concat,
    Head(DetectHead),
}

/// Per-scale head maps: `cls[i]` is (n, num_classes, H_i, W_i) and
/// `boxes[i]` is (n, 4*(reg_max+1)) or (n, 4) channels at the same grid.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub cls: Vec<Tensor>,
    pub boxes: Vec<Tensor>,
    pub strides: Vec<usize>,
    pub reg_max: usize,
}

/// Head maps as tape nodes, for the training path.
pub struct TapedHead {
    pub cls: Vec<Var>,
    pub boxes: Vec<Var>,
    pub strides: Vec<usize>,
    pub reg_max: usize,
}

/// A compiled, immutable-under-inference model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: GraphDef,
    pub layers: Vec<Layer>,
    pub fused: bool,
    pub seed: u64,
}

impl Model {
    /// Compile a graph into layers with seed-deterministic initialization.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let graph = GraphDef::from_config(cfg);
        Model::build_from_graph(graph, cfg, seed)
    }

    pub fn build_from_graph(graph: GraphDef, cfg: &ModelConfig, seed: u64) -> Result<Model> {
        graph.validate()?;
        let mut rng = Rng::new(seed);
        let act = cfg.activation;
        // channel bookkeeping per row (Image has 3)
        let mut channels: Vec<usize> = Vec::with_capacity(graph.rows.len());
        let mut layers = Vec::with_capacity(graph.rows.len());
        for (i, row) in graph.rows.iter().enumerate() {
            let in_ch: Vec<usize> = row
                .inputs
                .iter()
                .map(|inp| match *inp {
                    RowInput::Image => 3,
                    RowInput::Row(j) => channels[j],
                })
                .collect();
            let (layer, out_ch) = match row.kind {
                RowKind::Conv => {
                    let (_, stride) = row.kernel_stride.ok_or(Error::GraphDef {
                        row: i,
                        msg: "Conv row needs kernel/stride".into(),
                    })?;
                    let f = row.filters[0];
                    (
                        Layer::Conv(RepConvUnit::new(in_ch[0], f, stride, act, true, &mut rng)?),
                        f,
                    )
                }
                RowKind::RepBlock => {
                    let f = row.filters[0];
                    (
                        Layer::Rep(RepBlock::new(in_ch[0], f, row.repeat, 1, act, &mut rng)?),
                        f,
                    )
                }
                RowKind::CspStackRep => {
                    let f = row.filters[0];
                    (
                        Layer::Csp(CspStackRep::new(
                            in_ch[0],
                            f,
                            graph.cc,
                            row.repeat,
                            act,
                            &mut rng,
                        )?),
                        f,
                    )
                }
                RowKind::Upsample => (Layer::Upsample, in_ch[0]),
                RowKind::Concat => (Layer::Concat, in_ch[0] + in_ch[1]),
                RowKind::Head => (
                    Layer::Head(DetectHead::new(&in_ch, &row.filters, cfg, &mut rng)?),
                    0,
                ),
            };
            channels.push(out_ch);
            layers.push(layer);
        }
        Ok(Model {
            config: *cfg,
            graph,
            layers,
            fused: false,
            seed,
        })
    }

    pub fn head(&self) -> &DetectHead {
        for l in &self.layers {
            if let Layer::Head(h) = l {
                return h;
            }
        }
        unreachable!("validated graph always has a head")
    }

    fn check_input(&self, x: &Tensor) -> Result<Vec<usize>> {
        let strides = self.graph.head_strides()?;
        let max_stride = strides.iter().copied().max().unwrap_or(32);
        let s = x.shape();
        if s.c != 3 || s.h % max_stride != 0 || s.w % max_stride != 0 {
            return Err(arg_err(
                "forward",
                format!("input must be (n, 3, H, W) with H, W divisible by {max_stride}, got {s}"),
            ));
        }
        Ok(strides)
    }

    /// Pure inference forward.
    pub fn forward(&self, x: &Tensor) -> Result<HeadOutputs> {
        let strides = self.check_input(x)?;
        let mut outs: Vec<Option<Tensor>> = vec![None; self.graph.rows.len()];
        for (i, (row, layer)) in self.graph.rows.iter().zip(self.layers.iter()).enumerate() {
            let inputs: Vec<&Tensor> = row
                .inputs
                .iter()
                .map(|inp| match *inp {
                    RowInput::Image => x,
                    RowInput::Row(j) => outs[j].as_ref().expect("validated order"),
                })
                .collect();
            let out = match layer {
                Layer::Conv(u) => u.forward(inputs[0])?,
                Layer::Rep(b) => b.forward(inputs[0])?,
                Layer::Csp(c) => c.forward(inputs[0])?,
                Layer::Upsample => crate::tensor::upsample_nearest2x(inputs[0])?,
                Layer::Concat => crate::tensor::concat_channels(&inputs)?,
                Layer::Head(h) => {
                    let (cls, boxes) = h.forward(&inputs)?;
                    return Ok(HeadOutputs {
                        cls,
                        boxes,
                        strides,
                        reg_max: h.reg_max,
                    });
                }
            };
            outs[i] = Some(out);
        }
        Err(Error::GraphDef {
            row: self.graph.rows.len(),
            msg: "graph has no head row".into(),
        })
    }

    /// Training forward on a tape. Returns head vars plus all trainable
    /// parameter vars in [`Model::for_each_trainable`] order.
    pub fn forward_taped(&self, tape: &mut Tape, x: &Tensor) -> Result<(TapedHead, Vec<Var>)> {
        let strides = self.check_input(x)?;
        if self.fused {
            return Err(arg_err("forward_taped", "training forward needs an unfused model"));
        }
        let xv = tape.leaf(x.clone());
        let mut vars = Vec::new();
        let mut outs: Vec<Option<Var>> = vec![None; self.graph.rows.len()];
        for (i, (row, layer)) in self.graph.rows.iter().zip(self.layers.iter()).enumerate() {
            let inputs: Vec<Var> = row
                .inputs
                .iter()
                .map(|inp| match *inp {
                    RowInput::Image => xv,
                    RowInput::Row(j) => outs[j].expect("validated order"),
                })
                .collect();
            let out = match layer {
                Layer::Conv(u) => u.forward_taped(tape, inputs[0], &mut vars)?,
                Layer::Rep(b) => b.forward_taped(tape, inputs[0], &mut vars)?,
                Layer::Csp(c) => c.forward_taped(tape, inputs[0], &mut vars)?,
                Layer::Upsample => tape.upsample_nearest2x(inputs[0])?,
                Layer::Concat => tape.concat_channels(&inputs)?,
                Layer::Head(h) => {
                    let (cls, boxes) = h.forward_taped(tape, &inputs, &mut vars)?;
                    return Ok((
                        TapedHead {
                            cls,
                            boxes,
                            strides,
                            reg_max: h.reg_max,
                        },
                        vars,
                    ));
                }
            };
            outs[i] = Some(out);
        }
        Err(Error::GraphDef {
            row: self.graph.rows.len(),
            msg: "graph has no head row".into(),
        })
    }

    /// Forward that routes every convolution through `hook`. The hook
    /// receives (site name, conv, input) and returns the conv output; sites
    /// are visited in the stable order of [`Model::conv_site_names`]. Only
    /// meaningful on a fused model, where each site is a single convolution.
    pub fn forward_conv_hooked(
        &self,
        x: &Tensor,
        hook: &mut dyn FnMut(&str, &crate::tensor::ConvParams, &Tensor) -> Result<Tensor>,
    ) -> Result<HeadOutputs> {
        if !self.fused {
            return Err(arg_err("forward_conv_hooked", "model must be fused"));
        }
        let strides = self.check_input(x)?;
        let act = |t: Tensor, a: crate::tensor::Activation| crate::tensor::activation(&t, a);

        let unit_fwd = |u: &RepConvUnit,
                        x: &Tensor,
                        name: &str,
                        hook: &mut dyn FnMut(&str, &crate::tensor::ConvParams, &Tensor) -> Result<Tensor>|
         -> Result<Tensor> {
            let conv = u.fused.as_ref().expect("fused unit");
            act(hook(name, conv, x)?, u.act)
        };
        let cba_fwd = |c: &ConvBnAct,
                       x: &Tensor,
                       name: &str,
                       hook: &mut dyn FnMut(&str, &crate::tensor::ConvParams, &Tensor) -> Result<Tensor>|
         -> Result<Tensor> {
            let conv = c.fused.as_ref().expect("fused conv");
            let y = hook(name, conv, x)?;
            match c.act {
                Some(a) => act(y, a),
                None => Ok(y),
            }
        };

        let mut outs: Vec<Option<Tensor>> = vec![None; self.graph.rows.len()];
        for (i, (row, layer)) in self.graph.rows.iter().zip(self.layers.iter()).enumerate() {
            let inputs: Vec<&Tensor> = row
                .inputs
                .iter()
                .map(|inp| match *inp {
                    RowInput::Image => x,
                    RowInput::Row(j) => outs[j].as_ref().expect("validated order"),
                })
                .collect();
            let out = match layer {
                Layer::Conv(u) => unit_fwd(u, inputs[0], &format!("l{i}"), hook)?,
                Layer::Rep(b) => {
                    let mut y = inputs[0].clone();
                    for (ui, u) in b.units.iter().enumerate() {
                        y = unit_fwd(u, &y, &format!("l{i}.u{ui}"), hook)?;
                    }
                    y
                }
                Layer::Csp(c) => {
                    let mut main = cba_fwd(&c.split, inputs[0], &format!("l{i}.split"), hook)?;
                    for (bi, b) in c.blocks.iter().enumerate() {
                        let y1 = unit_fwd(&b.conv1, &main, &format!("l{i}.b{bi}.c1"), hook)?;
                        let y2 = unit_fwd(&b.conv2, &y1, &format!("l{i}.b{bi}.c2"), hook)?;
                        let a = b.alpha.data()[0];
                        let scaled =
                            Tensor::new(main.shape(), main.data().iter().map(|&v| a * v).collect())?;
                        main = crate::tensor::add(&y2, &scaled)?;
                    }
                    let side = cba_fwd(&c.bypass, inputs[0], &format!("l{i}.bypass"), hook)?;
                    let merged = crate::tensor::concat_channels(&[&main, &side])?;
                    cba_fwd(&c.merge, &merged, &format!("l{i}.merge"), hook)?
                }
                Layer::Upsample => crate::tensor::upsample_nearest2x(inputs[0])?,
                Layer::Concat => crate::tensor::concat_channels(&inputs)?,
                Layer::Head(h) => {
                    let mut cls = Vec::new();
                    let mut boxes = Vec::new();
                    for (si, (scale, &sx)) in h.scales.iter().zip(inputs.iter()).enumerate() {
                        let stem = cba_fwd(&scale.stem, sx, &format!("l{i}.s{si}.stem"), hook)?;
                        cls.push(hook(&format!("l{i}.s{si}.cls"), &scale.cls_pred, &stem)?);
                        boxes.push(hook(&format!("l{i}.s{si}.box"), &scale.box_pred, &stem)?);
                    }
                    return Ok(HeadOutputs {
                        cls,
                        boxes,
                        strides,
                        reg_max: h.reg_max,
                    });
                }
            };
            outs[i] = Some(out);
        }
        Err(Error::GraphDef {
            row: self.graph.rows.len(),
            msg: "graph has no head row".into(),
        })
    }

    /// Stable enumeration of convolution sites in forward order (fused
    /// models; the names match [`Model::forward_conv_hooked`]).
    pub fn conv_site_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(_) => names.push(format!("l{i}")),
                Layer::Rep(b) => {
                    for ui in 0..b.units.len() {
                        names.push(format!("l{i}.u{ui}"));
                    }
                }
                Layer::Csp(c) => {
                    names.push(format!("l{i}.split"));
                    for bi in 0..c.blocks.len() {
                        names.push(format!("l{i}.b{bi}.c1"));
                        names.push(format!("l{i}.b{bi}.c2"));
                    }
                    names.push(format!("l{i}.bypass"));
                    names.push(format!("l{i}.merge"));
                }
                Layer::Upsample | Layer::Concat => {}
                Layer::Head(h) => {
                    for si in 0..h.scales.len() {
                        names.push(format!("l{i}.s{si}.stem"));
                        names.push(format!("l{i}.s{si}.cls"));
                        names.push(format!("l{i}.s{si}.box"));
                    }
                }
            }
        }
        names
    }

    /// Walk every trainable tensor in deterministic order (matches the leaf
    /// registration order of [`Model::forward_taped`]).
    pub fn for_each_trainable(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) => u.for_each_trainable(f),
                Layer::Rep(b) => b.for_each_trainable(f),
                Layer::Csp(c) => c.for_each_trainable(f),
                Layer::Upsample | Layer::Concat => {}
                Layer::Head(h) => h.for_each_trainable(f),
            }
        }
    }

    /// Named tensors (trainables plus buffers) for checkpointing.
    pub fn collect_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = format!("l{i}");
            match layer {
                Layer::Conv(u) => u.collect_tensors(&prefix, &mut out),
                Layer::Rep(b) => b.collect_tensors(&prefix, &mut out),
                Layer::Csp(c) => c.collect_tensors(&prefix, &mut out),
                Layer::Upsample | Layer::Concat => {}
                Layer::Head(h) => h.collect_tensors(&prefix, &mut out),
            }
        }
        out
    }

    /// Overwrite tensors from a named source (checkpoint loading).
    pub fn assign_tensors(
        &mut self,
        src: &mut dyn FnMut(&str, Shape) -> Result<Tensor>,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("l{i}");
            match layer {
                Layer::Conv(u) => u.assign_tensors(&prefix, src)?,
                Layer::Rep(b) => b.assign_tensors(&prefix, src)?,
                Layer::Csp(c) => c.assign_tensors(&prefix, src)?,
                Layer::Upsample | Layer::Concat => {}
                Layer::Head(h) => h.assign_tensors(&prefix, src)?,
            }
        }
        Ok(())
    }

    /// Trainable parameter count in the current (fused or unfused) state.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(u) => u.param_count(),
                Layer::Rep(b) => b.param_count(),
                Layer::Csp(c) => c.param_count(),
                Layer::Upsample | Layer::Concat => 0,
                Layer::Head(h) => h.param_count(),
            })
            .sum()
    }

    /// Switch every convolution to wrap padding (synthetic equivariance
    /// checks only).
    pub fn set_wrap_padding(&mut self) {
        fn wrap_unit(u: &mut RepConvUnit) {
            u.dense.pad_mode = PadMode::Wrap;
            u.one_by_one.pad_mode = PadMode::Wrap;
            if let Some(f) = &mut u.fused {
                f.pad_mode = PadMode::Wrap;
            }
        }
        fn wrap_cba(c: &mut ConvBnAct) {
            c.conv.pad_mode = PadMode::Wrap;
            if let Some(f) = &mut c.fused {
                f.pad_mode = PadMode::Wrap;
            }
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(u) => wrap_unit(u),
                Layer::Rep(b) => b.units.iter_mut().for_each(wrap_unit),
                Layer::Csp(c) => {
                    wrap_cba(&mut c.split);
                    wrap_cba(&mut c.bypass);
                    wrap_cba(&mut c.merge);
                    for b in &mut c.blocks {
                        wrap_unit(&mut b.conv1);
                        wrap_unit(&mut b.conv2);
                    }
                }
                Layer::Upsample | Layer::Concat => {}
                Layer::Head(h) => {
                    for s in &mut h.scales {
                        wrap_cba(&mut s.stem);
                        s.cls_pred.pad_mode = PadMode::Wrap;
                        s.box_pred.pad_mode = PadMode::Wrap;
                    }
                }
            }
        }
    }
}

/// Structurally re-parameterize every unit; errors if already fused.
pub fn fuse_model(m: &Model) -> Result<Model> {
    if m.fused {
        return Err(arg_err("fuse_model", "model is already fused"));
    }
    let layers = m
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Conv(u) => Layer::Conv(u.fuse()?),
                Layer::Rep(b) => Layer::Rep(b.fuse()?),
                Layer::Csp(c) => Layer::Csp(c.fuse()?),
                Layer::Upsample => Layer::Upsample,
                Layer::Concat => Layer::Concat,
                Layer::Head(h) => Layer::Head(h.fuse()?),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        layers,
        fused: true,
        ..m.clone()
    })
}
