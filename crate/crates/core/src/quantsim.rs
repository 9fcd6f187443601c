//! INT8 quantization simulation over the fused graph.
//!
//! Quantization runs after structural re-parameterization: fusing first
//! removes the training/inference branch mismatch, so one set of scales
//! serves the deployed single-path graph. Weights take symmetric
//! per-output-channel scales, activations per-tensor scales; everything is
//! simulated with fake quantization (quantize-dequantize) in f32.

use crate::error::{arg_err, Error, Result};
use crate::netdef::{HeadOutputs, Model};
use crate::tensor::{fake_quantize_slice, ConvParams, Tape, Tensor, Var};

/// Scale floor for degenerate all-zero channels.
pub const SCALE_FLOOR: f32 = 1e-8;
/// Default percentile for clipping calibration.
pub const PERCENTILE: f64 = 99.99;
/// Default number of most-sensitive layers kept in floating point.
pub const DEFAULT_KEEP_FLOAT: usize = 6;

/// Symmetric signed INT8 quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantParams {
    PerTensor { scale: f32 },
    PerChannel { scales: Vec<f32> },
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            QuantParams::PerTensor { scale } => scale.is_finite() && *scale > 0.0,
            QuantParams::PerChannel { scales } => {
                !scales.is_empty() && scales.iter().all(|s| s.is_finite() && *s > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(arg_err("quant_params", "scales must be positive and finite"))
        }
    }
}

/// Fake-quantize a full tensor with the given parameters (per-channel over
/// the leading dimension).
pub fn fake_quantize(x: &Tensor, q: &QuantParams) -> Result<Tensor> {
    q.validate()?;
    let s = x.shape();
    let mut out = vec![0.0f32; x.numel()];
    match q {
        QuantParams::PerTensor { scale } => fake_quantize_slice(x.data(), *scale, &mut out),
        QuantParams::PerChannel { scales } => {
            if scales.len() != s.n {
                return Err(arg_err(
                    "fake_quantize",
                    format!("need {} channel scales, got {}", s.n, scales.len()),
                ));
            }
            let chunk = s.c * s.h * s.w;
            for (i, (o, xs)) in out.chunks_mut(chunk).zip(x.data().chunks(chunk)).enumerate() {
                fake_quantize_slice(xs, scales[i], o);
            }
        }
    }
    Tensor::new(s, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibMode {
    MaxAbs,
    Percentile,
}

impl std::str::FromStr for CalibMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<CalibMode> {
        match s {
            "maxabs" => Ok(CalibMode::MaxAbs),
            "percentile" => Ok(CalibMode::Percentile),
            other => Err(arg_err("calib_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Calibrated scales for one convolution site.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub name: String,
    pub act: QuantParams,
    pub weight: QuantParams,
}

/// Per-layer quantization parameters in forward site order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantMap {
    pub layers: Vec<LayerQuant>,
}

impl QuantMap {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }
}

fn floored_scale(maxabs: f32) -> f32 {
    (maxabs / 127.0).max(SCALE_FLOOR)
}

fn weight_scales(conv: &ConvParams) -> Vec<f32> {
    let ws = conv.weight.shape();
    let per = ws.c * ws.h * ws.w;
    (0..ws.n)
        .map(|co| {
            let maxabs = conv.weight.data()[co * per..][..per]
                .iter()
                .fold(0.0f32, |m, &v| m.max(v.abs()));
            floored_scale(maxabs)
        })
        .collect()
}

/// Run calibration passes over a fused model and derive activation scales
/// per conv input (running max-abs or the 99.99th percentile of absolute
/// values) and per-output-channel weight scales.
pub fn calibrate(m: &Model, images: &[Tensor], mode: CalibMode) -> Result<QuantMap> {
    if !m.fused {
        return Err(arg_err("calibrate", "quantization operates on the fused graph"));
    }
    if images.is_empty() {
        return Err(arg_err("calibrate", "calibration set must hold at least one image"));
    }
    let sites = m.conv_site_names();
    let index: std::collections::HashMap<&str, usize> = sites
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut maxabs = vec![0.0f32; sites.len()];
    let mut samples: Vec<Vec<f32>> = vec![Vec::new(); sites.len()];
    let mut wscales: Vec<Option<Vec<f32>>> = vec![None; sites.len()];

    for img in images {
        m.forward_conv_hooked(img, &mut |name, conv, input| {
            let si = index[name];
            match mode {
                CalibMode::MaxAbs => {
                    for &v in input.data() {
                        maxabs[si] = maxabs[si].max(v.abs());
                    }
                }
                CalibMode::Percentile => {
                    samples[si].extend(input.data().iter().map(|v| v.abs()));
                }
            }
            if wscales[si].is_none() {
                wscales[si] = Some(weight_scales(conv));
            }
            crate::tensor::conv2d(input, conv)
        })?;
    }

    let layers = sites
        .iter()
        .enumerate()
        .map(|(si, name)| {
            let act_max = match mode {
                CalibMode::MaxAbs => maxabs[si],
                CalibMode::Percentile => {
                    let vals = &mut samples[si];
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let idx = ((PERCENTILE / 100.0 * vals.len() as f64).ceil() as usize)
                        .clamp(1, vals.len())
                        - 1;
                    vals[idx]
                }
            };
            LayerQuant {
                name: name.clone(),
                act: QuantParams::PerTensor {
                    scale: floored_scale(act_max),
                },
                weight: QuantParams::PerChannel {
                    scales: wscales[si].clone().expect("every site visited"),
                },
            }
        })
        .collect();
    Ok(QuantMap { layers })
}

/// Per-layer degradation of the quantized conv output against float, over a
/// probe set: SNR in dB (ascending = most sensitive first), cosine
/// similarity, and mean squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSensitivity {
    pub name: String,
    pub snr_db: f64,
    pub cosine: f64,
    pub mse: f64,
    /// 0 = most sensitive (lowest SNR).
    pub rank: usize,
    pub kept_float: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensitivityReport {
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityReport {
    /// Names of the `n` most sensitive layers.
    pub fn most_sensitive(&self, n: usize) -> Vec<String> {
        let mut by_rank: Vec<&LayerSensitivity> = self.layers.iter().collect();
        by_rank.sort_by_key(|l| l.rank);
        by_rank.iter().take(n).map(|l| l.name.clone()).collect()
    }

    /// Line-oriented text table (tab-separated, one header line).
    pub fn to_text(&self) -> String {
        let mut out = String::from("layer\tsnr_db\tcosine\tmse\trank\tkept_float\n");
        for l in &self.layers {
            let snr = if l.snr_db.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.6}", l.snr_db)
            };
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6e}\t{}\t{}\n",
                l.name,
                snr,
                l.cosine,
                l.mse,
                l.rank,
                if l.kept_float { 1 } else { 0 }
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<SensitivityReport> {
        let mut layers = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Format {
                    msg: format!("sensitivity line {} has {} fields", i + 1, fields.len()),
                });
            }
            let snr_db = if fields[1] == "inf" {
                f64::INFINITY
            } else {
                fields[1].parse().map_err(|_| Error::Format {
                    msg: format!("bad snr on line {}", i + 1),
                })?
            };
            layers.push(LayerSensitivity {
                name: fields[0].to_string(),
                snr_db,
                cosine: fields[2].parse().map_err(|_| Error::Format {
                    msg: format!("bad cosine on line {}", i + 1),
                })?,
                mse: fields[3].parse().map_err(|_| Error::Format {
                    msg: format!("bad mse on line {}", i + 1),
                })?,
                rank: fields[4].parse().map_err(|_| Error::Format {
                    msg: format!("bad rank on line {}", i + 1),
                })?,
                kept_float: fields[5].trim() == "1",
            });
        }
        Ok(SensitivityReport { layers })
    }
}

/// Quantize one site at a time and compare that layer's output feature map
/// with and without quantization over the probe set.
pub fn sensitivity(m: &Model, q: &QuantMap, probes: &[Tensor]) -> Result<SensitivityReport> {
    if probes.is_empty() {
        return Err(arg_err("sensitivity", "probe set must hold at least one image"));
    }
    let sites = m.conv_site_names();
    if q.layers.len() != sites.len() {
        return Err(arg_err("sensitivity", "quant map does not match model sites"));
    }
    let index: std::collections::HashMap<&str, usize> = sites
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut signal = vec![0.0f64; sites.len()];
    let mut noise = vec![0.0f64; sites.len()];
    let mut dot = vec![0.0f64; sites.len()];
    let mut qnorm = vec![0.0f64; sites.len()];
    let mut count = vec![0u64; sites.len()];

    for img in probes {
        m.forward_conv_hooked(img, &mut |name, conv, input| {
            let si = index[name];
            let float_out = crate::tensor::conv2d(input, conv)?;
            let lq = &q.layers[si];
            let qx = fake_quantize(input, &lq.act)?;
            let mut qconv = conv.clone();
            qconv.weight = fake_quantize(&conv.weight, &lq.weight)?;
            let quant_out = crate::tensor::conv2d(&qx, &qconv)?;
            for (&y, &yq) in float_out.data().iter().zip(quant_out.data().iter()) {
                let (y, yq) = (y as f64, yq as f64);
                signal[si] += y * y;
                noise[si] += (y - yq) * (y - yq);
                dot[si] += y * yq;
                qnorm[si] += yq * yq;
            }
            count[si] += float_out.numel() as u64;
            Ok(float_out)
        })?;
    }

    let mut layers: Vec<LayerSensitivity> = sites
        .iter()
        .enumerate()
        .map(|(si, name)| {
            let zero_error = noise[si] == 0.0;
            let snr_db = if zero_error {
                f64::INFINITY
            } else {
                10.0 * (signal[si] / noise[si]).log10()
            };
            let denom = (signal[si] * qnorm[si]).sqrt();
            let cosine = if zero_error || denom == 0.0 {
                1.0
            } else {
                dot[si] / denom
            };
            LayerSensitivity {
                name: name.clone(),
                snr_db,
                cosine,
                mse: noise[si] / count[si].max(1) as f64,
                rank: 0,
                kept_float: false,
            }
        })
        .collect();

    // rank by ascending SNR; site order breaks exact ties
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| {
        layers[a]
            .snr_db
            .partial_cmp(&layers[b].snr_db)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for (rank, &i) in order.iter().enumerate() {
        layers[i].rank = rank;
    }
    Ok(SensitivityReport { layers })
}

/// A fused model with fake quantization applied to a chosen subset of its
/// convolution sites.
#[derive(Debug, Clone)]
pub struct QuantSim {
    pub model: Model,
    pub qmap: QuantMap,
    /// Per site (in site order): quantize, or keep float.
    pub active: Vec<bool>,
    qat_prepared: bool,
}

impl QuantSim {
    /// Wrap a fused model with every site quantized.
    pub fn new(model: Model, qmap: QuantMap) -> Result<QuantSim> {
        if !model.fused {
            return Err(arg_err("quantsim", "quantization operates on the fused graph"));
        }
        let n = model.conv_site_names().len();
        if qmap.layers.len() != n {
            return Err(arg_err("quantsim", "quant map does not match model sites"));
        }
        Ok(QuantSim {
            model,
            qmap,
            active: vec![true; n],
            qat_prepared: false,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<HeadOutputs> {
        let sites = self.model.conv_site_names();
        let index: std::collections::HashMap<&str, usize> = sites
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        self.model.forward_conv_hooked(x, &mut |name, conv, input| {
            let si = index[name];
            if !self.active[si] {
                return crate::tensor::conv2d(input, conv);
            }
            let lq = &self.qmap.layers[si];
            let qx = fake_quantize(input, &lq.act)?;
            let mut qconv = conv.clone();
            qconv.weight = fake_quantize(&conv.weight, &lq.weight)?;
            crate::tensor::conv2d(&qx, &qconv)
        })
    }

    /// Insert straight-through fake-quant training nodes (fixed scales).
    /// Preparing twice is an error.
    pub fn qat_prepare(&mut self) -> Result<()> {
        if self.qat_prepared {
            return Err(arg_err("qat_prepare", "model is already prepared"));
        }
        self.qat_prepared = true;
        Ok(())
    }

    pub fn is_qat_prepared(&self) -> bool {
        self.qat_prepared
    }

    /// Tape-recorded quantized forward for QAT. Leaf registration order
    /// matches `model.for_each_trainable` on the fused model.
    pub fn forward_taped(&self, tape: &mut Tape, x: &Tensor) -> Result<(QatHead, Vec<Var>)> {
        if !self.qat_prepared {
            return Err(arg_err("forward_taped", "call qat_prepare first"));
        }
        let graph = &self.model.graph;
        let strides = graph.head_strides()?;
        let sites = self.model.conv_site_names();
        let index: std::collections::HashMap<&str, usize> = sites
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let xv = tape.leaf(x.clone());
        let mut vars: Vec<Var> = Vec::new();

        // quantized conv: fq on input (per-tensor) and weight (per-channel)
        let mut qconv = |tape: &mut Tape,
                         vars: &mut Vec<Var>,
                         name: &str,
                         conv: &ConvParams,
                         input: Var|
         -> Result<Var> {
            let si = index[name];
            let lq = &self.qmap.layers[si];
            let w = tape.leaf(conv.weight.clone().with_requires_grad());
            let b = tape.leaf(
                conv.bias
                    .clone()
                    .expect("fused conv has bias")
                    .with_requires_grad(),
            );
            vars.extend([w, b]);
            let (x_in, w_in) = if self.active[si] {
                let act_scale = match &lq.act {
                    QuantParams::PerTensor { scale } => vec![*scale],
                    QuantParams::PerChannel { .. } => unreachable!("activations are per-tensor"),
                };
                let wsc = match &lq.weight {
                    QuantParams::PerChannel { scales } => scales.clone(),
                    QuantParams::PerTensor { scale } => vec![*scale],
                };
                (
                    tape.fake_quant(input, act_scale, false)?,
                    tape.fake_quant(w, wsc, true)?,
                )
            } else {
                (input, w)
            };
            tape.conv2d(x_in, w_in, Some(b), conv.stride, conv.padding)
        };

        use crate::netdef::{Layer, RowInput};
        let mut outs: Vec<Option<Var>> = vec![None; graph.rows.len()];
        for (i, (row, layer)) in graph.rows.iter().zip(self.model.layers.iter()).enumerate() {
            let inputs: Vec<Var> = row
                .inputs
                .iter()
                .map(|inp| match *inp {
                    RowInput::Image => xv,
                    RowInput::Row(j) => outs[j].expect("validated order"),
                })
                .collect();
            let out = match layer {
                Layer::Conv(u) => {
                    let y = qconv(tape, &mut vars, &format!("l{i}"), u.fused.as_ref().unwrap(), inputs[0])?;
                    tape.activation(y, u.act)?
                }
                Layer::Rep(b) => {
                    let mut y = inputs[0];
                    for (ui, u) in b.units.iter().enumerate() {
                        let c = qconv(tape, &mut vars, &format!("l{i}.u{ui}"), u.fused.as_ref().unwrap(), y)?;
                        y = tape.activation(c, u.act)?;
                    }
                    y
                }
                Layer::Csp(c) => {
                    let cba = |tape: &mut Tape,
                               vars: &mut Vec<Var>,
                               qconv: &mut dyn FnMut(&mut Tape, &mut Vec<Var>, &str, &ConvParams, Var) -> Result<Var>,
                               cb: &crate::reparam::ConvBnAct,
                               name: &str,
                               x: Var|
                     -> Result<Var> {
                        let y = qconv(tape, vars, name, cb.fused.as_ref().unwrap(), x)?;
                        match cb.act {
                            Some(a) => tape.activation(y, a),
                            None => Ok(y),
                        }
                    };
                    let mut main =
                        cba(tape, &mut vars, &mut qconv, &c.split, &format!("l{i}.split"), inputs[0])?;
                    for (bi, b) in c.blocks.iter().enumerate() {
                        let y1 = qconv(tape, &mut vars, &format!("l{i}.b{bi}.c1"), b.conv1.fused.as_ref().unwrap(), main)?;
                        let y1 = tape.activation(y1, b.conv1.act)?;
                        let y2 = qconv(tape, &mut vars, &format!("l{i}.b{bi}.c2"), b.conv2.fused.as_ref().unwrap(), y1)?;
                        let y2 = tape.activation(y2, b.conv2.act)?;
                        let a = tape.leaf(b.alpha.clone().with_requires_grad());
                        vars.push(a);
                        let scaled = tape.mul_scalar_t(main, a)?;
                        main = tape.add(y2, scaled)?;
                    }
                    let side =
                        cba(tape, &mut vars, &mut qconv, &c.bypass, &format!("l{i}.bypass"), inputs[0])?;
                    let merged = tape.concat_channels(&[main, side])?;
                    cba(tape, &mut vars, &mut qconv, &c.merge, &format!("l{i}.merge"), merged)?
                }
                Layer::Upsample => tape.upsample_nearest2x(inputs[0])?,
                Layer::Concat => tape.concat_channels(&inputs)?,
                Layer::Head(h) => {
                    let mut cls = Vec::new();
                    let mut boxes = Vec::new();
                    for (si, (scale, &sx)) in h.scales.iter().zip(inputs.iter()).enumerate() {
                        let stem = qconv(tape, &mut vars, &format!("l{i}.s{si}.stem"), scale.stem.fused.as_ref().unwrap(), sx)?;
                        let stem = match scale.stem.act {
                            Some(a) => tape.activation(stem, a)?,
                            None => stem,
                        };
                        cls.push(qconv(tape, &mut vars, &format!("l{i}.s{si}.cls"), &scale.cls_pred, stem)?);
                        boxes.push(qconv(tape, &mut vars, &format!("l{i}.s{si}.box"), &scale.box_pred, stem)?);
                    }
                    return Ok((
                        QatHead {
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
            row: graph.rows.len(),
            msg: "graph has no head row".into(),
        })
    }
}

/// Taped head maps of a QAT forward.
pub struct QatHead {
    pub cls: Vec<Var>,
    pub boxes: Vec<Var>,
    pub strides: Vec<usize>,
    pub reg_max: usize,
}

/// Quantize everything except the `keep_float` most sensitive sites.
pub fn partial_quantize(
    m: &Model,
    qmap: &QuantMap,
    report: &SensitivityReport,
    keep_float: usize,
) -> Result<QuantSim> {
    let sites = m.conv_site_names();
    if keep_float > sites.len() {
        return Err(arg_err(
            "partial_quantize",
            format!("keep_float {} exceeds {} layers", keep_float, sites.len()),
        ));
    }
    let mut qs = QuantSim::new(m.clone(), qmap.clone())?;
    for name in report.most_sensitive(keep_float) {
        if let Some(i) = sites.iter().position(|s| *s == name) {
            qs.active[i] = false;
        }
    }
    Ok(qs)
}

/// Persist a quantized model: the fused weights plus per-site scales and
/// the active mask, in the same binary container as plain checkpoints.
pub fn save_quantsim(qs: &QuantSim, path: &std::path::Path) -> Result<()> {
    use crate::tensor::Shape;
    let mut meta = vec![("kind".to_string(), "quantsim".to_string())];
    meta.extend(qs.model.config.to_kv());
    meta.push(("fused".into(), "1".into()));
    meta.push(("seed".into(), format!("{}", qs.model.seed)));
    let mut tensors: Vec<(String, Tensor)> = qs
        .model
        .collect_tensors()
        .into_iter()
        .map(|(n, t)| (format!("model.{n}"), t))
        .collect();
    for (lq, &active) in qs.qmap.layers.iter().zip(qs.active.iter()) {
        let act = match &lq.act {
            QuantParams::PerTensor { scale } => vec![*scale],
            QuantParams::PerChannel { scales } => scales.clone(),
        };
        let ws = match &lq.weight {
            QuantParams::PerChannel { scales } => scales.clone(),
            QuantParams::PerTensor { scale } => vec![*scale],
        };
        let n = lq.name.as_str();
        tensors.push((
            format!("q.{n}.act"),
            Tensor::new(Shape::new(1, act.len(), 1, 1), act)?,
        ));
        tensors.push((
            format!("q.{n}.w"),
            Tensor::new(Shape::new(1, ws.len(), 1, 1), ws)?,
        ));
        tensors.push((
            format!("q.{n}.active"),
            Tensor::scalar(if active { 1.0 } else { 0.0 }),
        ));
    }
    crate::netdef::save_container(
        &crate::netdef::Container { meta, tensors },
        path,
    )
}

pub fn load_quantsim(path: &std::path::Path) -> Result<QuantSim> {
    let c = crate::netdef::load_container(path)?;
    if c.meta_get("kind") != Some("quantsim") {
        return Err(Error::Format {
            msg: "container does not hold a quantized checkpoint".into(),
        });
    }
    let model_container = crate::netdef::Container {
        meta: {
            let mut m: Vec<(String, String)> = c
                .meta
                .iter()
                .filter(|(k, _)| k != "kind")
                .cloned()
                .collect();
            m.insert(0, ("kind".into(), "model".into()));
            m
        },
        tensors: c
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("model.").map(|n| (n.to_string(), t.clone())))
            .collect(),
    };
    let model = crate::netdef::model_from_container(&model_container)?;
    let find = |name: &str| -> Result<&Tensor> {
        c.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or(Error::Format {
                msg: format!("missing tensor `{name}`"),
            })
    };
    let sites = model.conv_site_names();
    let mut layers = Vec::with_capacity(sites.len());
    let mut active = Vec::with_capacity(sites.len());
    for name in &sites {
        let act = find(&format!("q.{name}.act"))?;
        let w = find(&format!("q.{name}.w"))?;
        let a = find(&format!("q.{name}.active"))?;
        layers.push(LayerQuant {
            name: name.clone(),
            act: QuantParams::PerTensor {
                scale: act.data()[0],
            },
            weight: QuantParams::PerChannel {
                scales: w.data().to_vec(),
            },
        });
        active.push(a.data()[0] != 0.0);
    }
    let mut qs = QuantSim::new(model, QuantMap { layers })?;
    qs.active = active;
    Ok(qs)
}

/// Cosine similarity between float and quantized head maps over a probe set
/// (flattened across all scales and both branches).
pub fn end_to_end_cosine(float_model: &Model, qs: &QuantSim, probes: &[Tensor]) -> Result<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for img in probes {
        let a = float_model.forward(img)?;
        let b = qs.forward(img)?;
        for (ta, tb) in a.cls.iter().chain(a.boxes.iter()).zip(b.cls.iter().chain(b.boxes.iter())) {
            for (&x, &y) in ta.data().iter().zip(tb.data().iter()) {
                dot += x as f64 * y as f64;
                na += x as f64 * x as f64;
                nb += y as f64 * y as f64;
            }
        }
    }
    let denom = (na * nb).sqrt();
    Ok(if denom == 0.0 { 1.0 } else { dot / denom })
}
