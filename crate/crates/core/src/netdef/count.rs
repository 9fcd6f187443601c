//! Parameter and FLOP accounting.
//!
//! FLOPs are reported as 2 * MACs with conv MACs = c_out * c_in * k^2 *
//! H_out * W_out; elementwise work is not counted. Counting follows the
//! model's current state, so a fused model reports the single-path cost.

use super::{Layer, Model, RowInput, RowKind};
use crate::error::Result;
use crate::reparam::{ConvBnAct, CspStackRep, RepBlock, RepConvUnit};
use crate::tensor::ConvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountReport {
    pub params: u64,
    /// Multiply-accumulate count.
    pub macs: u64,
    /// 2 * MACs.
    pub flops: u64,
}

fn conv_macs(p: &ConvParams, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
    let ws = p.weight.shape();
    let oh = crate::tensor::Shape::conv_out(in_hw.0, ws.h, p.stride, p.padding).unwrap_or(0);
    let ow = crate::tensor::Shape::conv_out(in_hw.1, ws.w, p.stride, p.padding).unwrap_or(0);
    (
        (ws.n * ws.c * ws.h * ws.w) as u64 * (oh as u64) * (ow as u64),
        (oh, ow),
    )
}

fn unit_macs(u: &RepConvUnit, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
    if let Some(f) = &u.fused {
        return conv_macs(f, in_hw);
    }
    let (dense, out_hw) = conv_macs(&u.dense, in_hw);
    let (one, _) = conv_macs(&u.one_by_one, in_hw);
    (dense + one, out_hw)
}

fn cba_macs(c: &ConvBnAct, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
    match &c.fused {
        Some(f) => conv_macs(f, in_hw),
        None => conv_macs(&c.conv, in_hw),
    }
}

fn rep_macs(b: &RepBlock, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
    let mut hw = in_hw;
    let mut macs = 0u64;
    for u in &b.units {
        let (m, out) = unit_macs(u, hw);
        macs += m;
        hw = out;
    }
    (macs, hw)
}

fn csp_macs(c: &CspStackRep, in_hw: (usize, usize)) -> (u64, (usize, usize)) {
    let (mut macs, hw) = cba_macs(&c.split, in_hw);
    for b in &c.blocks {
        macs += unit_macs(&b.conv1, hw).0;
        macs += unit_macs(&b.conv2, hw).0;
    }
    macs += cba_macs(&c.bypass, in_hw).0;
    macs += cba_macs(&c.merge, hw).0;
    (macs, hw)
}

/// Exact parameter count plus conv MAC/FLOP totals at the given input size.
pub fn count_params_flops(m: &Model, input_hw: (usize, usize)) -> Result<CountReport> {
    m.graph.validate()?;
    let mut hw: Vec<(usize, usize)> = Vec::with_capacity(m.graph.rows.len());
    let mut macs = 0u64;
    for (row, layer) in m.graph.rows.iter().zip(m.layers.iter()) {
        let in_hw: Vec<(usize, usize)> = row
            .inputs
            .iter()
            .map(|inp| match *inp {
                RowInput::Image => input_hw,
                RowInput::Row(j) => hw[j],
            })
            .collect();
        let out_hw = match layer {
            Layer::Conv(u) => {
                let (mc, out) = unit_macs(u, in_hw[0]);
                macs += mc;
                out
            }
            Layer::Rep(b) => {
                let (mc, out) = rep_macs(b, in_hw[0]);
                macs += mc;
                out
            }
            Layer::Csp(c) => {
                let (mc, out) = csp_macs(c, in_hw[0]);
                macs += mc;
                out
            }
            Layer::Upsample => (2 * in_hw[0].0, 2 * in_hw[0].1),
            Layer::Concat => in_hw[0],
            Layer::Head(h) => {
                for (scale, s_hw) in h.scales.iter().zip(in_hw.iter()) {
                    let (stem, stem_hw) = cba_macs(&scale.stem, *s_hw);
                    macs += stem;
                    macs += conv_macs(&scale.cls_pred, stem_hw).0;
                    macs += conv_macs(&scale.box_pred, stem_hw).0;
                }
                in_hw[0]
            }
        };
        debug_assert_eq!((row.kind == RowKind::Head), matches!(layer, Layer::Head(_)));
        hw.push(out_hw);
    }
    Ok(CountReport {
        params: m.param_count() as u64,
        macs,
        flops: 2 * macs,
    })
}
