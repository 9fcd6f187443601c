//! Declarative network graphs and their compilation.
//!
//! A [`GraphDef`] is an ordered table of rows (Conv, RepBlock, CSPStackRep,
//! Upsample, Concat, Head) with explicit input references, mirroring the
//! layer table the variants are built from: an EfficientRep backbone, a
//! Rep-PAN neck, and an anchor-free decoupled head over strides 8/16/32.

mod config;
mod count;
mod decode;
mod model;
#[cfg(test)]
mod tests;
mod weights;

pub use config::{BlockType, ModelConfig, Variant};
pub use count::{count_params_flops, CountReport};
pub use decode::{decode, dfl_expectation, iou_xyxy, nms, side_distances, Detection, GroundTruth};
pub use model::{fuse_model, DetectHead, HeadOutputs, HeadScale, Layer, Model};
pub use weights::{load_container, load_weights, model_from_container, save_container, save_weights, Container};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Conv,
    RepBlock,
    CspStackRep,
    Upsample,
    Concat,
    Head,
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Conv => "Conv",
            RowKind::RepBlock => "RepBlock",
            RowKind::CspStackRep => "CSPStackRep",
            RowKind::Upsample => "Upsample",
            RowKind::Concat => "Concat",
            RowKind::Head => "Efficient Decoupled Head",
        }
    }
}

/// Where a row reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowInput {
    Image,
    Row(usize),
}

/// One row of the layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRow {
    pub kind: RowKind,
    /// Output widths: one entry for convs and blocks, three for the head,
    /// empty for Upsample/Concat.
    pub filters: Vec<usize>,
    /// (kernel, stride) as printed in the table; None for Upsample/Concat/Head.
    pub kernel_stride: Option<(usize, usize)>,
    pub repeat: usize,
    pub inputs: Vec<RowInput>,
}

/// Ordered rows plus the scaling knobs they were generated from.
#[derive(Debug, Clone)]
pub struct GraphDef {
    pub rows: Vec<GraphRow>,
    pub variant: Variant,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub block_type: BlockType,
    pub cc: f64,
}

fn scale_width(base: usize, mult: f64) -> usize {
    (((base as f64 * mult) + 0.5).floor() as usize).max(1)
}

fn scale_depth(base: usize, mult: f64) -> usize {
    (((base as f64 * mult) + 0.5).floor() as usize).max(1)
}

impl GraphDef {
    /// Instantiate the standard backbone/neck/head table for a config.
    pub fn from_config(cfg: &ModelConfig) -> GraphDef {
        let w = |f: usize| scale_width(f, cfg.width_mult);
        let d = |r: usize| scale_depth(r, cfg.depth_mult);
        let block = match cfg.block_type {
            BlockType::RepBlock => RowKind::RepBlock,
            BlockType::CspStackRep => RowKind::CspStackRep,
        };
        use RowInput::{Image, Row};
        let conv = |f, input| GraphRow {
            kind: RowKind::Conv,
            filters: vec![w(f)],
            kernel_stride: Some((3, 2)),
            repeat: 1,
            inputs: vec![input],
        };
        let blk = |f, r, input| GraphRow {
            kind: block,
            filters: vec![w(f)],
            kernel_stride: Some((1, 1)),
            repeat: d(r),
            inputs: vec![input],
        };
        let csp = |f, input| GraphRow {
            kind: RowKind::CspStackRep,
            filters: vec![w(f)],
            kernel_stride: Some((1, 1)),
            repeat: d(1),
            inputs: vec![input],
        };
        let up = |input| GraphRow {
            kind: RowKind::Upsample,
            filters: vec![],
            kernel_stride: None,
            repeat: 1,
            inputs: vec![input],
        };
        let cat = |a, b| GraphRow {
            kind: RowKind::Concat,
            filters: vec![],
            kernel_stride: None,
            repeat: 1,
            inputs: vec![Row(a), Row(b)],
        };

        let rows = vec![
            conv(16, Image),   // 0: stem, /2
            conv(32, Row(0)),  // 1: /4
            blk(32, 1, Row(1)),
            conv(64, Row(2)),  // 3: /8
            blk(64, 2, Row(3)),  // 4: P3 feature
            conv(128, Row(4)), // 5: /16
            blk(128, 2, Row(5)), // 6: P4 feature
            conv(256, Row(6)), // 7: /32
            csp(256, Row(7)),  // 8: P5 feature
            up(Row(8)),        // 9
            cat(9, 6),         // 10
            blk(128, 1, Row(10)), // 11: top-down P4
            up(Row(11)),       // 12
            cat(12, 4),        // 13
            blk(64, 1, Row(13)), // 14: P3 out
            conv(64, Row(14)), // 15: /16 again
            cat(15, 11),       // 16
            blk(128, 1, Row(16)), // 17: P4 out
            conv(128, Row(17)), // 18: /32 again
            cat(18, 8),        // 19
            csp(256, Row(19)), // 20: P5 out
            GraphRow {
                kind: RowKind::Head,
                filters: vec![w(64), w(128), w(256)],
                kernel_stride: None,
                repeat: 1,
                inputs: vec![Row(14), Row(17), Row(20)],
            },
        ];
        GraphDef {
            rows,
            variant: cfg.variant,
            width_mult: cfg.width_mult,
            depth_mult: cfg.depth_mult,
            block_type: cfg.block_type,
            cc: cfg.cc,
        }
    }

    /// Structural validation: reference ordering, arity, and spatial
    /// consistency of Concat rows. Returns the per-row cumulative stride.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut strides: Vec<usize> = Vec::with_capacity(self.rows.len());
        let err = |row: usize, msg: String| Error::GraphDef { row, msg };
        for (i, r) in self.rows.iter().enumerate() {
            let mut in_strides = Vec::new();
            for inp in &r.inputs {
                match *inp {
                    RowInput::Image => in_strides.push(1usize),
                    RowInput::Row(j) => {
                        if j >= i {
                            return Err(err(i, format!("dangling input reference to row {j}")));
                        }
                        in_strides.push(strides[j]);
                    }
                }
            }
            let arity_ok = match r.kind {
                RowKind::Concat => r.inputs.len() == 2,
                RowKind::Head => r.inputs.len() == 3,
                _ => r.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(err(
                    i,
                    format!("{} has {} inputs", r.kind.label(), r.inputs.len()),
                ));
            }
            let out_stride = match r.kind {
                RowKind::Conv => {
                    let (_, s) = r
                        .kernel_stride
                        .ok_or_else(|| err(i, "Conv row needs kernel/stride".into()))?;
                    in_strides[0] * s
                }
                RowKind::RepBlock | RowKind::CspStackRep => in_strides[0],
                RowKind::Upsample => {
                    if in_strides[0] % 2 != 0 {
                        return Err(err(i, "Upsample above input resolution".into()));
                    }
                    in_strides[0] / 2
                }
                RowKind::Concat => {
                    if in_strides[0] != in_strides[1] {
                        return Err(err(
                            i,
                            format!(
                                "Concat inputs at different scales: /{} vs /{}",
                                in_strides[0], in_strides[1]
                            ),
                        ));
                    }
                    in_strides[0]
                }
                // the head has no single output stride; record its first input
                RowKind::Head => in_strides[0],
            };
            if matches!(
                r.kind,
                RowKind::Conv | RowKind::RepBlock | RowKind::CspStackRep
            ) && r.filters.len() != 1
            {
                return Err(err(i, "block rows carry exactly one width".into()));
            }
            if r.kind == RowKind::Head && r.filters.len() != 3 {
                return Err(err(i, "head row carries three widths".into()));
            }
            strides.push(out_stride);
        }
        Ok(strides)
    }

    /// Strides of the three head inputs (feature-map downscale factors).
    pub fn head_strides(&self) -> Result<Vec<usize>> {
        let strides = self.validate()?;
        let head = self
            .rows
            .iter()
            .position(|r| r.kind == RowKind::Head)
            .ok_or(Error::GraphDef {
                row: self.rows.len(),
                msg: "graph has no head row".into(),
            })?;
        Ok(self.rows[head]
            .inputs
            .iter()
            .map(|inp| match *inp {
                RowInput::Image => 1,
                RowInput::Row(j) => strides[j],
            })
            .collect())
    }

    /// Render rows in the layer-table format: (layer, filters, size, repeat,
    /// output size) for a square input extent.
    pub fn render_rows(&self, input: usize) -> Result<Vec<[String; 5]>> {
        let strides = self.validate()?;
        let mut out = Vec::with_capacity(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let filters = match r.kind {
                RowKind::Upsample | RowKind::Concat => "-".to_string(),
                _ => r
                    .filters
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
            };
            let size = match r.kind {
                RowKind::Upsample => "2 ×".to_string(),
                RowKind::Concat | RowKind::Head => "-".to_string(),
                _ => {
                    let (k, s) = r.kernel_stride.unwrap_or((1, 1));
                    format!("{k} × {k} / {s}")
                }
            };
            let outsize = if r.kind == RowKind::Head {
                r.inputs
                    .iter()
                    .map(|inp| {
                        let s = match *inp {
                            RowInput::Image => 1,
                            RowInput::Row(j) => strides[j],
                        };
                        format!("{0} × {0}", input / s)
                    })
                    .collect::<Vec<_>>()
                    .join(", ")
            } else {
                format!("{0} × {0}", input / strides[i])
            };
            out.push([
                r.kind.label().to_string(),
                filters,
                size,
                r.repeat.to_string(),
                outsize,
            ]);
        }
        Ok(out)
    }
}
