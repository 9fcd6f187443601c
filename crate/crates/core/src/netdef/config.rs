//! Model configuration: variants, scaling multipliers, and the structured
//! text format they persist in.

use crate::error::{arg_err, Result};
use crate::tensor::Activation;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    N,
    S,
    M,
    L,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::N => "n",
            Variant::S => "s",
            Variant::M => "m",
            Variant::L => "l",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "n" => Ok(Variant::N),
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            "l" => Ok(Variant::L),
            other => Err(arg_err("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockType {
    RepBlock,
    CspStackRep,
}

impl BlockType {
    pub fn name(self) -> &'static str {
        match self {
            BlockType::RepBlock => "repblock",
            BlockType::CspStackRep => "cspstackrep",
        }
    }
}

impl std::str::FromStr for BlockType {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<BlockType> {
        match s {
            "repblock" => Ok(BlockType::RepBlock),
            "cspstackrep" => Ok(BlockType::CspStackRep),
            other => Err(arg_err("block_type", format!("unknown block type `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a model skeleton. The variant presets give
/// the small model the single-path RepBlock layout and move the larger ones
/// onto CSPStackRep blocks with their channel coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub block_type: BlockType,
    pub cc: f64,
    pub num_classes: usize,
    pub activation: Activation,
    pub reg_max: usize,
}

impl ModelConfig {
    pub fn for_variant(v: Variant) -> ModelConfig {
        let (width_mult, depth_mult, block_type, cc, reg_max) = match v {
            Variant::N => (1.0, 1.0, BlockType::RepBlock, 0.5, 0),
            Variant::S => (2.0, 1.0, BlockType::RepBlock, 0.5, 0),
            Variant::M => (3.0, 1.5, BlockType::CspStackRep, 2.0 / 3.0, 16),
            Variant::L => (4.0, 2.0, BlockType::CspStackRep, 0.5, 16),
        };
        ModelConfig {
            variant: v,
            width_mult,
            depth_mult,
            block_type,
            cc,
            num_classes: 80,
            activation: Activation::Relu,
            reg_max,
        }
    }

    /// Channels of the box-regression map per scale.
    pub fn box_channels(&self) -> usize {
        if self.reg_max == 0 {
            4
        } else {
            4 * (self.reg_max + 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_mult <= 0.0 || self.depth_mult <= 0.0 {
            return Err(arg_err("model_config", "multipliers must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cc) || self.cc == 0.0 {
            return Err(arg_err("model_config", "cc must be in (0, 1]"));
        }
        if self.num_classes == 0 {
            return Err(arg_err("model_config", "num_classes must be positive"));
        }
        Ok(())
    }

    /// Key/value representation (config files and checkpoint metadata).
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("variant".into(), self.variant.name().into()),
            ("width_mult".into(), format!("{}", self.width_mult)),
            ("depth_mult".into(), format!("{}", self.depth_mult)),
            ("block_type".into(), self.block_type.name().into()),
            ("cc".into(), format!("{}", self.cc)),
            ("num_classes".into(), format!("{}", self.num_classes)),
            (
                "activation".into(),
                match self.activation {
                    Activation::Relu => "relu".into(),
                    Activation::Silu => "silu".into(),
                    Activation::Lrelu => "lrelu".into(),
                },
            ),
            ("reg_max".into(), format!("{}", self.reg_max)),
        ]
    }

    /// Apply one key/value pair; unknown keys are rejected.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| arg_err("model_config", format!("invalid value `{v}` for {k}"));
        match key {
            "variant" => {
                let v: Variant = value.parse()?;
                *self = ModelConfig {
                    num_classes: self.num_classes,
                    activation: self.activation,
                    ..ModelConfig::for_variant(v)
                };
            }
            "width_mult" => self.width_mult = value.parse().map_err(|_| bad(key, value))?,
            "depth_mult" => self.depth_mult = value.parse().map_err(|_| bad(key, value))?,
            "block_type" => self.block_type = value.parse()?,
            "cc" => {
                self.cc = match value {
                    "1/2" => 0.5,
                    "2/3" => 2.0 / 3.0,
                    other => other.parse().map_err(|_| bad(key, value))?,
                }
            }
            "num_classes" => self.num_classes = value.parse().map_err(|_| bad(key, value))?,
            "activation" => self.activation = value.parse()?,
            "reg_max" => self.reg_max = value.parse().map_err(|_| bad(key, value))?,
            other => {
                return Err(arg_err(
                    "model_config",
                    format!("unknown config key `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// Parse the structured text format: one `key = value` per line,
    /// `#` comments. A `variant` line resets the preset, so it should come
    /// first when combined with overrides.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::for_variant(Variant::N);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                arg_err(
                    "model_config",
                    format!("line {}: expected `key = value`", lineno + 1),
                )
            })?;
            cfg.set_kv(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
