//! Minimal deterministic NCHW tensor engine.
//!
//! Tensors are rank-4, contiguous, row-major `f32` arrays. All operations are
//! pure functions: identical inputs produce bit-identical outputs. Reductions
//! inside convolutions accumulate in `f64` with a fixed order, so results do
//! not depend on thread count or call site.

mod ops;
mod tape;

pub use ops::{
    activation, add, batchnorm_infer, concat_channels, conv2d, conv2d_direct, fake_quantize_slice,
    sigmoid, upsample_nearest2x, Activation, PadMode,
};
pub use tape::{Tape, Var};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::Rng;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

/// Global NaN/Inf scan toggle: on by default, turned off for benchmarks.
static CHECKED: AtomicBool = AtomicBool::new(true);

pub fn set_checked(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked_enabled() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

static CHECKED_SCOPE_LOCK: std::sync::OnceLock<std::sync::Mutex<()>> = std::sync::OnceLock::new();

/// Set checked mode for a scope, serialized against other scopes so that
/// concurrently running tests cannot observe each other's toggles. The
/// previous mode is restored on drop.
pub fn checked_scope(on: bool) -> CheckedScope {
    let guard = CHECKED_SCOPE_LOCK
        .get_or_init(|| std::sync::Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    let prev = checked_enabled();
    set_checked(on);
    CheckedScope { prev, _guard: guard }
}

pub struct CheckedScope {
    prev: bool,
    _guard: std::sync::MutexGuard<'static, ()>,
}

impl Drop for CheckedScope {
    fn drop(&mut self) {
        set_checked(self.prev);
    }
}

/// (n, c, h, w) dimensions of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Spatial size of a convolution output: floor((h + 2p - k)/s) + 1.
    pub fn conv_out(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = extent + 2 * padding;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous NCHW float tensor. Cloning is cheap (shared storage); mutation
/// goes through [`Tensor::data_mut`] which unshares on demand.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "tensor",
                format!("{} values for {shape}", shape.numel()),
                data.len(),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor {
            data: Arc::new(vec![0.0; shape.numel()]),
            shape,
            requires_grad: false,
        }
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor {
            data: Arc::new(vec![value; shape.numel()]),
            shape,
            requires_grad: false,
        }
    }

    /// Scalar tensor of shape (1,1,1,1).
    pub fn scalar(value: f32) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    /// Gaussian init, deterministic under the caller's generator.
    pub fn randn(shape: Shape, rng: &mut Rng, mean: f32, std: f32) -> Tensor {
        let data = (0..shape.numel())
            .map(|_| mean + std * rng.normal() as f32)
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// Uniform init in [lo, hi), deterministic under the caller's generator.
    pub fn rand_uniform(shape: Shape, rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
        let data = (0..shape.numel())
            .map(|_| rng.range(lo as f64, hi as f64) as f32)
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view; unshares the buffer if other handles are alive.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// One (n, c) plane as a slice of h*w values.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let s = self.shape;
        let hw = s.h * s.w;
        &self.data[(n * s.c + c) * hw..][..hw]
    }

    /// Rejects NaN/Inf when checked mode is on.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if checked_enabled() && !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Convolution parameters: weight is (c_out, c_in, k, k) with k in {1, 3},
/// bias (when present) one value per output channel.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: ops::PadMode,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<ConvParams> {
        let ws = weight.shape();
        if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
            return Err(arg_err(
                "conv_params",
                format!("kernel must be 1x1 or 3x3, got {}x{}", ws.h, ws.w),
            ));
        }
        if stride == 0 {
            return Err(arg_err("conv_params", "stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.numel() != ws.n {
                return Err(shape_err("conv_params", format!("bias of {} values", ws.n), b.numel()));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
            pad_mode: ops::PadMode::Zeros,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn k(&self) -> usize {
        self.weight.shape().h
    }

    /// Trainable value count: weights plus bias.
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Inference-mode batch-norm parameters; gamma/beta are trainable, the
/// running statistics are buffers.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    /// Identity transform over `c` channels (gamma 1, beta 0, mean 0, var 1).
    pub fn identity(c: usize) -> BnParams {
        BnParams {
            gamma: Tensor::full(Shape::new(1, c, 1, 1), 1.0),
            beta: Tensor::zeros(Shape::new(1, c, 1, 1)),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.numel() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(shape_err(
                "bn_params",
                format!("{c} values per sequence"),
                format!(
                    "beta {}, mean {}, var {}",
                    self.beta.numel(),
                    self.running_mean.len(),
                    self.running_var.len()
                ),
            ));
        }
        if self.eps <= 0.0 {
            return Err(arg_err("bn_params", "eps must be positive"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(arg_err("bn_params", "running_var must be non-negative"));
        }
        Ok(())
    }
}
