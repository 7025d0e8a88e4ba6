//! Small fixed-architecture CNN engine: conv / relu / maxpool / dense /
//! concatenating skip blocks with hand-written reverse passes, MSE loss and Adam.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

mod gradcheck;
mod io;
mod net;
mod optim;

pub use gradcheck::{check_layer_kinds, check_network, relative_error, GradCheckReport, LayerKind};
pub use io::{load_model, read_model, save_model, write_model, ModelHeader};
pub use net::{Network, Saved};
pub use optim::{adam_step, init_params, mse_loss, AdamState, OptimizerSpec};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("unknown architecture preset {0:?}")]
    UnknownPreset(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scalar type the engine runs on.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// All strided accesses must stay inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert!(c.len() >= a.rows * b.cols, "gemm output too small");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in &mut c[..a.rows * b.cols] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: bounds were checked above for every operand.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Activation shape of one example: channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A batch of examples stored example-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub batch: usize,
    pub shape: Shape,
    pub values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(batch: usize, shape: Shape, values: Vec<T>) -> Result<Self, NnError> {
        if values.len() != batch * shape.len() {
            return Err(NnError::Shape(format!(
                "{} values for {batch} examples of {shape}",
                values.len()
            )));
        }
        Ok(Self { batch, shape, values })
    }

    pub fn zeros(batch: usize, shape: Shape) -> Self {
        Self { batch, shape, values: vec![T::zero(); batch * shape.len()] }
    }

    pub fn example(&self, i: usize) -> &[T] {
        let n = self.shape.len();
        &self.values[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { kernel: usize, in_ch: usize, out_ch: usize, stride: usize, pad: usize },
    Relu,
    /// 2x2 windows, stride 2.
    Maxpool,
    /// Flattens its input.
    Dense { inputs: usize, outputs: usize },
    /// Output is the channel concatenation of the input and `block(input)`.
    ConcatSkip { block: Vec<LayerSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

/// Number of regression outputs of a pose estimator.
pub const POSE_OUTPUTS: usize = 5;

impl NetSpec {
    /// Named architecture for a square single-channel input of side `size`.
    pub fn preset(name: &str, size: usize) -> Result<Self, NnError> {
        let conv = |i, o| LayerSpec::Conv { kernel: 3, in_ch: i, out_ch: o, stride: 1, pad: 1 };
        let flat = 32 * (size / 8) * (size / 8);
        let head = [
            LayerSpec::Dense { inputs: flat, outputs: 64 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 64, outputs: POSE_OUTPUTS },
        ];
        let mut layers = match name {
            "conv-small" => vec![
                conv(1, 8),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                conv(8, 16),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                conv(16, 32),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
            ],
            "conv-dense" => vec![
                conv(1, 8),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::ConcatSkip { block: vec![conv(8, 8), LayerSpec::Relu] },
                conv(16, 16),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
                LayerSpec::ConcatSkip { block: vec![conv(16, 16), LayerSpec::Relu] },
                conv(32, 32),
                LayerSpec::Relu,
                LayerSpec::Maxpool,
            ],
            other => return Err(NnError::UnknownPreset(other.to_string())),
        };
        layers.extend(head);
        let spec = Self { input: Shape::new(1, size, size), layers };
        spec.output_shape()?;
        Ok(spec)
    }

    pub fn output_shape(&self) -> Result<Shape, NnError> {
        propagate(self.input, &self.layers)
    }

    /// Shape check plus the pose-regressor output size.
    pub fn validate_regressor(&self) -> Result<(), NnError> {
        let out = self.output_shape()?;
        if out.len() != POSE_OUTPUTS {
            return Err(NnError::Spec(format!("final output has {} values, expected {POSE_OUTPUTS}", out.len())));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        fn count(layers: &[LayerSpec]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    LayerSpec::Conv { kernel, in_ch, out_ch, .. } => out_ch * in_ch * kernel * kernel + out_ch,
                    LayerSpec::Dense { inputs, outputs } => outputs * inputs + outputs,
                    LayerSpec::ConcatSkip { block } => count(block),
                    _ => 0,
                })
                .sum()
        }
        count(&self.layers)
    }
}

pub(crate) fn layer_output(input: Shape, layer: &LayerSpec) -> Result<Shape, NnError> {
    match layer {
        LayerSpec::Conv { kernel, in_ch, out_ch, stride, pad } => {
            if *in_ch != input.c {
                return Err(NnError::Spec(format!("conv expects {in_ch} channels, got {input}")));
            }
            if *kernel == 0 || *stride == 0 || *out_ch == 0 {
                return Err(NnError::Spec("conv kernel, stride and channels must be positive".into()));
            }
            if input.h + 2 * pad < *kernel || input.w + 2 * pad < *kernel {
                return Err(NnError::Spec(format!("conv kernel {kernel} larger than padded {input}")));
            }
            Ok(Shape::new(
                *out_ch,
                (input.h + 2 * pad - kernel) / stride + 1,
                (input.w + 2 * pad - kernel) / stride + 1,
            ))
        }
        LayerSpec::Relu => Ok(input),
        LayerSpec::Maxpool => {
            if input.h < 2 || input.w < 2 {
                return Err(NnError::Spec(format!("maxpool on {input}")));
            }
            Ok(Shape::new(input.c, input.h / 2, input.w / 2))
        }
        LayerSpec::Dense { inputs, outputs } => {
            if *inputs != input.len() {
                return Err(NnError::Spec(format!("dense expects {inputs} inputs, got {input}")));
            }
            if *outputs == 0 {
                return Err(NnError::Spec("dense with no outputs".into()));
            }
            Ok(Shape::flat(*outputs))
        }
        LayerSpec::ConcatSkip { block } => {
            let inner = propagate(input, block)?;
            if inner.h != input.h || inner.w != input.w {
                return Err(NnError::Spec(format!("skip block maps {input} to {inner}; spatial size must match")));
            }
            Ok(Shape::new(input.c + inner.c, input.h, input.w))
        }
    }
}

fn propagate(input: Shape, layers: &[LayerSpec]) -> Result<Shape, NnError> {
    if input.is_empty() {
        return Err(NnError::Spec("empty input shape".into()));
    }
    layers.iter().try_fold(input, layer_output)
}
