//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are `[N, C, H, W]` (`Array4`) or `[N, F]` (`Array2`) in `f64`. Each layer
//! has a read-only `infer` path and a `forward_train` / `backward` pair; `forward_train`
//! caches what `backward` needs, and `backward` accumulates into `Param::grad`.
//! Everything runs single-threaded in a fixed order, so results are bit-reproducible.

mod adam;
mod conv;
mod linear;
mod norm;

pub use adam::Adam;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;
pub use norm::BatchNorm2d;

use ndarray::{linalg::general_mat_mul, Array2, Array4, ArrayView2, ArrayViewMut2};
use rand::Rng as _;

use crate::rng::Rng;

/// A learnable array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub(crate) fn matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.value).expect("param shape")
    }

    pub(crate) fn grad_matrix(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).expect("param shape")
    }
}

/// Non-learnable state that still belongs to a model (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Visitor over a module's named arrays, used for checkpoints and fingerprints.
pub trait NamedArrays {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut Vec<f64>));
}

/// Modules exposing their learnable parameters in a fixed order.
pub trait Trainable {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// `c = alpha * a · b + beta * c`.
pub(crate) fn gemm(
    alpha: f64,
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    beta: f64,
    c: &mut ArrayViewMut2<'_, f64>,
) {
    general_mat_mul(alpha, a, b, beta, c);
}

/// `[N, C, H, W]` to channel-major `[C, N·H·W]`.
pub(crate) fn to_channel_major(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array2::zeros((c, n * hw));
    let dst = out.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for ci in 0..c {
            let s = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            dst[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub(crate) fn from_channel_major(m: &Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    let hw = h * w;
    let src = m.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for ci in 0..c {
            dst[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&src[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]);
        }
    }
    out
}

pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu4_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
