//! A small CPU neural-network toolkit: flat parameter vectors, explicit
//! forward/backward kernels, and the AdamW optimiser with plateau scheduling.
//!
//! Networks own a `ParamLayout` describing where each layer's weights live in
//! a single flat `Vec<T>`. Gradients use the same layout, which makes
//! per-sample gradient accumulation, optimiser updates and checkpointing
//! plain slice operations.

mod layers;
mod optim;

pub use layers::{
    concat_label_maps, global_avg_pool, global_avg_pool_backward, sigmoid, silu, silu_grad,
    take_channels, upsample2, upsample2_backward, Conv2d, Linear, MaxPool2,
};
pub use optim::{AdamW, AdamWConfig, EpochOutcome, Schedule, ScheduleConfig};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Floating-point element type of a network.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` on row-major buffers.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`
/// when `trans_b`), and `c` as `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above; strides describe in-bounds views.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Channel-major feature map `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self, NnError> {
        if data.len() != c * h * w {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for a {c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// How a parameter block is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, for layers followed by SiLU.
    He { fan_in: usize },
    /// Uniform in `±1 / sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
}

impl Init {
    fn bound(self) -> f64 {
        match self {
            Init::He { fan_in } => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::Uniform { fan_in } => 1.0 / (fan_in.max(1) as f64).sqrt(),
            Init::Zeros => 0.0,
        }
    }
}

/// Allocates ranges in a flat parameter vector and remembers how to
/// initialise each one.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    len: usize,
    blocks: Vec<(Range<usize>, Init)>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, n: usize, init: Init) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        self.blocks.push((r.clone(), init));
        r
    }

    pub fn conv(
        &mut self,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        he: bool,
    ) -> Conv2d {
        let fan_in = in_c * kernel * kernel;
        let init = if he {
            Init::He { fan_in }
        } else {
            Init::Uniform { fan_in }
        };
        let weight = self.alloc(out_c * fan_in, init);
        let bias = self.alloc(out_c, Init::Uniform { fan_in });
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn linear(&mut self, in_dim: usize, out_dim: usize, he: bool) -> Linear {
        let init = if he {
            Init::He { fan_in: in_dim }
        } else {
            Init::Uniform { fan_in: in_dim }
        };
        let weight = self.alloc(out_dim * in_dim, init);
        let bias = self.alloc(out_dim, Init::Uniform { fan_in: in_dim });
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Deterministic initial parameters for `seed`.
    pub fn initialize<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); self.len];
        for (range, init) in &self.blocks {
            let bound = init.bound();
            if bound == 0.0 {
                continue;
            }
            for p in &mut params[range.clone()] {
                *p = T::of(rng.gen_range(-bound..bound));
            }
        }
        params
    }
}

/// `acc += g`, elementwise.
pub fn accumulate<T: Real>(acc: &mut [T], g: &[T]) {
    assert_eq!(acc.len(), g.len());
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}
