//! Minimal reverse-mode building blocks: NCHW tensors, convolution and
//! fully-connected layers with explicit backward passes, and Adam.
//!
//! Layers do not keep activation caches; callers hold on to the forward
//! inputs/outputs they need and hand them back to `backward`. Gradients
//! accumulate into each [`Param`] until [`zero_grads`] is called.

mod adam;
mod conv;
mod linear;
mod tensor;

pub use adam::{Adam, AdamState};
pub use conv::Conv2d;
pub use linear::Linear;
pub use tensor::Tensor;

use rand::Rng;

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform `[-bound, bound]` initialization.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns trainable parameters, visited in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

pub fn zero_grads<P: Parameterized + ?Sized>(module: &mut P) {
    for p in module.params_mut() {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` where the ReLU output was zero.
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element type of a matrix product.
pub trait Scalar: Copy + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_rs: isize,
        a_cs: isize,
        b: *const Self,
        b_rs: isize,
        b_cs: isize,
        beta: Self,
        c: *mut Self,
        c_rs: isize,
    );
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        a_rs: isize,
        a_cs: isize,
        b: *const f64,
        b_rs: isize,
        b_cs: isize,
        beta: f64,
        c: *mut f64,
        c_rs: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, a_rs, a_cs, b, b_rs, b_cs, beta, c, c_rs, 1);
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        a_rs: isize,
        a_cs: isize,
        b: *const f32,
        b_rs: isize,
        b_cs: isize,
        beta: f32,
        c: *mut f32,
        c_rs: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, a_rs, a_cs, b, b_rs, b_cs, beta, c, c_rs, 1);
    }
}

/// `c = a(m x k) * b(k x n) + beta * c`, with arbitrary strides for a and b.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_rs: usize,
    a_cs: usize,
    b: &[T],
    b_rs: usize,
    b_cs: usize,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
        assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}
