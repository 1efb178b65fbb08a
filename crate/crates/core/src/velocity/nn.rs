//! Dense layer primitives with explicit backward passes.
//!
//! Matrices are row-major slices; products go through `matrixmultiply`,
//! which accepts arbitrary strides, so transposes and per-head slices of a
//! packed buffer never need to be materialized.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c ← alpha·a·b + beta·c` on raw strided storage.
    ///
    /// # Safety
    /// Every addressed element of `a`, `b`, `c` must be in bounds and `c`
    /// must not alias `a` or `b`.
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

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every float type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
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

impl Scalar for f64 {
    unsafe fn gemm_raw(
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

/// Strided read-only matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> View<'a, F> {
    pub(crate) fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub(crate) fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(
            extent(rows, cols, rs, cs) <= data.len(),
            "view {rows}x{cols} (rs {rs}, cs {cs}) exceeds {} elements",
            data.len()
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c ← a·b + beta·c`, where `c` is `a.rows × b.cols` with row stride `rsc`.
pub(crate) fn gemm<F: Scalar>(a: View<'_, F>, b: View<'_, F>, c: &mut [F], rsc: usize, beta: F) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(extent(m, n, rsc, 1) <= c.len(), "output view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the extents of all three views were checked against their
    // slices, and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub dims: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![F::zero(); dims.iter().product()],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.dims)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let w = self.dims[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| G::of(v.f64())).collect(),
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.dims[0]
    }

    pub fn output(&self) -> usize {
        self.weight.dims[1]
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let (i, o) = (self.input(), self.output());
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.data);
        }
        gemm(View::new(x, rows, i), View::new(&self.weight.data, i, o), &mut y, o, F::one());
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// requested.
    pub fn backward(
        &self,
        x: &[F],
        dy: &[F],
        rows: usize,
        grad: &mut Linear<F>,
        want_dx: bool,
    ) -> Option<Vec<F>> {
        let (i, o) = (self.input(), self.output());
        gemm(
            View::new(x, rows, i).t(),
            View::new(dy, rows, o),
            &mut grad.weight.data,
            o,
            F::one(),
        );
        for r in 0..rows {
            for (g, &d) in grad.bias.data.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![F::zero(); rows * i];
            gemm(
                View::new(dy, rows, o),
                View::new(&self.weight.data, i, o).t(),
                &mut dx,
                i,
                F::zero(),
            );
            dx
        })
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Row-wise normalization without affine parameters. Returns the
/// normalized rows and each row's reciprocal standard deviation.
pub(crate) fn layer_norm<F: Scalar>(x: &[F], width: usize) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / width;
    let mut out = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_w = F::of(1.0 / width as f64);
    let eps = F::of(LN_EPS);
    for (row, o) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mean = row.iter().copied().sum::<F>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_w;
        let r = (var + eps).sqrt().recip();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

/// Adds `dL/dx` of [`layer_norm`] into `dx`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    xhat: &[F],
    rstd: &[F],
    dy: &[F],
    width: usize,
    dx: &mut [F],
) {
    let inv_w = F::of(1.0 / width as f64);
    for (r, ((xh, g), out)) in xhat
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .enumerate()
    {
        let mean_g = g.iter().copied().sum::<F>() * inv_w;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() * inv_w;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o += rstd[r] * (gi - mean_g - xi * mean_gx);
        }
    }
}

#[inline]
pub(crate) fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad<F: Scalar>(x: F) -> F {
    let s = (F::one() + (-x).exp()).recip();
    s * (F::one() + x * (F::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + fast_tanh(inner))
}

// libm tanh is several times slower than exp and dominates the MLP otherwise.
#[inline]
fn fast_tanh<F: Scalar>(u: F) -> F {
    let two = F::of(2.0);
    two / (F::one() + (-two * u).exp()) - F::one()
}

#[inline]
pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let th = fast_tanh(c * (x + a * x * x * x));
    let half = F::of(0.5);
    half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// In-place numerically stable softmax of each `width`-wide row.
pub(crate) fn softmax_rows<F: Scalar>(x: &mut [F], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
