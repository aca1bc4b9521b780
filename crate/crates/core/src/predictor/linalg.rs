//! Scalar abstraction and strided GEMM shared by the transformer's `f32`
//! inference path and its `f64` gradient check.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn max(self, other: Self) -> Self {
        if other > self { other } else { self }
    }

    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
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
                $gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A row-major or transposed view of a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// `rows x cols` row-major with leading dimension `ld`.
    pub fn rm(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        View { data, rows, cols, rs: ld, cs: 1 }
    }

    /// Transpose of a row-major `cols x rows` matrix with leading dimension `ld`.
    pub fn tr(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        View { data, rows, cols, rs: 1, cs: ld }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `C = A·B + beta·C`, with `C` row-major `m x n` at leading dimension `ldc`.
pub fn gemm<T: Real>(a: View<T>, b: View<T>, beta: T, c: &mut [T], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() >= a.extent() && b.data.len() >= b.extent());
    assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// `A·B` for row-major `A: m x k`, `B: k x n`.
pub fn matmul<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(View::rm(a, m, k, k), View::rm(b, k, n, n), T::zero(), &mut c, n);
    c
}

/// `C += Aᵀ·B` for row-major `A: m x k`, `B: m x n`, `C: k x n`.
pub fn matmul_tn_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    gemm(View::tr(a, k, m, k), View::rm(b, m, n, n), T::one(), c, n);
}

/// `A·Bᵀ` for row-major `A: m x k`, `B: n x k`.
pub fn matmul_nt<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(View::rm(a, m, k, k), View::tr(b, k, n, k), T::zero(), &mut c, n);
    c
}

/// `C += A·Bᵀ`.
pub fn matmul_nt_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    gemm(View::rm(a, m, k, k), View::tr(b, k, n, k), T::one(), c, n);
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Gradient through a row softmax: `dS = A ⊙ (dA - rowsum(dA ⊙ A))`, written into `da`.
pub fn softmax_rows_backward<T: Real>(a: &[T], da: &mut [T], cols: usize) {
    for (ar, dr) in a.chunks(cols).zip(da.chunks_mut(cols)) {
        let mut dot = T::zero();
        for (&x, &g) in ar.iter().zip(dr.iter()) {
            dot += x * g;
        }
        for (g, &x) in dr.iter_mut().zip(ar) {
            *g = x * (*g - dot);
        }
    }
}

pub fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds a bias row to every row.
pub fn add_row<T: Real>(dst: &mut [T], bias: &[T]) {
    for row in dst.chunks_mut(bias.len()) {
        add_assign(row, bias);
    }
}

/// Accumulates the column sums of `src` into `dst`.
pub fn col_sum_acc<T: Real>(src: &[T], dst: &mut [T]) {
    for row in src.chunks(dst.len()) {
        add_assign(dst, row);
    }
}
