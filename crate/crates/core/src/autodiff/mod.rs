//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Parameters live in [`Tensor`]s. A forward pass binds them onto a
//! [`Tape`] (as trainable leaves or constants depending on
//! `requires_grad`), records primitive applications, and
//! [`Tape::backward`] returns the gradients of every trainable leaf.
//! Frozen leaves are never differentiated: nodes whose inputs are all
//! constant are skipped on the way back.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, grad_check};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Floating-point element type of tensors and tapes.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn cst(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Hyperbolic tangent used by GELU. Single precision uses a rational
    /// approximation (max error ~1e-7) that vectorizes; double precision is
    /// exact so gradient checks see the true function.
    fn gelu_tanh(self) -> Self;

    /// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
    /// `m×k` and `op(b)` is `k×n`. A transposed operand is stored with its
    /// dimensions swapped.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $gemm:path, $tanh:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            fn cst(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gelu_tanh(self) -> Self {
                $tanh(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths were checked against the extents
                // above and the strides address only those elements.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, matrixmultiply::sgemm, rational_tanh);
impl_scalar!(f64, Precision::Double, matrixmultiply::dgemm, f64::tanh);

/// Odd rational minimax fit of `tanh` on `[-7.9988, 7.9988]`.
fn rational_tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.998_811_7;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p: f32 = -2.760_768_5e-16;
    p = p * x2 + 2.000_187_9e-13;
    p = p * x2 - 8.604_671_5e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_3e-4;
    p = p * x2 + 4.893_524_6e-3;
    let mut q: f32 = 1.198_258_4e-6;
    q = q * x2 + 1.185_347_1e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    x * p / q
}
