//! Real scalar abstraction shared by the codec and the predictor.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Strided read-only matrix view: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Debug, Clone, Copy)]
pub struct View<'a, S> {
    pub data: &'a [S],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> View<'a, S> {
    /// Row-major contiguous matrix with `cols` columns.
    pub fn rows(data: &'a [S], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rs: self.cs, cs: self.rs }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` where `a` is m×k, `b` is k×n and `c` is
    /// m×n with row stride `c_rs`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: View<Self>, b: View<Self>, beta: Self, c: &mut [Self], c_rs: usize);

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

fn check_out<S>(c: &[S], m: usize, n: usize, c_rs: usize) {
    if m > 0 && n > 0 {
        assert!((m - 1) * c_rs + n - 1 < c.len(), "output matrix out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: View<Self>, b: View<Self>, beta: Self, c: &mut [Self], c_rs: usize) {
                a.check(m, k);
                b.check(k, n);
                check_out(c, m, n, c_rs);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr(),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_rs as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
