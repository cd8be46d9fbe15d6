use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c ← a·b + beta·c` for strided row/column-major views.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are given as
    /// `(row_stride, col_stride)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        beta: Self,
        c: &mut [Self],
        sc: (usize, usize),
    );

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every float type")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float converts to f64")
    }

    /// Bit pattern widened to 64 bits, for exact comparisons.
    fn bits(self) -> u64;

    const NAME: &'static str;
}

fn check_extent(len: usize, rows: usize, cols: usize, s: (usize, usize)) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * s.0 + (cols - 1) * s.1;
        assert!(last < len, "gemm view exceeds buffer ({last} >= {len})");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $name:literal) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                beta: Self,
                c: &mut [Self],
                sc: (usize, usize),
            ) {
                check_extent(a.len(), m, k, sa);
                check_extent(b.len(), k, n, sb);
                check_extent(c.len(), m, n, sc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel is bounded by the
                // extent checks above, and `c` does not alias `a` or `b`
                // because it is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    );
                }
            }

            fn bits(self) -> u64 {
                self.to_bits() as u64
            }

            const NAME: &'static str = $name;
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, "f32");
impl_scalar!(f64, matrixmultiply::dgemm, "f64");
