use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of the network: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a * b (+ c if accumulate)` on strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
                accumulate: bool,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index touched by the kernel lies inside the slices,
                // as checked above, and `c` does not alias `a` or `b`.
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `out[n x o] = x[n x i] * w[o x i]^T (+ bias)`.
pub fn linear<F: Scalar>(x: &[F], rows: usize, w: &[F], bias: Option<&[F]>, out: &mut [F], in_dim: usize, out_dim: usize) {
    F::gemm(
        rows,
        in_dim,
        out_dim,
        x,
        in_dim as isize,
        1,
        w,
        1,
        in_dim as isize,
        out,
        out_dim as isize,
        1,
        false,
    );
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(out_dim) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o = *o + *bv;
            }
        }
    }
}

/// Gradients of [`linear`]: `dx (+)= dy * w`, `dw += dy^T * x`, `db += colsum(dy)`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    w: &[F],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: Option<&mut [F]>,
    accumulate_dx: bool,
) {
    if let Some(dx) = dx {
        F::gemm(
            rows,
            out_dim,
            in_dim,
            dy,
            out_dim as isize,
            1,
            w,
            in_dim as isize,
            1,
            dx,
            in_dim as isize,
            1,
            accumulate_dx,
        );
    }
    F::gemm(
        out_dim,
        rows,
        in_dim,
        dy,
        1,
        out_dim as isize,
        x,
        in_dim as isize,
        1,
        dw,
        in_dim as isize,
        1,
        true,
    );
    if let Some(db) = db {
        for row in dy.chunks_exact(out_dim) {
            for (d, g) in db.iter_mut().zip(row) {
                *d = *d + *g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive() {
        let x: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let w: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 4x3
        let b = [0.1, 0.2, 0.3, 0.4];
        let mut out = vec![0.0; 8];
        linear(&x, 2, &w, Some(&b), &mut out, 3, 4);
        for r in 0..2 {
            for o in 0..4 {
                let want: f64 = (0..3).map(|i| x[r * 3 + i] * w[o * 3 + i]).sum::<f64>() + b[o];
                assert!((out[r * 4 + o] - want).abs() < 1e-12);
            }
        }
        let dy: Vec<f64> = (0..8).map(|v| v as f64 * 0.1).collect();
        let mut dx = vec![0.0; 6];
        let mut dw = vec![0.0; 12];
        let mut db = vec![0.0; 4];
        linear_backward(&dy, &x, &w, 2, 3, 4, Some(&mut dx), &mut dw, Some(&mut db), false);
        for r in 0..2 {
            for i in 0..3 {
                let want: f64 = (0..4).map(|o| dy[r * 4 + o] * w[o * 3 + i]).sum();
                assert!((dx[r * 3 + i] - want).abs() < 1e-12);
            }
        }
        for o in 0..4 {
            for i in 0..3 {
                let want: f64 = (0..2).map(|r| dy[r * 4 + o] * x[r * 3 + i]).sum();
                assert!((dw[o * 3 + i] - want).abs() < 1e-12);
            }
            assert!((db[o] - (dy[o] + dy[4 + o])).abs() < 1e-12);
        }
    }
}
