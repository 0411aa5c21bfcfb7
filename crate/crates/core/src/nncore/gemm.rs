//! Small dense matrix products on row-major slices.
//!
//! Every kernel accumulates each output element in ascending order of the
//! shared dimension, so results match a naive triple loop bit for bit.

use super::Real;

/// `c[m x n] += a[m x k] * b[k x n]`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (q, &aiq) in arow.iter().enumerate() {
            let brow = &b[q * n..(q + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aiq * bv;
            }
        }
    }
}

/// `c[k x n] += a^T * b` for `a[m x k]`, `b[m x n]`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (q, &aiq) in arow.iter().enumerate() {
            if aiq == T::zero() {
                continue;
            }
            let crow = &mut c[q * n..(q + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aiq * bv;
            }
        }
    }
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        let mut d = [0.0; 9];
        // a^T (3x2) * a (2x3)
        matmul_tn_acc(&a, &a, &mut d, 2, 3, 3);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
