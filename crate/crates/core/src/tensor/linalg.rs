//! Small dense kernels backing conv2d and the attention matmuls.

use super::Scalar;

/// `c += a * b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
///
/// Loop order m-k-n keeps the inner loop contiguous over both `b` and `c`,
/// which is what the autovectorizer wants.
pub fn matmul_accum<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_il * b_row[j];
            }
        }
    }
}

/// `out[j,i] = a[i,j]` for row-major `a: [m,n]`.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Accumulates `da += dc * b^T` without materialising `b^T`:
/// `da[i,l] += sum_j dc[i,j] * b[l,j]`.
pub fn matmul_accum_bt<T: Scalar>(
    da: &mut [T],
    dc: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(da.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + dc_row[j] * b_row[j];
            }
            da_row[l] = da_row[l] + acc;
        }
    }
}

/// Accumulates `db += a^T * dc`: `db[l,j] += sum_i a[i,l] * dc[i,j]`.
pub fn matmul_accum_at<T: Scalar>(
    db: &mut [T],
    a: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(db.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == T::zero() {
                continue;
            }
            let db_row = &mut db[l * n..(l + 1) * n];
            for j in 0..n {
                db_row[j] = db_row[j] + a_il * dc_row[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let mut c = vec![0.0; m * n];
        matmul_accum(&mut c, &a, &b, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 2.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 0.7 * i as f64).collect();
        let dc: Vec<f64> = (0..m * n).map(|i| 1.0 - 0.2 * i as f64).collect();

        let mut da = vec![0.0; m * k];
        matmul_accum_bt(&mut da, &dc, &b, m, k, n);
        let want_da = naive(&dc, &transpose(&b, k, n), m, n, k);
        for (x, y) in da.iter().zip(&want_da) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut db = vec![0.0; k * n];
        matmul_accum_at(&mut db, &a, &dc, m, k, n);
        let want_db = naive(&transpose(&a, m, k), &dc, k, m, n);
        for (x, y) in db.iter().zip(&want_db) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
