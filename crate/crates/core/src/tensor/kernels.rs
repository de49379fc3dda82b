//! Plain-loop matrix kernels used by the tape's forward and backward passes.
//!
//! Loop orders are chosen so every inner loop walks rows contiguously.

/// C[m,n] = A[m,k] * B[k,n]
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] += A[m,n] * B[k,n]^T  (dot products of rows; used for dL/dA)
pub fn gemm_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (used for dL/dB)
pub fn gemm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
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
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_agrees_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 - 0.7).collect();
        assert_eq!(gemm(&a, &b, m, k, n), naive(&a, &b, m, k, n));
    }

    #[test]
    fn gemm_nt_matches_explicit_transpose() {
        // C[m,k] = A[m,n] * B[k,n]^T
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f64> = (0..m * n).map(|i| (i as f64) * 0.2 - 0.9).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.4 - 2.1).collect();
        let mut c = vec![0.0; m * k];
        gemm_nt_acc(&a, &b, m, n, k, &mut c);
        let bt = transpose(&b, k, n);
        assert_eq!(c, naive(&a, &bt, m, n, k));
    }

    #[test]
    fn gemm_tn_matches_explicit_transpose() {
        // C[k,n] = A[m,k]^T * B[m,n]
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i as f64) * 0.1 - 0.7).collect();
        let mut c = vec![0.0; k * n];
        gemm_tn_acc(&a, &b, m, k, n, &mut c);
        let at = transpose(&a, m, k);
        assert_eq!(c, naive(&at, &b, k, m, n));
    }
}
