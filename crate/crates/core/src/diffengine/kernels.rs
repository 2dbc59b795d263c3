//! Dense kernels with a fixed accumulation order: every output element sums
//! its terms in ascending index order, independent of blocking.

/// `out[m x n] += a[m x k] * b[k x n]`.
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            axpy(s, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`.
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            axpy(s, brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |acc, (a, b)| acc + a * b)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// For each element of an array of `shape`, the flat index it maps to when
/// axis `a` advances by `target_strides[a]` (0 drops the axis).
pub fn index_map(shape: &[usize], target_strides: &[usize]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for a in (0..shape.len()).rev() {
            counter[a] += 1;
            cur += target_strides[a];
            if counter[a] < shape[a] {
                break;
            }
            cur -= target_strides[a] * counter[a];
            counter[a] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        mm_nn(&a, &b, &mut c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
        // a^T b via mm_tn on the stored a equals mm_nn on the explicit transpose
        let b2: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect(); // 2x4
        let mut via_tn = vec![0.0; 12];
        mm_tn(&a, &b2, &mut via_tn, 2, 3, 4);
        let mut via_nn = vec![0.0; 12];
        mm_nn(&transpose(&a, 2, 3), &b2, &mut via_nn, 3, 2, 4);
        assert_eq!(via_tn, via_nn);
    }

    #[test]
    fn index_map_permutes() {
        // 2x3 -> transpose strides (1, 2)
        assert_eq!(index_map(&[2, 3], &[1, 2]), vec![0, 2, 4, 1, 3, 5]);
        assert_eq!(index_map(&[2, 3], &[0, 1]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(index_map(&[], &[]), vec![0]);
    }
}
