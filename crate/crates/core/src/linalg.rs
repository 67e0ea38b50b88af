//! Symmetric eigenvalue helpers.

use nalgebra::DMatrix;

use crate::tensor::Tensor;

fn square_dim(m: &Tensor) -> usize {
    match *m.shape() {
        [a, b] if a == b => a,
        _ => panic!("expected a square matrix, got {:?}", m.shape()),
    }
}

/// All eigenvalues of a symmetric matrix, ascending (full decomposition).
pub fn symmetric_eigenvalues(m: &Tensor) -> Vec<f64> {
    let n = square_dim(m);
    let mat = DMatrix::from_row_slice(n, n, m.data());
    let mut ev: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn matvec(m: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn dominant(m: &[f64], n: usize, max_iter: usize) -> f64 {
    // Deterministic, non-degenerate start vector.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_7).fract()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        matvec(m, n, &v, &mut w);
        let rq: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let resid = w.iter().zip(&v).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
        lambda = rq;
        if resid <= 1e-13 * rq.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / norm;
        }
    }
    lambda
}

/// `(lambda_min, lambda_max)` of a symmetric PSD matrix by power iteration:
/// on the matrix itself for the top eigenvalue, then on the shifted matrix
/// `lambda_max I - M` for the bottom one.
pub fn power_extreme_eigenvalues(m: &Tensor, max_iter: usize) -> (f64, f64) {
    let n = square_dim(m);
    let top = dominant(m.data(), n, max_iter);
    let mut shifted = m.data().iter().map(|v| -v).collect::<Vec<_>>();
    for i in 0..n {
        shifted[i * n + i] += top;
    }
    let gap = dominant(&shifted, n, max_iter);
    (top - gap, top)
}
