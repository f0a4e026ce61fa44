//! Small dense helpers shared by the estimators.

use nalgebra::DMatrix;

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise (tree) summation. The split points depend only on the length,
/// so the result is a pure function of the input order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..len`.
pub fn pairwise_sum_by(len: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            return (lo..hi).fold(0.0, |acc, i| acc + f(i));
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, len, f)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Moore–Penrose pseudo-inverse.
///
/// Singular values at or below `rel_tol` times the largest singular value
/// (the spectral norm) are treated as zero. Returns the inverse and the
/// numerical rank.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, s| a.max(*s));
    if smax == 0.0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let cutoff = rel_tol * smax;
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut out = DMatrix::zeros(cols, rows);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        rank += 1;
        let inv = 1.0 / s;
        for i in 0..cols {
            let vik = v_t[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                out[(i, j)] += vik * u[(j, k)];
            }
        }
    }
    (out, rank)
}

/// Frobenius inner product `<a, b>`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_exact_values() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum_by(v.len(), &|i| v[i]), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn pairwise_beats_naive_on_drift() {
        let v = vec![0.1; 1_000_000];
        let naive: f64 = v.iter().sum();
        let pw = pairwise_sum(&v);
        assert!((pw - 100_000.0).abs() < (naive - 100_000.0).abs());
        assert!((pw - 100_000.0).abs() < 1e-8);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let (p, rank) = pinv(&m, 1e-10);
        assert_eq!(rank, 2);
        let id = &m * &p;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn pinv_of_singular_block() {
        // diag(0, 0, a, b), the shape of h h^T for both benchmark vehicles
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 0.0, 0.01, 0.04]));
        let (p, rank) = pinv(&m, 1e-10);
        assert_eq!(rank, 2);
        assert!((p[(2, 2)] - 100.0).abs() < 1e-9);
        assert!((p[(3, 3)] - 25.0).abs() < 1e-9);
        assert_eq!(p[(0, 0)], 0.0);
        // Penrose conditions
        assert!((&m * &p * &m - &m).abs().max() < 1e-14);
        assert!((&p * &m * &p - &p).abs().max() < 1e-9);
    }

    #[test]
    fn pinv_rectangular() {
        let m = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        let (p, rank) = pinv(&m, 1e-10);
        assert_eq!(rank, 2);
        assert_eq!(p.shape(), (2, 3));
        assert!((&p * &m - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }
}
