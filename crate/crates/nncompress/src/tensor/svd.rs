//! Singular value decomposition via one-sided Jacobi rotations.
//!
//! For an m x n input with m >= n, columns of a working copy are repeatedly
//! rotated in pairs until all are mutually orthogonal; the column norms are
//! then the singular values and the accumulated rotations give V. Wide
//! matrices are handled by factoring the transpose. The contract is
//! reconstruction and orthonormality to 1e-9, which Jacobi comfortably meets
//! at the sizes used here.

use super::Tensor;
use crate::error::{Error, Result};

/// Result of [`svd`]: `u` (m x r), `s` (r non-increasing, non-negative
/// singular values), `v` (n x r), with `u * diag(s) * v^T` reconstructing the
/// input and r = min(m, n).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Tensor,
    pub v: Tensor,
}

impl SvdResult {
    /// Number of singular values above `tol * s_max` (1e-12 by default rule).
    pub fn numerical_rank(&self) -> usize {
        let s = self.s.data();
        let s_max = s.first().copied().unwrap_or(0.0);
        if s_max == 0.0 {
            return 0;
        }
        s.iter().filter(|&&x| x > 1e-12 * s_max).count()
    }

    /// Rank-k truncation `u_k * diag(s_k) * v_k^T`.
    pub fn truncate(&self, k: usize) -> Result<Tensor> {
        let r = self.s.numel();
        if k > r {
            return Err(Error::Parameter(format!(
                "truncation rank {k} exceeds {r}"
            )));
        }
        let m = self.u.shape()[0];
        let n = self.v.shape()[0];
        let mut out = vec![0.0; m * n];
        let u = self.u.data();
        let v = self.v.data();
        let s = self.s.data();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += u[i * r + kk] * s[kk] * v[j * r + kk];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(&[m, n], out)
    }
}

/// Full SVD of a rank-2 tensor.
pub fn svd(m: &Tensor) -> Result<SvdResult> {
    if m.rank() != 2 {
        return Err(Error::Dimension(format!(
            "svd expects a rank-2 tensor, got {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input contains NaN or Inf".into()));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows >= cols {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(SvdResult { u, s, v })
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose()?)?;
        Ok(SvdResult { u: v, s, v: u })
    }
}

/// One-sided Jacobi on an m x n matrix with m >= n.
fn jacobi_tall(m: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    debug_assert!(rows >= cols);

    // Column-major working copies so column operations are contiguous.
    let mut a = vec![0.0; rows * cols]; // a[j * rows + i]
    for i in 0..rows {
        for j in 0..cols {
            a[j * rows + i] = m.data()[i * cols + j];
        }
    }
    let mut v = vec![0.0; cols * cols]; // v[j * cols + i]
    for j in 0..cols {
        v[j * cols + j] = 1.0;
    }

    const TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = column_pair(&a, rows, p, q);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, rows, p, q, c, s);
                rotate_pair(&mut v, cols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; order them non-increasing.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| {
            a[j * rows..(j + 1) * rows]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u_cols = vec![0.0; rows * cols];
    let mut v_cols = vec![0.0; cols * cols];
    let mut s_out = vec![0.0; cols];
    let mut zero_columns = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        s_out[dst] = norms[src];
        v_cols[dst * cols..(dst + 1) * cols]
            .copy_from_slice(&v[src * cols..(src + 1) * cols]);
        if norms[src] > 0.0 {
            for i in 0..rows {
                u_cols[dst * rows + i] = a[src * rows + i] / norms[src];
            }
        } else {
            zero_columns.push(dst);
        }
    }

    // Zero singular values leave U columns unconstrained; complete them to an
    // orthonormal set so the SvdResult invariants hold even for rank-deficient
    // input.
    if !zero_columns.is_empty() {
        complete_orthonormal(&mut u_cols, rows, cols, &zero_columns)?;
    }

    // Back to row-major.
    let u = Tensor::from_fn(&[rows, cols], |idx| {
        let (i, j) = (idx / cols, idx % cols);
        u_cols[j * rows + i]
    })?;
    let vt = Tensor::from_fn(&[cols, cols], |idx| {
        let (i, j) = (idx / cols, idx % cols);
        v_cols[j * cols + i]
    })?;
    Ok((u, Tensor::new(&[cols], s_out)?, vt))
}

fn column_pair(a: &[f64], rows: usize, p: usize, q: usize) -> (&[f64], &[f64]) {
    debug_assert!(p < q);
    let (head, tail) = a.split_at(q * rows);
    (&head[p * rows..(p + 1) * rows], &tail[..rows])
}

fn rotate_pair(a: &mut [f64], rows: usize, p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let (head, tail) = a.split_at_mut(q * rows);
    let cp = &mut head[p * rows..(p + 1) * rows];
    let cq = &mut tail[..rows];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Fill the listed columns with unit vectors orthogonal to every other column
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(
    cols_data: &mut [f64],
    rows: usize,
    cols: usize,
    missing: &[usize],
) -> Result<()> {
    let mut next_basis = 0usize;
    for &col in missing {
        let mut found = false;
        while next_basis < rows {
            let mut cand = vec![0.0; rows];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for other in 0..cols {
                if missing.contains(&other) && other >= col {
                    continue; // not yet filled
                }
                let oc = &cols_data[other * rows..(other + 1) * rows];
                let dot: f64 = cand.iter().zip(oc).map(|(a, b)| a * b).sum();
                for (c, &o) in cand.iter_mut().zip(oc) {
                    *c -= dot * o;
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, c) in cand.iter().enumerate() {
                    cols_data[col * rows + i] = c / norm;
                }
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Numeric(
                "failed to complete orthonormal basis for rank-deficient svd".into(),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_normal, Rng};

    fn reconstruction_error(m: &Tensor, r: &SvdResult) -> f64 {
        let full = r.truncate(r.s.numel()).unwrap();
        let num = m.sub(&full).unwrap().frobenius_norm();
        let denom = m.frobenius_norm();
        if denom == 0.0 {
            num
        } else {
            num / denom
        }
    }

    fn orthonormality_error(t: &Tensor) -> f64 {
        // max |Q^T Q - I|
        let g = t.transpose().unwrap().matmul(t).unwrap();
        let n = g.shape()[0];
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.at2(i, j) - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_singular_values() {
        let m = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let r = svd(&m).unwrap();
        assert!((r.s.data()[0] - 3.0).abs() < 1e-12);
        assert!((r.s.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let m = Tensor::zeros(&[3, 2]).unwrap();
        let r = svd(&m).unwrap();
        assert!(r.s.data().iter().all(|&x| x == 0.0));
        assert!(orthonormality_error(&r.u) < 1e-12);
        assert!(orthonormality_error(&r.v) < 1e-12);
        assert_eq!(r.numerical_rank(), 0);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = Rng::new(17);
        let m = rand_normal(&mut rng, &[5, 4], 0.0, 1.0).unwrap();
        let r = svd(&m).unwrap();
        assert!(reconstruction_error(&m, &r) < 1e-9);
        assert!(orthonormality_error(&r.u) < 1e-9);
        assert!(orthonormality_error(&r.v) < 1e-9);
    }

    #[test]
    fn wide_matrix() {
        let mut rng = Rng::new(23);
        let m = rand_normal(&mut rng, &[3, 7], 0.0, 1.0).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.u.shape(), &[3, 3]);
        assert_eq!(r.s.numel(), 3);
        assert_eq!(r.v.shape(), &[7, 3]);
        assert!(reconstruction_error(&m, &r) < 1e-9);
    }

    #[test]
    fn singular_values_sorted_nonnegative() {
        let mut rng = Rng::new(29);
        for _ in 0..5 {
            let m = rand_normal(&mut rng, &[6, 6], 0.0, 2.0).unwrap();
            let r = svd(&m).unwrap();
            let s = r.s.data();
            assert!(s.iter().all(|&x| x >= 0.0));
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_input() {
        // Outer product: rank 1, remaining singular values ~ 0, U/V still
        // orthonormal.
        let u = Tensor::new(&[4, 1], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let v = Tensor::new(&[1, 3], vec![2.0, 0.0, -1.0]).unwrap();
        let m = u.matmul(&v).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.numerical_rank(), 1);
        assert!(reconstruction_error(&m, &r) < 1e-9);
        assert!(orthonormality_error(&r.u) < 1e-9);
        assert!(orthonormality_error(&r.v) < 1e-9);
    }

    #[test]
    fn non_finite_rejected() {
        let m = Tensor::new(&[2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(matches!(svd(&m), Err(crate::error::Error::Numeric(_))));
    }

    #[test]
    fn eckart_young_tail_energy() {
        // Best rank-k Frobenius error equals sqrt(sum of discarded squared
        // singular values); check by brute-force truncation.
        let mut rng = Rng::new(31);
        let m = rand_normal(&mut rng, &[8, 6], 0.0, 1.0).unwrap();
        let r = svd(&m).unwrap();
        let s = r.s.data();
        for k in 0..=s.len() {
            let approx = r.truncate(k).unwrap();
            let err = m.sub(&approx).unwrap().frobenius_norm();
            let tail: f64 = s[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                (err - tail).abs() < 1e-9,
                "k={k}: brute-force error {err} vs tail energy {tail}"
            );
        }
    }
}
