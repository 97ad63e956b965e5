use super::{axpy, dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const ROTATION_TOL: f64 = 1e-12;

/// Thin SVD `M = U Diag(σ) Vᵀ` with `k = min(m, n)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// n×k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn len(&self) -> usize {
        self.singular_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.singular_values.is_empty()
    }

    pub fn u_column(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }

    pub fn v_column(&self, i: usize) -> Vec<f64> {
        self.v.column(i)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Column pairs are rotated until every pair is orthogonal to within
/// `1e-12` relative to the product of their norms. Output is sorted by
/// descending singular value and each column of `U` is flipped so that its
/// largest-magnitude entry is positive.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    if rows < cols {
        let t = svd_tall(&m.transpose(), (rows, cols))?;
        let mut out = SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
        fix_signs(&mut out);
        return Ok(out);
    }
    let mut out = svd_tall(m, (rows, cols))?;
    fix_signs(&mut out);
    Ok(out)
}

/// SVD for `rows >= cols`. `orig_shape` is only used in error messages.
fn svd_tall(m: &Matrix, orig_shape: (usize, usize)) -> Result<SvdResult> {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = cols < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNotConverged {
            rows: orig_shape.0,
            cols: orig_shape.1,
            sweeps: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let negligible = sigma_max * f64::EPSILON * rows.max(cols) as f64;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut singular_values = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        singular_values.push(sigma);
        v_cols.push(v[j].clone());
        if sigma > negligible && sigma > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    for slot in deficient {
        u_cols[slot] = complete_basis(&u_cols, slot, rows);
    }

    Ok(SvdResult {
        u: Matrix::from_columns(&u_cols, rows)?,
        singular_values,
        v: Matrix::from_columns(&v_cols, cols)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Unit vector orthogonal to every other (nonzero) column, chosen among
/// the canonical basis vectors by largest residual after two rounds of
/// Gram-Schmidt.
fn complete_basis(cols: &[Vec<f64>], skip: usize, rows: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..rows {
        let mut e = vec![0.0; rows];
        e[k] = 1.0;
        for _ in 0..2 {
            for (idx, c) in cols.iter().enumerate() {
                if idx == skip {
                    continue;
                }
                let proj = dot(&e, c);
                if proj != 0.0 {
                    axpy(-proj, c, &mut e);
                }
            }
        }
        let norm = dot(&e, &e).sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, e));
        }
    }
    let (norm, e) = best.expect("rows > 0 whenever a column exists");
    e.into_iter().map(|x| x / norm).collect()
}

fn fix_signs(out: &mut SvdResult) {
    let k = out.singular_values.len();
    for j in 0..k {
        let col = out.u.column(j);
        let mut idx = 0;
        let mut best = -1.0;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best {
                best = x.abs();
                idx = i;
            }
        }
        if !col.is_empty() && col[idx] < 0.0 {
            let neg_u: Vec<f64> = col.iter().map(|x| -x).collect();
            out.u.set_column(j, &neg_u);
            let neg_v: Vec<f64> = out.v.column(j).iter().map(|x| -x).collect();
            out.v.set_column(j, &neg_v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::reconstruct;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let qtq = q.transpose().matmul(q).unwrap();
        qtq.max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let s = svd(&m).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
        assert_eq!(s.u, Matrix::identity(3));
        assert_eq!(s.v, Matrix::identity(3));
    }

    #[test]
    fn zero_matrix_gives_orthonormal_factors() {
        let s = svd(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(s.singular_values, vec![0.0, 0.0]);
        assert!(orthonormality_error(&s.u) < 1e-12);
        assert!(orthonormality_error(&s.v) < 1e-12);
    }

    #[test]
    fn random_tall_and_wide_reconstruct() {
        for (r, c, seed) in [(8, 5, 1), (5, 8, 2), (32, 48, 3), (24, 32, 4), (1, 6, 5)] {
            let m = random(r, c, seed);
            let s = svd(&m).unwrap();
            let k = r.min(c);
            assert_eq!(s.u.shape(), (r, k));
            assert_eq!(s.v.shape(), (c, k));
            assert!(orthonormality_error(&s.u) < 1e-8);
            assert!(orthonormality_error(&s.v) < 1e-8);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
            assert!(reconstruct(&s, k).rel_diff(&m) < 1e-8, "{r}x{c}");
        }
    }

    #[test]
    fn rank_deficient_input() {
        let u = random(7, 2, 11);
        let v = random(2, 5, 12);
        let m = u.matmul(&v).unwrap();
        let s = svd(&m).unwrap();
        assert!(s.singular_values[2] < 1e-12 * s.singular_values[0]);
        assert!(orthonormality_error(&s.u) < 1e-8);
        assert!(reconstruct(&s, 5).rel_diff(&m) < 1e-8);
    }

    #[test]
    fn sign_convention_and_determinism() {
        let m = random(6, 4, 9);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a, b);
        for j in 0..4 {
            let col = a.u.column(j);
            let idx = col
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()).then(y.0.cmp(&x.0)))
                .unwrap()
                .0;
            assert!(col[idx] > 0.0);
        }
    }

    #[test]
    fn truncation_error_is_spectral_tail() {
        let m = random(8, 6, 21);
        let s = svd(&m).unwrap();
        for r in 0..=6 {
            let err = reconstruct(&s, r).sub(&m).unwrap().frobenius_norm();
            let tail: f64 = s.singular_values[r..]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!((err - tail).abs() <= 1e-8 * m.frobenius_norm(), "r={r}");
        }
    }
}
