use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-10;
const PSD_SLACK: f64 = 1e-10;
const EIG_FLOOR: f64 = 1e-12;

/// `S = Q Diag(λ) Qᵀ` with eigenvalues in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    pub q: Matrix,
    pub eigenvalues: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &Matrix) -> Result<EigResult> {
    let n = check_symmetric(s)?;
    let mut a = s.symmetrized();
    let mut q = Matrix::identity(n);

    let scale = a.frobenius_norm();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                if t == 0.0 {
                    a[(p, r)] = 0.0;
                    a[(r, p)] = 0.0;
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // A ← Jᵀ A J on rows/columns p, r.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = c * akp - sn * akr;
                    a[(k, r)] = sn * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = c * apk - sn * ark;
                    a[(r, k)] = sn * apk + c * ark;
                }
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - sn * qkr;
                    q[(k, r)] = sn * qkp + c * qkr;
                }
            }
        }
    }
    if !converged {
        return Err(Error::EigNotConverged {
            n,
            sweeps: MAX_SWEEPS,
        });
    }

    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    let mut sorted_q = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        eigenvalues.push(diag[j]);
        let mut col = q.column(j);
        let lead = col
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, x)| {
                if x.abs() > best.1 {
                    (i, x.abs())
                } else {
                    best
                }
            })
            .0;
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        sorted_q.set_column(slot, &col);
    }
    Ok(EigResult {
        q: sorted_q,
        eigenvalues,
    })
}

fn check_symmetric(s: &Matrix) -> Result<usize> {
    let (r, c) = s.shape();
    if r != c {
        return Err(Error::DimensionMismatch {
            context: "symmetric matrix must be square".into(),
            expected: r,
            got: c,
        });
    }
    let asym = s.max_asymmetry();
    if asym > SYMMETRY_TOL * s.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(r)
}

/// Eigendecomposition of `S + damping·I` after the PSD check.
fn damped_eig(s: &Matrix, damping: f64) -> Result<EigResult> {
    if damping.is_nan() || damping < 0.0 || !damping.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "damping {damping} must be >= 0"
        )));
    }
    check_symmetric(s)?;
    let eig = sym_eig(&s.add_identity(damping)?)?;
    let top = eig
        .eigenvalues
        .first()
        .copied()
        .unwrap_or(0.0)
        .abs()
        .max(1.0);
    if let Some(&lowest) = eig.eigenvalues.last() {
        if lowest < -PSD_SLACK * top {
            return Err(Error::NotPsd { eigenvalue: lowest });
        }
    }
    Ok(eig)
}

fn spectral_map(eig: &EigResult, f: impl Fn(f64) -> f64) -> Matrix {
    let mapped: Vec<f64> = eig.eigenvalues.iter().map(|&l| f(l)).collect();
    let qf = eig.q.scale_columns(&mapped);
    qf.matmul(&eig.q.transpose())
        .expect("square factors")
        .symmetrized()
}

/// Symmetric square root of `S + damping·I`. Eigenvalues are clamped at
/// `1e-12` before the root is taken.
pub fn psd_sqrt(s: &Matrix, damping: f64) -> Result<Matrix> {
    let eig = damped_eig(s, damping)?;
    Ok(spectral_map(&eig, |l| l.max(EIG_FLOOR).sqrt()))
}

/// Symmetric inverse square root of `S + damping·I`.
pub fn psd_inv_sqrt(s: &Matrix, damping: f64) -> Result<Matrix> {
    let eig = damped_eig(s, damping)?;
    if let Some(&lowest) = eig.eigenvalues.last() {
        if lowest <= EIG_FLOOR {
            return Err(Error::NearSingular { eigenvalue: lowest });
        }
    }
    Ok(spectral_map(&eig, |l| 1.0 / l.sqrt()))
}
