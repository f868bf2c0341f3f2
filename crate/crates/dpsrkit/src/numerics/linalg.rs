//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition
//! and the PSD matrix square root built on it. Matrices here are at most
//! pose-dimension sized, so the O(d^3) sweeps are cheap.

use crate::numerics::NumericsError;
use ndarray::{Array1, Array2};

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors) with `m = V diag(w) V^T`.
pub fn jacobi_eigen(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), NumericsError> {
    let n = m.nrows();
    check_symmetric(m, 1e-8)?;
    let mut a = m.clone();
    // symmetrize away roundoff so the rotations stay consistent
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = s;
            a[[j, i]] = s;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frob(&a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w = Array1::from_iter((0..n).map(|i| a[[i, i]]));
    Ok((w, v))
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_symmetric(m: &Array2<f64>, tol: f64) -> Result<(), NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::NotSquare(m.nrows(), m.ncols()));
    }
    let scale = 1.0 + frob(m);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[[i, j]] - m[[j, i]]).abs() > tol * scale {
                return Err(NumericsError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Symmetric PSD matrix square root: S with S*S ~= M. Eigenvalues below
/// -1e-10 are an error; small negative ones from roundoff clamp to zero.
pub fn sym_psd_sqrt(m: &Array2<f64>) -> Result<Array2<f64>, NumericsError> {
    let (w, v) = jacobi_eigen(m)?;
    let scale = w.iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let mut sq = Array2::<f64>::zeros(m.raw_dim());
    let n = m.nrows();
    for k in 0..n {
        let lam = if w[k] < 0.0 {
            if w[k] < -1e-8 * scale {
                return Err(NumericsError::NotPsd(w[k]));
            }
            0.0
        } else {
            w[k]
        };
        let s = lam.sqrt();
        for i in 0..n {
            for j in 0..n {
                sq[[i, j]] += s * v[[i, k]] * v[[j, k]];
            }
        }
    }
    // exact symmetry for downstream consumers
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (sq[[i, j]] + sq[[j, i]]);
            sq[[i, j]] = s;
            sq[[j, i]] = s;
        }
    }
    Ok(sq)
}

/// Pseudo-inverse and log-pseudo-determinant of a symmetric PSD matrix.
pub fn psd_inv_logdet(m: &Array2<f64>) -> Result<(Array2<f64>, f64), NumericsError> {
    let (w, v) = jacobi_eigen(m)?;
    let n = m.nrows();
    let scale = w.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let mut inv = Array2::<f64>::zeros(m.raw_dim());
    let mut logdet = 0.0;
    for k in 0..n {
        let lam = w[k].max(0.0);
        if lam > 1e-12 * scale {
            logdet += lam.ln();
            let inv_lam = 1.0 / lam;
            for i in 0..n {
                for j in 0..n {
                    inv[[i, j]] += inv_lam * v[[i, k]] * v[[j, k]];
                }
            }
        }
    }
    Ok((inv, logdet))
}

/// Factor L with L L^T = M (via eigendecomposition, valid for PSD M),
/// suitable for sampling x = mu + L z.
pub fn psd_factor(m: &Array2<f64>) -> Result<Array2<f64>, NumericsError> {
    sym_psd_sqrt(m)
}
