//! Dense symmetric eigensolver (cyclic Jacobi).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("Jacobi iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
}

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi rotations on a row-major symmetric matrix. Eigenvalues are
/// returned in descending order with their eigenvectors.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<SymmetricEigen, LinalgError> {
    let n = a.len();
    for row in a {
        if row.len() != n {
            return Err(LinalgError::NotSquare { rows: n, cols: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
    }
    let scale: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..n {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * scale.max(1.0) {
                return Err(LinalgError::NotSymmetric(i, j));
            }
        }
    }
    let mut m: Vec<Vec<f64>> = a.to_vec();
    // v[k] holds the k-th eigenvector (rows of Vᵀ).
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                let (vp, vq) = (v[p].clone(), v[q].clone());
                for k in 0..n {
                    v[p][k] = c * vp[k] - s * vq[k];
                    v[q][k] = s * vp[k] + c * vq[k];
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]).then(i.cmp(&j)));
    Ok(SymmetricEigen {
        values: order.iter().map(|&i| m[i][i]).collect(),
        vectors: order.iter().map(|&i| v[i].clone()).collect(),
    })
}
