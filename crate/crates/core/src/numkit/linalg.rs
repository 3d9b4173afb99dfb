use super::matrix::{dot, Matrix, Vector};
use crate::error::{invalid, Error, Result};

pub fn mat_vec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols() != v.dim() {
        return invalid(format!(
            "mat_vec: matrix is {}x{}, vector has dim {}",
            m.rows(),
            m.cols(),
            v.dim()
        ));
    }
    let mut out = Vector::zeros(m.rows());
    m.gemv_into(v, &mut out);
    Ok(out)
}

pub fn mat_mat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return invalid(format!(
            "mat_mat: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `a = L Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return invalid(format!("cholesky: matrix is {}x{}", n, a.cols()));
    }
    let scale = a
        .as_slice()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Numeric(format!(
                    "cholesky: matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Numeric(format!(
                "cholesky: matrix not positive definite (pivot {j} = {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `a X = b` for symmetric positive-definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != a.rows() {
        return invalid(format!(
            "solve_spd: system is {}x{}, right-hand side has {} rows",
            a.rows(),
            a.cols(),
            b.rows()
        ));
    }
    let l = cholesky(a)?;
    let n = a.rows();
    let mut x = Matrix::zeros(n, b.cols());
    let mut col = vec![0.0; n];
    for c in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[(i, k)] * col[k]).sum();
            col[i] = (b[(i, c)] - s) / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[(k, i)] * col[k]).sum();
            col[i] = (col[i] - s) / l[(i, i)];
        }
        for i in 0..n {
            x[(i, c)] = col[i];
        }
    }
    if !x.is_finite() {
        return Err(Error::Numeric("solve_spd: non-finite solution".into()));
    }
    Ok(x)
}

/// Thin singular value decomposition `m = U diag(s) Vᵀ`, singular values
/// sorted in descending order. Columns of `U` paired with a zero singular
/// value are zero.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 80;

impl Svd {
    /// One-sided Jacobi: rotates column pairs of `m` until all are mutually
    /// orthogonal; column norms are then the singular values.
    pub fn new(m: &Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::Numeric("svd: non-finite input".into()));
        }
        if m.rows() < m.cols() {
            let t = Self::new(&m.transpose())?;
            return Ok(Self {
                u: t.vt.transpose(),
                singular_values: t.singular_values,
                vt: t.u.transpose(),
            });
        }
        let (rows, n) = m.shape();
        // columns of m and of V, stored contiguously
        let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j).into_vec()).collect();
        let mut v: Vec<Vec<f64>> = (0..n).map(|j| Vector::basis(n, j).into_vec()).collect();
        let mut converged = false;
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = dot(&a[p], &a[p]);
                    let beta = dot(&a[q], &a[q]);
                    let gamma = dot(&a[p], &a[q]);
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
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
            return Err(Error::Numeric("svd: Jacobi sweeps did not converge".into()));
        }
        let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
        let u = Matrix::from_fn(rows, n, |i, j| {
            let k = order[j];
            if norms[k] > 0.0 {
                a[k][i] / norms[k]
            } else {
                0.0
            }
        });
        let vt = Matrix::from_fn(n, n, |i, j| v[order[i]][j]);
        Ok(Self {
            u,
            singular_values: order.iter().map(|&k| norms[k]).collect(),
            vt,
        })
    }

    /// Number of singular values above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
