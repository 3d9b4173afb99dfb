//! Closed-form ground truth for the two-population linear model.
//!
//! Inputs come from a symmetric mixture of a fine-tuning population and a
//! pre-training population. Targets are `(W0 + M) x` on fine-tuning draws
//! and `W0 x` on pre-training draws, so the ideal correction is `M x` on one
//! population and zero on the other. This module provides
//!
//! * the best input-independent correction `M Σ_ft (Σ_ft + Σ_pt)⁻¹` and its
//!   loss floor `¼ Tr(M Σ Mᵀ)` when both second moments agree,
//! * the Bayes-optimal correction `π_ft(x) M x` and, for Gaussian populations
//!   with a shared covariance, the affine log-odds `w_gᵀ x + b_g`,
//! * a Monte Carlo estimate of the Bayes loss,
//! * an exact DISeL adapter that reproduces the Bayes predictor.
//!
//! Second-moment arguments are *uncentered*: `E[x xᵀ]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::DiselAdapter;
use crate::error::{invalid, Error, Result};
use crate::numkit::{
    cholesky, mat_mat, mat_vec, sigmoid_scalar, solve_spd, Matrix, RngStream, Svd, Vector,
};


/// Which population a sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Ft,
    Pt,
}

impl Population {
    pub fn as_str(self) -> &'static str {
        match self {
            Population::Ft => "ft",
            Population::Pt => "pt",
        }
    }
}

/// Two Gaussian populations with a shared covariance, plus the task matrix
/// and the frozen map.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    mu_ft: Vector,
    mu_pt: Vector,
    sigma: Matrix,
    m: Matrix,
    w0: Matrix,
    chol: Matrix,
}

impl MixtureModel {
    pub fn new(mu_ft: Vector, mu_pt: Vector, sigma: Matrix, m: Matrix, w0: Matrix) -> Result<Self> {
        let d = mu_ft.dim();
        if mu_pt.dim() != d || sigma.shape() != (d, d) {
            return invalid("mixture means and covariance must share a dimension");
        }
        if m.cols() != d || w0.shape() != m.shape() {
            return invalid(format!(
                "task matrix {:?} and frozen map {:?} must both be d_y x {d}",
                m.shape(),
                w0.shape()
            ));
        }
        let chol = cholesky(&sigma)?;
        Ok(Self {
            mu_ft,
            mu_pt,
            sigma,
            m,
            w0,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu_ft.dim()
    }
    pub fn d_y(&self) -> usize {
        self.m.rows()
    }
    pub fn mu_ft(&self) -> &Vector {
        &self.mu_ft
    }
    pub fn mu_pt(&self) -> &Vector {
        &self.mu_pt
    }
    pub fn mu(&self, pop: Population) -> &Vector {
        match pop {
            Population::Ft => &self.mu_ft,
            Population::Pt => &self.mu_pt,
        }
    }
    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }
    pub fn task_matrix(&self) -> &Matrix {
        &self.m
    }
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    /// Uncentered second moment `Σ + μ μᵀ` of one population.
    pub fn second_moment(&self, pop: Population) -> Matrix {
        let mu = self.mu(pop);
        let outer = Matrix::outer(mu, mu);
        self.sigma
            .add(&outer)
            .expect("shapes checked at construction")
    }

    /// One draw `μ + L z` from the given population.
    pub fn sample_x(&self, pop: Population, g: &mut impl Rng) -> Vector {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| g.sample(StandardNormal)).collect();
        let mut x = self.mu(pop).clone();
        for i in 0..d {
            let row = self.chol.row(i);
            x[i] += row[..=i]
                .iter()
                .zip(&z[..=i])
                .map(|(l, z)| l * z)
                .sum::<f64>();
        }
        x
    }

    /// A fair coin for the population, then a draw from it.
    pub fn sample_mixture(&self, g: &mut impl Rng) -> (Population, Vector) {
        let pop = if g.random_bool(0.5) {
            Population::Ft
        } else {
            Population::Pt
        };
        (pop, self.sample_x(pop, g))
    }

    /// Noiseless target for `x` under the population's rule.
    pub fn target(&self, pop: Population, x: &Vector) -> Vector {
        let mut y = mat_vec(&self.w0, x).expect("dimension checked by caller");
        if pop == Population::Ft {
            let mx = mat_vec(&self.m, x).expect("dimension checked by caller");
            y.iter_mut().zip(mx.iter()).for_each(|(a, b)| *a += b);
        }
        y
    }
}

/// Gate parameters of the Bayes posterior `σ(w_gᵀ x + b_g)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesGate {
    pub wg: Vector,
    pub bg: f64,
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            estimate: mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Unconstrained best fixed correction `M Σ_ft (Σ_ft + Σ_pt)⁻¹` for
/// uncentered second moments `Σ_ft`, `Σ_pt`.
pub fn fixed_optimum(m: &Matrix, sigma_ft: &Matrix, sigma_pt: &Matrix) -> Result<Matrix> {
    let d = m.cols();
    if sigma_ft.shape() != (d, d) || sigma_pt.shape() != (d, d) {
        return invalid("second moments must be d x d with d = cols(M)");
    }
    let sum = sigma_ft.add(sigma_pt)?;
    // Δ = M Σ_ft S⁻¹  ⇔  Δᵀ = S⁻¹ (M Σ_ft)ᵀ  for symmetric S
    let rhs = mat_mat(m, sigma_ft)?.transpose();
    let x = solve_spd(&sum, &rhs).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("Σ_ft + Σ_pt is singular: {msg}")),
        other => other,
    })?;
    Ok(x.transpose())
}

/// `¼ Tr(M Σ Mᵀ)`: loss of `½ M`, and the per-population MSE of that
/// correction, when both populations share the second moment `Σ`.
pub fn fixed_floor_loss(m: &Matrix, sigma: &Matrix) -> Result<f64> {
    let msm = mat_mat(&mat_mat(m, sigma)?, &m.transpose())?;
    Ok(0.25 * msm.trace())
}

/// `w_g = Σ⁻¹(μ_ft − μ_pt)`, `b_g = ½(μ_ptᵀ Σ⁻¹ μ_pt − μ_ftᵀ Σ⁻¹ μ_ft)`.
pub fn bayes_gate_params(mm: &MixtureModel) -> Result<BayesGate> {
    let d = mm.dim();
    let rhs = Matrix::from_fn(d, 2, |i, j| if j == 0 { mm.mu_ft[i] } else { mm.mu_pt[i] });
    let solved = solve_spd(&mm.sigma, &rhs)?;
    let inv_ft = solved.column(0);
    let inv_pt = solved.column(1);
    let wg = inv_ft.sub(&inv_pt)?;
    let bg = 0.5 * (mm.mu_pt.dot(&inv_pt) - mm.mu_ft.dot(&inv_ft));
    Ok(BayesGate { wg, bg })
}

/// Posterior probability that `x` came from the fine-tuning population.
pub fn posterior_pi_ft(x: &Vector, gate: &BayesGate) -> f64 {
    sigmoid_scalar(gate.wg.dot(x) + gate.bg)
}

/// The Bayes-optimal correction `π_ft(x) M x` (without the frozen term).
pub fn bayes_predict(x: &Vector, mm: &MixtureModel, gate: &BayesGate) -> Result<Vector> {
    if x.dim() != mm.dim() || gate.wg.dim() != mm.dim() {
        return invalid("bayes_predict: dimension mismatch");
    }
    let pi = posterior_pi_ft(x, gate);
    Ok(mat_vec(&mm.m, x)?.scaled(pi))
}

/// Monte Carlo estimate of `½ ∫ p_ft p_pt / (p_ft + p_pt) ‖M x‖² dx`.
///
/// With the mixture density `q = ½(p_ft + p_pt)` the integrand equals
/// `π(1 − π) ‖M x‖² q(x)`, so the loss is `E_q[π(1 − π) ‖M x‖²]`.
pub fn bayes_loss_mc(mm: &MixtureModel, n: usize, rng: RngStream) -> Result<McEstimate> {
    if n == 0 {
        return invalid("bayes_loss_mc needs at least one sample");
    }
    let gate = bayes_gate_params(mm)?;
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let mut g = rng.derive(i as u64).generator();
            let (_, x) = mm.sample_mixture(&mut g);
            let pi = posterior_pi_ft(&x, &gate);
            let mx = mat_vec(&mm.m, &x).expect("dimension fixed by the model");
            pi * (1.0 - pi) * mx.norm_sq()
        })
        .collect();
    Ok(McEstimate::from_samples(&values))
}

/// A unit-scale DISeL adapter whose correction equals `π_ft(x) M x`:
/// `A B = M` from a truncated SVD, `Wg = 1_r w_gᵀ`, `bg = b_g 1_r`,
/// `alpha = r`.
pub fn realize_bayes_as_disel(
    mm: &MixtureModel,
    gate: &BayesGate,
    r: usize,
) -> Result<DiselAdapter> {
    if r == 0 {
        return invalid("rank must be at least 1");
    }
    let d = mm.dim();
    let d_y = mm.d_y();
    if gate.wg.dim() != d {
        return invalid("gate dimension does not match the mixture");
    }
    let svd = Svd::new(&mm.m)?;
    let k = svd.singular_values.len();
    let mut a = Matrix::zeros(d_y, r);
    let mut b = Matrix::zeros(r, d);
    for j in 0..r.min(k) {
        let s = svd.singular_values[j];
        if s <= 1e-10 {
            continue;
        }
        let root = s.sqrt();
        for i in 0..d_y {
            a[(i, j)] = svd.u[(i, j)] * root;
        }
        for c in 0..d {
            b[(j, c)] = svd.vt[(j, c)] * root;
        }
    }
    let residual = mat_mat(&a, &b)?.sub(&mm.m)?.frobenius_norm();
    if residual > 1e-8 * mm.m.frobenius_norm().max(1.0) {
        return invalid(format!(
            "task matrix has rank {} > {r}; rank-{r} factorization residual {residual:e}",
            svd.rank(1e-10)
        ));
    }
    let wg = Matrix::from_fn(r, d, |_, j| gate.wg[j]);
    DiselAdapter::new(a, b, wg, Vector::filled(r, gate.bg), r as f64)
}
