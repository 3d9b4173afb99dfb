//! Synthetic data: the two-population regression instance and a pair of
//! Gaussian-blob classification tasks for the retention experiment.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkit::{mat_mat, standard_normal_matrix, Matrix, RngStream, Vector};
use crate::oracle::{MixtureModel, Population};

#[cfg(test)]
mod tests;

/// Shape of the toy regression problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyInstance {
    pub d: usize,
    /// Populations are centred at `±mu e₁`.
    pub mu: f64,
    /// Variance of the first coordinate; the rest have unit variance.
    pub s2: f64,
    pub target_rank: usize,
    pub lora_rank: usize,
    pub seed: u64,
}

impl Default for ToyInstance {
    fn default() -> Self {
        Self {
            d: 16,
            mu: 3.0,
            s2: 0.25,
            target_rank: 2,
            lora_rank: 2,
            seed: 0,
        }
    }
}

impl ToyInstance {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return invalid("toy instance needs d >= 1");
        }
        if !(self.s2 > 0.0 && self.s2.is_finite()) {
            return invalid(format!("s2 must be positive, got {}", self.s2));
        }
        if !self.mu.is_finite() {
            return invalid("mu must be finite");
        }
        if self.target_rank == 0 || self.target_rank > self.d {
            return invalid(format!("target_rank must be in 1..={}", self.d));
        }
        if self.lora_rank == 0 {
            return invalid("lora_rank must be at least 1");
        }
        Ok(())
    }

    /// The stream the instance is generated from when none is supplied.
    pub fn rng(&self) -> RngStream {
        RngStream::new(self.seed, 0).named("toy-instance")
    }
}

/// `μ_ft = +mu e₁`, `μ_pt = −mu e₁`, `Σ = diag(s2, 1, …, 1)`, `M = U V` with
/// standard Gaussian `U` (d × k) and `V` (k × d), and `W0` with i.i.d.
/// `N(0, 1/d)` entries.
pub fn make_toy_instance(cfg: &ToyInstance, rng: RngStream) -> Result<MixtureModel> {
    cfg.validate()?;
    let d = cfg.d;
    let mut diag = vec![1.0; d];
    diag[0] = cfg.s2;
    let u = standard_normal_matrix(d, cfg.target_rank, rng.named("U"));
    let v = standard_normal_matrix(cfg.target_rank, d, rng.named("V"));
    let w0 = standard_normal_matrix(d, d, rng.named("W0")).scaled(1.0 / (d as f64).sqrt());
    MixtureModel::new(
        Vector::basis(d, 0).scaled(cfg.mu),
        Vector::basis(d, 0).scaled(-cfg.mu),
        Matrix::diag(&diag),
        mat_mat(&u, &v)?,
        w0,
    )
}

/// Rows of inputs, targets and population tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
    pub labels: Vec<Population>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Header `population,x0..x{d-1},y0..y{d_y-1}`, one row per sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["population".to_string()];
        header.extend((0..self.x.cols()).map(|j| format!("x{j}")));
        header.extend((0..self.y.cols()).map(|j| format!("y{j}")));
        out.write_record(&header).map_err(csv_err)?;
        for (i, pop) in self.labels.iter().enumerate() {
            let mut rec = vec![pop.as_str().to_string()];
            rec.extend(self.x.row(i).iter().map(|v| format!("{v:e}")));
            rec.extend(self.y.row(i).iter().map(|v| format!("{v:e}")));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// `n` independent mixture draws with noiseless targets.
pub fn sample_batch(mm: &MixtureModel, n: usize, rng: RngStream) -> Result<Batch> {
    sample_batch_noisy(mm, n, 0.0, rng)
}

/// As [`sample_batch`], with i.i.d. `N(0, noise_std²)` added to every
/// target entry. Row `i` depends only on `rng.derive(i)`.
pub fn sample_batch_noisy(
    mm: &MixtureModel,
    n: usize,
    noise_std: f64,
    rng: RngStream,
) -> Result<Batch> {
    if n == 0 {
        return invalid("batch size must be at least 1");
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return invalid(format!(
            "noise_std must be a finite non-negative number, got {noise_std}"
        ));
    }
    let (d, d_y) = (mm.dim(), mm.d_y());
    let mut x = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d_y);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = rng.derive(i as u64).generator();
        let (pop, xi) = mm.sample_mixture(&mut g);
        let mut yi = mm.target(pop, &xi);
        if noise_std > 0.0 {
            for v in yi.iter_mut() {
                *v += noise_std * g.sample::<f64, _>(StandardNormal);
            }
        }
        x.row_mut(i).copy_from_slice(&xi);
        y.row_mut(i).copy_from_slice(&yi);
        labels.push(pop);
    }
    Ok(Batch { x, y, labels })
}

/// `n` draws from one population only.
pub fn sample_population(
    mm: &MixtureModel,
    pop: Population,
    n: usize,
    rng: RngStream,
) -> Result<Batch> {
    if n == 0 {
        return invalid("batch size must be at least 1");
    }
    let mut x = Matrix::zeros(n, mm.dim());
    let mut y = Matrix::zeros(n, mm.d_y());
    for i in 0..n {
        let mut g = rng.derive(i as u64).generator();
        let xi = mm.sample_x(pop, &mut g);
        y.row_mut(i).copy_from_slice(&mm.target(pop, &xi));
        x.row_mut(i).copy_from_slice(&xi);
    }
    Ok(Batch {
        x,
        y,
        labels: vec![pop; n],
    })
}

/// Isotropic unit-variance Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTask {
    pub name: String,
    /// `centers[k]` is the mean of inputs whose label is `k`.
    pub centers: Vec<Vector>,
}

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> Vector {
        self.x.row_vector(i)
    }

    /// Header `label,x0..x{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.x.cols()).map(|j| format!("x{j}")));
        out.write_record(&header).map_err(csv_err)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.to_string()];
            rec.extend(self.x.row(i).iter().map(|v| format!("{v:e}")));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl ClassificationTask {
    pub fn n_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].dim()
    }

    /// `n` draws with uniformly random labels; row `i` depends only on
    /// `rng.derive(i)`.
    pub fn sample(&self, n: usize, rng: RngStream) -> LabeledSet {
        let d = self.dim();
        let mut x = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut g = rng.derive(i as u64).generator();
            let k = g.random_range(0..self.n_classes());
            for (v, c) in x.row_mut(i).iter_mut().zip(self.centers[k].iter()) {
                *v = c + g.sample::<f64, _>(StandardNormal);
            }
            labels.push(k);
        }
        LabeledSet { x, labels }
    }

    /// Nearest-centre rule, which is Bayes-optimal for equal priors and a
    /// shared isotropic covariance.
    pub fn bayes_classify(&self, x: &[f64]) -> usize {
        let dist = |c: &Vector| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..self.n_classes())
            .min_by(|&a, &b| dist(&self.centers[a]).total_cmp(&dist(&self.centers[b])))
            .expect("at least two classes")
    }

    pub fn bayes_accuracy(&self, set: &LabeledSet) -> f64 {
        let hits = (0..set.len())
            .filter(|&i| self.bayes_classify(set.x.row(i)) == set.labels[i])
            .count();
        hits as f64 / set.len() as f64
    }
}

/// Two classification tasks over `n_classes` unit-variance blobs in `R^d`.
///
/// Class centres form a regular simplex with pairwise distance `separation`
/// in a randomly rotated subspace orthogonal to `e₁`. The pre-training task
/// shifts the simplex by `+separation/2 · e₁` and uses label `k` for vertex
/// `k`; the fine-tuning task shifts it by `−separation/2 · e₁` and uses label
/// `(k + 1) mod n_classes`. Both tasks therefore share their discriminative
/// directions but disagree on the label map, and sit `separation` apart.
pub fn make_retention_tasks(
    d: usize,
    n_classes: usize,
    separation: f64,
    rng: RngStream,
) -> Result<(ClassificationTask, ClassificationTask)> {
    if n_classes < 2 {
        return invalid("retention tasks need at least two classes");
    }
    if d < n_classes + 1 {
        return invalid(format!(
            "d = {d} cannot hold {n_classes} classes off the task axis (need d >= {})",
            n_classes + 1
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return invalid(format!(
            "separation must be finite and non-negative, got {separation}"
        ));
    }
    let q = random_orthogonal(d - 1, rng.named("rotation"));
    let c = n_classes as f64;
    let scale = separation / std::f64::consts::SQRT_2;
    // vertex k of the simplex: scale · (e_k − 1/C), embedded in coordinates 1..d
    let vertex = |k: usize| -> Vector {
        let mut v = Vector::zeros(d);
        for i in 0..d - 1 {
            let local: f64 = (0..n_classes)
                .map(|j| q[(i, j)] * scale * (if j == k { 1.0 } else { 0.0 } - 1.0 / c))
                .sum();
            v[i + 1] = local;
        }
        v
    };
    let shifted = |k: usize, offset: f64| {
        let mut v = vertex(k);
        v[0] = offset;
        v
    };
    let pretrain = ClassificationTask {
        name: "task1".into(),
        centers: (0..n_classes)
            .map(|k| shifted(k, 0.5 * separation))
            .collect(),
    };
    // label l of task 2 is vertex (l − 1) mod C
    let finetune = ClassificationTask {
        name: "task2".into(),
        centers: (0..n_classes)
            .map(|l| shifted((l + n_classes - 1) % n_classes, -0.5 * separation))
            .collect(),
    };
    Ok((pretrain, finetune))
}

/// Haar-ish random orthogonal matrix via Gram–Schmidt on Gaussian columns.
fn random_orthogonal(n: usize, rng: RngStream) -> Matrix {
    let g = standard_normal_matrix(n, n, rng);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = g.column(j).into_vec();
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}
