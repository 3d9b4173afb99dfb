//! Small dense linear algebra, keyed RNG streams, initializers and the
//! numerically stable sigmoid that everything else is built on.
//!
//! All numerics are `f64`. Matrices are row-major.

mod init;
mod linalg;
mod matrix;
mod rng;

pub use init::{kaiming_bound, kaiming_uniform_init, standard_normal_matrix};
pub use linalg::{cholesky, mat_mat, mat_vec, solve_spd, Svd};
pub use matrix::{Matrix, Vector};
pub use rng::RngStream;

/// Logistic sigmoid of a single value.
///
/// Uses the two-sided formulation so `exp` is only ever evaluated on a
/// non-positive argument. The result is clamped into the open interval
/// `(0, 1)`: below by the smallest positive normal `f64`, above by the
/// largest `f64` strictly less than one.
#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, UPPER)
}

/// Element-wise sigmoid.
pub fn sigmoid(z: &Vector) -> Vector {
    z.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Element-wise rectifier.
pub fn relu(z: &Vector) -> Vector {
    z.iter().map(|&v| v.max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(&Vector::from(vec![0.0]))[0], 0.5);
        let s = sigmoid_scalar(-3.0);
        assert!((s - 0.047_425_873_177_566_78).abs() < 1e-15, "{s}");
    }

    #[test]
    fn sigmoid_extreme_arguments_stay_open() {
        let lo = sigmoid_scalar(-800.0);
        assert!(lo > 0.0 && lo < 1e-300, "{lo}");
        let hi = sigmoid_scalar(800.0);
        assert!(hi < 1.0 && hi > 1.0 - 1e-15);
        for z in [-700.0, -40.0, 40.0, 700.0] {
            let s = sigmoid_scalar(z);
            assert!(s > 0.0 && s < 1.0 && s.is_finite());
        }
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut z = -50.0;
        while z <= 50.0 {
            let sum = sigmoid_scalar(z) + sigmoid_scalar(-z);
            assert!((sum - 1.0).abs() <= 1e-15, "z={z} sum={sum}");
            z += 0.37;
        }
        for z in [-800.0, -700.0, 700.0, 800.0] {
            assert!((sigmoid_scalar(z) + sigmoid_scalar(-z) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn relu_clips_negatives() {
        let v = relu(&Vector::from(vec![-1.0, 0.0, 2.5]));
        assert_eq!(v.as_slice(), &[0.0, 0.0, 2.5]);
    }
}
