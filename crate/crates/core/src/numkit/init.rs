use rand::Rng;
use rand_distr::StandardNormal;

use super::{Matrix, RngStream};
use crate::error::{invalid, Result};

/// Kaiming-uniform bound `gain · sqrt(3 / fan_in)` with the rectifier gain
/// `sqrt(2)`, i.e. `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// `rows × cols` matrix with entries i.i.d. uniform on `[-b, b]`,
/// `b = kaiming_bound(fan_in)`.
pub fn kaiming_uniform_init(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: RngStream,
) -> Result<Matrix> {
    if fan_in == 0 {
        return invalid("kaiming_uniform_init: fan_in must be at least 1");
    }
    let b = kaiming_bound(fan_in);
    let mut g = rng.generator();
    Ok(Matrix::from_fn(rows, cols, |_, _| g.random_range(-b..=b)))
}

/// Matrix with i.i.d. standard normal entries.
pub fn standard_normal_matrix(rows: usize, cols: usize, rng: RngStream) -> Matrix {
    let mut g = rng.generator();
    Matrix::from_fn(rows, cols, |_, _| g.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_within_bound() {
        let b = kaiming_bound(4);
        assert!((b - 6.0f64.sqrt() / 2.0).abs() < 1e-15);
        let m = kaiming_uniform_init(2, 2, 4, RngStream::new(11, 3)).unwrap();
        assert!(m.as_slice().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn deterministic_given_stream() {
        let s = RngStream::new(3, 9);
        assert_eq!(
            kaiming_uniform_init(3, 5, 5, s).unwrap(),
            kaiming_uniform_init(3, 5, 5, s).unwrap()
        );
    }

    #[test]
    fn zero_fan_in_rejected() {
        assert!(kaiming_uniform_init(2, 2, 0, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn monte_carlo_mean_is_zero() {
        // 10^6 draws; the uniform-mean estimator has stderr b / sqrt(3 n)
        let m = kaiming_uniform_init(1000, 1000, 9, RngStream::new(21, 0)).unwrap();
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let se = kaiming_bound(9) / (3.0 * n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean:e} se {se:e}");
    }
}
