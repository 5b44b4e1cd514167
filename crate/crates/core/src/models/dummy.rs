use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DummyMean {
    pub mean: f64,
}

impl DummyMean {
    pub fn fit(train_targets: &[f64]) -> Result<DummyMean> {
        if train_targets.is_empty() {
            return Err(Error::Empty("training targets"));
        }
        Ok(DummyMean {
            mean: train_targets.iter().sum::<f64>() / train_targets.len() as f64,
        })
    }

    pub fn predict(&self, n: usize) -> Vec<f64> {
        vec![self.mean; n]
    }
}

/// Draws i.i.d. predictions from `N(μ, σ)` of the training targets
/// (population σ). Draws are not clamped at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DummyGaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl DummyGaussian {
    pub fn fit(train_targets: &[f64]) -> Result<DummyGaussian> {
        let mu = DummyMean::fit(train_targets)?.mean;
        let n = train_targets.len() as f64;
        let var = train_targets.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / n;
        Ok(DummyGaussian {
            mu,
            sigma: var.sqrt(),
        })
    }

    pub fn predict(&self, n: usize, seed: u64) -> Vec<f64> {
        if self.sigma == 0.0 {
            return vec![self.mu; n];
        }
        let mut r = rng::stream(seed, &[rng::tag::GAUSS_DUMMY]);
        let d = Normal::new(self.mu, self.sigma).expect("finite sigma");
        (0..n).map(|_| d.sample(&mut r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_predictor() {
        let m = DummyMean::fit(&[8.0, 10.0]).unwrap();
        assert_eq!(m.predict(3), vec![9.0; 3]);
        assert!(DummyMean::fit(&[]).is_err());
    }

    #[test]
    fn mean_predictor_mae_is_mean_absolute_deviation() {
        let y = [1.0, 4.0, 4.5, 9.0, 12.5];
        let m = DummyMean::fit(&y).unwrap();
        let mu = y.iter().sum::<f64>() / 5.0;
        let mad = y.iter().map(|v| (v - mu).abs()).sum::<f64>() / 5.0;
        let mae = crate::evaluation::mae(&m.predict(5), &y).unwrap();
        assert!((mae - mad).abs() < 1e-15);
    }

    #[test]
    fn gaussian_degenerate_and_seeded() {
        let g = DummyGaussian::fit(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!(g.predict(4, 1), vec![3.0; 4]);
        let g = DummyGaussian::fit(&[1.0, 5.0]).unwrap();
        assert_eq!((g.mu, g.sigma), (3.0, 2.0));
        assert_eq!(g.predict(50, 9), g.predict(50, 9));
        assert_ne!(g.predict(50, 9), g.predict(50, 10));
    }

    #[test]
    fn gaussian_mean_within_clt_bound() {
        let g = DummyGaussian { mu: 9.0, sigma: 5.0 };
        let n = 100_000;
        let draws = g.predict(n, 2024);
        let m = draws.iter().sum::<f64>() / n as f64;
        assert!((m - 9.0).abs() < 3.0 * 5.0 / (n as f64).sqrt(), "{m}");
        assert!(draws.iter().any(|d| *d < 0.0), "draws are not clamped");
    }
}
