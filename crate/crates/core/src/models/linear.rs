use rand::Rng;

use super::params::Layout;
use crate::error::{Error, Result};
use crate::features::Design;
use crate::rng::StreamRng;

/// `ŷ = w·x + b` on standardized numeric features. Station ids are unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearRegression {
    pub dim: usize,
}

impl LinearRegression {
    pub fn layout(&self) -> Layout {
        Layout::new(
            format!("linear(d={})", self.dim),
            &[("weight", vec![self.dim]), ("bias", vec![1])],
        )
    }

    pub fn init(&self, rng: &mut StreamRng, output_bias: f64) -> Vec<f64> {
        let bound = (1.0 / self.dim.max(1) as f64).sqrt();
        let mut p: Vec<f64> = (0..self.dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        p.push(output_bias);
        p
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(dot(&params[..self.dim], x) + params[self.dim])
    }

    /// Batch-mean squared error and its exact gradient over `rows`.
    pub fn loss_grad(&self, params: &[f64], data: &Design, rows: &[usize]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let mut g = vec![0.0; d + 1];
        let n = rows.len() as f64;
        let mut loss = 0.0;
        for &i in rows {
            let x = data.row(i);
            let r = dot(&params[..d], x) + params[d] - data.y[i];
            loss += r * r;
            let s = 2.0 * r / n;
            axpy(s, x, &mut g[..d]);
            g[d] += s;
        }
        (loss / n, g)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
