//! Point estimates with Student-t confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-sided confidence level used throughout.
pub const CONFIDENCE: f64 = 0.95;

/// A mean with the half-width of its 95% confidence interval.
///
/// The half-width is infinite when fewer than two observations are available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    /// Treats `samples` as independent and identically distributed.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Estimate {
                mean: 0.0,
                half_width: f64::INFINITY,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate {
                mean,
                half_width: f64::INFINITY,
            };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            mean,
            half_width: t_quantile(n - 1) * (var / n as f64).sqrt(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.mean).abs() <= self.half_width
    }

    /// Standard error implied by the half-width.
    pub fn std_error(&self, dof: usize) -> f64 {
        self.half_width / t_quantile(dof)
    }
}

/// Upper `(1 + CONFIDENCE) / 2` quantile of Student's t with `dof` degrees of freedom.
pub fn t_quantile(dof: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof >= 1");
    dist.inverse_cdf(0.5 + CONFIDENCE / 2.0)
}
