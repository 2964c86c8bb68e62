//! Batch-means output analysis: treat per-batch time averages as i.i.d.
//! samples and report a Student-t confidence interval on their mean.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean and confidence half-width over a set of batch values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMeansCi {
    pub mean: f64,
    /// Absent when fewer than two batches are available.
    pub half_width: Option<f64>,
    pub count: usize,
}

/// Two-sided confidence interval for the mean of `values` at the given
/// confidence level (e.g. 0.95).
pub fn batch_means_ci(values: &[f64], confidence: f64) -> BatchMeansCi {
    assert!(!values.is_empty(), "batch means need at least one value");
    assert!((0.0..1.0).contains(&confidence));
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return BatchMeansCi {
            mean,
            half_width: None,
            count: n,
        };
    }
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .inverse_cdf(0.5 + confidence / 2.0);
    BatchMeansCi {
        mean,
        half_width: Some(t * (variance / n as f64).sqrt()),
        count: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn identical_values_have_zero_width() {
        let ci = batch_means_ci(&[3.5; 10], 0.95);
        assert_eq!(ci.mean, 3.5);
        assert_eq!(ci.half_width, Some(0.0));
        assert_eq!(ci.count, 10);
    }

    #[test]
    fn ten_point_example() {
        let values: Vec<f64> = (1..=10).map(f64::from).collect();
        let ci = batch_means_ci(&values, 0.95);
        assert_eq!(ci.mean, 5.5);
        // t_{9, 0.975} = 2.2622, s = 3.02765 -> 2.2622 * s / sqrt(10)
        assert!(close(ci.half_width.unwrap(), 2.16585, 1e-3), "{ci:?}");
    }

    #[test]
    fn two_batch_example_uses_wide_t() {
        let ci = batch_means_ci(&[0.0, 2.0], 0.95);
        assert_eq!(ci.mean, 1.0);
        // t_{1, 0.975} = 12.706; s = sqrt(2), s/sqrt(2) = 1
        assert!(close(ci.half_width.unwrap(), 12.706, 1e-3), "{ci:?}");
    }

    #[test]
    fn single_batch_reports_mean_only() {
        let ci = batch_means_ci(&[7.0], 0.95);
        assert_eq!(ci.mean, 7.0);
        assert_eq!(ci.half_width, None);
    }
}
