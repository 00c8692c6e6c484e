use crate::error::{Error, Result};

/// Arithmetic mean of per-task accuracies.
pub fn average_accuracy(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("average of an empty accuracy list".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean and normal-approximation 95% half-width `1.96 s / sqrt(n)`, with `s`
/// the sample standard deviation; the half-width is 0 for a single value.
pub fn aggregate_seeds(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Human-readable definition stored in every report.
pub const CI_DEFINITION: &str =
    "mean over seeds (+/- 1.96 * sample standard deviation / sqrt(number of seeds))";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages() {
        assert_eq!(average_accuracy(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(average_accuracy(&[0.3]).unwrap(), 0.3);
        assert!(average_accuracy(&[]).is_err());
    }

    #[test]
    fn seed_aggregates() {
        let (m, hw) = aggregate_seeds(&[0.7, 0.7, 0.7]);
        assert!((m - 0.7).abs() < 1e-15 && hw < 1e-15);
        assert_eq!(aggregate_seeds(&[0.4]), (0.4, 0.0));
        let (m, hw) = aggregate_seeds(&[0.9, 1.1]);
        assert!((m - 1.0).abs() < 1e-15);
        assert!((hw - 1.96 * 0.02f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert!((hw - 0.196).abs() < 1e-12);
    }
}
