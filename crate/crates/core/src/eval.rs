//! Task metrics and baseline-versus-S3 comparison arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: length mismatch {lhs} vs {rhs}")]
    Length { op: &'static str, lhs: usize, rhs: usize },
    #[error("{0}: zero denominator")]
    ZeroDenominator(&'static str),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check<A, B>(op: &'static str, a: &[A], b: &[B]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty(op));
    }
    if a.len() != b.len() {
        return Err(EvalError::Length {
            op,
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check("accuracy", preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check("mse", preds, targets)?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64)
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check("mae", preds, targets)?;
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Relative accuracy gain in percent: `(s3 - base) / base * 100`.
pub fn diff_classification(acc_base: f64, acc_s3: f64) -> Result<f64> {
    if acc_base == 0.0 {
        return Err(EvalError::ZeroDenominator("diff_classification"));
    }
    Ok((acc_s3 - acc_base) / acc_base * 100.0)
}

/// Relative error reduction in percent: `(base - s3) / base * 100`.
pub fn diff_forecasting(err_base: f64, err_s3: f64) -> Result<f64> {
    if err_base == 0.0 {
        return Err(EvalError::ZeroDenominator("diff_forecasting"));
    }
    Ok((err_base - err_s3) / err_base * 100.0)
}

/// Rounds to two decimals, the precision comparisons are reported at.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One metric of a baseline-versus-S3 pair. Positive `diff_percent` always
/// means the S3 variant did better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub task: String,
    pub metric: String,
    pub baseline: f64,
    pub s3: f64,
    pub diff_percent: f64,
}

impl ComparisonResult {
    /// Higher-is-better metrics use the accuracy convention, the rest the
    /// error convention.
    pub fn new(task: &str, metric: &str, baseline: f64, s3: f64, higher_is_better: bool) -> Result<Self> {
        let diff = if higher_is_better {
            diff_classification(baseline, s3)?
        } else {
            diff_forecasting(baseline, s3)?
        };
        Ok(Self {
            task: task.to_string(),
            metric: metric.to_string(),
            baseline,
            s3,
            diff_percent: round2(diff),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_definitions() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 1]).unwrap(), 0.5);
        let t = [1.0, -2.0, 0.5];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        assert_eq!(mse(&p, &t).unwrap(), 4.0);
        assert_eq!(mae(&p, &t).unwrap(), 2.0);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(accuracy(&[], &[]), Err(EvalError::Empty("accuracy")));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(EvalError::Length { .. })));
        assert_eq!(mae(&[], &[]), Err(EvalError::Empty("mae")));
    }

    #[test]
    fn diff_conventions() {
        assert_eq!(diff_classification(0.8, 0.8).unwrap(), 0.0);
        assert_eq!(diff_forecasting(0.3, 0.3).unwrap(), 0.0);
        assert!(diff_classification(0.5, 0.6).unwrap() > 0.0);
        assert!(diff_forecasting(0.5, 0.4).unwrap() > 0.0);
        assert!(diff_forecasting(0.4, 0.5).unwrap() < 0.0);
        assert!(diff_classification(0.0, 0.5).is_err());
        assert!(diff_forecasting(0.0, 0.5).is_err());
        // Hand-fed values: 0.5 -> 0.6 is +20%, error 0.5 -> 0.4 is +20%.
        assert!((diff_classification(0.5, 0.6).unwrap() - 20.0).abs() < 1e-12);
        assert!((diff_forecasting(0.5, 0.4).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn comparison_rounds_diff() {
        let row = ComparisonResult::new("forecasting", "mse", 0.1169, 0.0851, false).unwrap();
        assert_eq!(row.diff_percent, 27.2);
        let row = ComparisonResult::new("classification", "accuracy", 0.794, 0.833, true).unwrap();
        assert_eq!(row.diff_percent, 4.91);
    }
}
