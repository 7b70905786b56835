//! Coefficient of determination and macro-averaged F1.

use serde::Serialize;

use crate::error::{GeoError, Result};

/// `1 - SS_res / SS_tot`.
pub fn r2_score(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(GeoError::Dimension {
            expected: targets.len(),
            got: preds.len(),
        });
    }
    if targets.len() < 2 {
        return Err(GeoError::EmptyInput("R^2 needs at least two samples".into()));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(GeoError::UndefinedVariance);
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    /// Classes that occur in neither predictions nor targets; they count as 0.
    pub absent: Vec<usize>,
}

/// Macro F1 over classes `0..n_classes`.
pub fn f1_score(preds: &[usize], targets: &[usize], n_classes: usize) -> Result<F1Report> {
    if preds.len() != targets.len() {
        return Err(GeoError::Dimension {
            expected: targets.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() || n_classes == 0 {
        return Err(GeoError::EmptyInput("F1 needs samples and classes".into()));
    }
    if let Some(&bad) = preds.iter().chain(targets).find(|&&c| c >= n_classes) {
        return Err(GeoError::Validation(format!("class {bad} outside 0..{n_classes}")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &t) in preds.iter().zip(targets) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let mut absent = Vec::new();
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                absent.push(c);
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(F1Report {
        macro_f1: per_class.iter().sum::<f64>() / n_classes as f64,
        per_class,
        absent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_examples() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(r2_score(&t, &t).unwrap(), 1.0);
        assert_eq!(r2_score(&[1.0; 3], &t).unwrap(), 0.0);
        assert_eq!(r2_score(&[0.0; 3], &t).unwrap(), -1.5);
        assert!(matches!(
            r2_score(&[0.0, 1.0], &[2.0, 2.0]),
            Err(GeoError::UndefinedVariance)
        ));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[0, 1, 2], &[0, 1, 2], 3).unwrap().macro_f1, 1.0);
        let r = f1_score(&[1, 1, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(r.per_class, vec![0.0, 2.0 / 3.0]);
        assert_eq!(r.macro_f1, 1.0 / 3.0);
        let r = f1_score(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(r.absent, vec![1, 2]);
        assert!(f1_score(&[5], &[0], 3).is_err());
    }
}
