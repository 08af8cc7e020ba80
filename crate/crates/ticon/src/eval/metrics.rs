//! Classification and regression metrics.

use crate::error::{Error, Result};

/// Macro-averaged F1 over the classes present in the truth labels.
pub fn macro_f1(preds: &[usize], truth: &[usize]) -> f64 {
    debug_assert_eq!(preds.len(), truth.len());
    let classes: std::collections::BTreeSet<usize> = truth.iter().cloned().collect();
    let mut sum = 0.0;
    for &k in &classes {
        let tp = preds.iter().zip(truth).filter(|(p, t)| **p == k && **t == k).count() as f64;
        let fp = preds.iter().zip(truth).filter(|(p, t)| **p == k && **t != k).count() as f64;
        let fn_ = preds.iter().zip(truth).filter(|(p, t)| **p != k && **t == k).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        sum += f1;
    }
    sum / classes.len().max(1) as f64
}

/// Mean per-class recall over the classes present in the truth labels.
pub fn balanced_accuracy(preds: &[usize], truth: &[usize]) -> f64 {
    let classes: std::collections::BTreeSet<usize> = truth.iter().cloned().collect();
    let mut sum = 0.0;
    for &k in &classes {
        let total = truth.iter().filter(|t| **t == k).count() as f64;
        let hit = preds.iter().zip(truth).filter(|(p, t)| **t == k && **p == k).count() as f64;
        sum += hit / total;
    }
    sum / classes.len().max(1) as f64
}

/// Binary AUC by pair counting; ties score half.
pub fn auc_binary(scores: &[f64], truth: &[usize]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t == 1)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t == 0)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Dataset("auc needs both classes present".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Pearson correlation coefficient.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("pcc needs equal-length non-empty slices".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("constant input to pcc".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let y = vec![0, 1, 2, 1, 0];
        assert_eq!(macro_f1(&y, &y), 1.0);
        assert_eq!(balanced_accuracy(&y, &y), 1.0);
    }

    #[test]
    fn constant_predictor_hits_one_over_classes() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let preds = vec![0; 6];
        assert!((balanced_accuracy(&preds, &truth) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_hand_counted_pairs() {
        // scores (0.1-, 0.4+, 0.35-, 0.8+): pairs (p,n): (0.4,0.1)+ (0.4,0.35)+ (0.8,0.1)+ (0.8,0.35)+ => 1.0
        let scores = [0.1, 0.4, 0.35, 0.8];
        let truth = [0, 1, 0, 1];
        assert_eq!(auc_binary(&scores, &truth).unwrap(), 1.0);
        // one inversion: (0.3+,0.35-) loses => 3/4; tie counts half
        let scores = [0.35, 0.3, 0.1, 0.8];
        assert_eq!(auc_binary(&scores, &truth).unwrap(), 0.75);
        let scores = [0.5, 0.5, 0.1, 0.8];
        assert_eq!(auc_binary(&scores, &truth).unwrap(), 0.875);
        assert!(auc_binary(&[1.0], &[1]).is_err());
    }

    #[test]
    fn pcc_limits() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pcc(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [-1.0, -2.0, -3.0, -4.0];
        assert!((pcc(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pcc(&a, &[1.0; 4]), Err(Error::Metric(_))));
    }
}
