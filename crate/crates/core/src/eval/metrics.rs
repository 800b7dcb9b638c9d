//! Scalar prediction metrics and correlation coefficients.

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("auroc: scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("auroc needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auroc: NaN score".into()));
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Unweighted mean of per-class F1 over `0..k`; a class absent from both
/// predictions and labels contributes 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() || k == 0 {
        return Err(Error::InvalidArgument("macro_f1 needs equal-length nonempty inputs".into()));
    }
    let mut total = 0.0;
    for c in 0..k {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
        let fnn = preds.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fnn);
        }
    }
    Ok(total / k as f64)
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::InvalidArgument("mse needs equal-length nonempty inputs".into()));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len().max(1) as f64
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_and_mse_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap(), 0.5);
        assert_eq!(macro_f1(&[0, 0], &[0, 0], 2).unwrap(), 0.5);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn rank_correlations() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 300.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += match scores[i].total_cmp(&scores[j]) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting_and_monotone_invariance(
            data in prop::collection::vec((0i32..8, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s)).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - pair_count(&scores, &labels)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            prop_assert!((auroc(&warped, &labels).unwrap() - a).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn f1_in_unit_interval(preds in prop::collection::vec(0usize..3, 1..30), seed in 0usize..30) {
            let labels: Vec<usize> = preds.iter().enumerate().map(|(i, p)| (p + i * seed) % 3).collect();
            let f = macro_f1(&preds, &labels, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
