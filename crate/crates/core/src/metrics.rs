//! ROC-AUC metrics and paired comparison statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. `labels` are 0 (negative) or 1 (positive).
pub fn roc_auc_binary(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("binary label {y} is not 0 or 1")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("ROC-AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OvoWeighting {
    /// Unweighted mean over ordered class pairs.
    #[default]
    Macro,
    /// Pairs weighted by the share of rows carrying either class.
    Prevalence,
}

/// One-vs-one multiclass AUC from a row-major `T x C` probability matrix.
/// Each ordered pair `(i, j)` scores rows of class `i` or `j` by
/// `p_i / (p_i + p_j)`; pairs with an absent class are skipped.
pub fn roc_auc_ovo(probs: &[f64], n_classes: usize, labels: &[usize], weighting: OvoWeighting) -> Result<f64> {
    if n_classes < 2 || probs.len() != labels.len() * n_classes {
        return Err(Error::Data(format!(
            "{} probabilities do not form {} rows of {n_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::Data(format!("label {y} outside {n_classes} classes")));
        }
        counts[y] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Data("ROC-AUC needs at least two classes present".into()));
    }
    let (mut total, mut weights) = (0.0, 0.0);
    let mut scores = Vec::new();
    let mut binary = Vec::new();
    for i in 0..n_classes {
        for j in 0..n_classes {
            if i == j || counts[i] == 0 || counts[j] == 0 {
                continue;
            }
            scores.clear();
            binary.clear();
            for (r, &y) in labels.iter().enumerate() {
                if y != i && y != j {
                    continue;
                }
                let (pi, pj) = (probs[r * n_classes + i], probs[r * n_classes + j]);
                let s = if pi + pj > 0.0 { pi / (pi + pj) } else { 0.5 };
                scores.push(s);
                binary.push(usize::from(y == i));
            }
            let auc = roc_auc_binary(&scores, &binary)?;
            let w = match weighting {
                OvoWeighting::Macro => 1.0,
                OvoWeighting::Prevalence => (counts[i] + counts[j]) as f64,
            };
            total += w * auc;
            weights += w;
        }
    }
    Ok(total / weights)
}

/// Result of a paired one-sided sign test of `a > b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// One-sided exact sign test that paired values `a` tend to exceed `b`.
/// Ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if n == 0 || wins == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        dist.sf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Percentile bootstrap confidence interval of the mean.
pub fn bootstrap_mean_ci(xs: &[f64], level: f64, resamples: usize, rng: &mut impl Rng) -> (f64, f64) {
    assert!(!xs.is_empty(), "bootstrap needs data");
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64) as usize).min(resamples - 1)];
    (at(alpha), at(1.0 - alpha))
}
