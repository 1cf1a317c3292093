use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} cannot be ranked")));
    }
    Ok(())
}

/// Sorts by score and counts, per tie group, positives above earlier
/// negatives (1 each) and within-group pairs (1/2 each). Computed in
/// integer half-units so the result is exact up to the final division.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({n_pos} positive, {n_neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Quadratic pair counting; reference for [`auc`].
pub fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (mut twice_wins, mut pairs) = (0u128, 0u128);
    for (i, &li) in labels.iter().enumerate() {
        if li == 0 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                twice_wins += 2;
            } else if scores[i] == scores[j] {
                twice_wins += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    Ok(twice_wins as f64 / (2 * pairs) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uauc {
    pub value: f64,
    /// Users with both a positive and a negative label.
    pub eligible_users: usize,
}

/// Unweighted mean of per-user AUC over users having both classes.
pub fn uauc(scores: &[f64], labels: &[u8], users: &[u64]) -> Result<Uauc> {
    check_inputs(scores, labels)?;
    if users.len() != scores.len() {
        return Err(Error::shape(format!("{} scores vs {} user ids", scores.len(), users.len())));
    }
    let mut groups: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &l), &u) in scores.iter().zip(labels).zip(users) {
        let e = groups.entry(u).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    let mut total = 0.0;
    let mut eligible = 0;
    for (s, l) in groups.values() {
        match auc(s, l) {
            Ok(a) => {
                total += a;
                eligible += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if eligible == 0 {
        return Err(Error::UndefinedMetric("no user has both classes".into()));
    }
    Ok(Uauc { value: total / eligible as f64, eligible_users: eligible })
}

/// Mean binary cross-entropy of logits against 0/1 labels.
pub fn logloss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(logits, labels)?;
    if logits.is_empty() {
        return Err(Error::UndefinedMetric("log-loss of an empty set".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * f64::from(u8::from(y != 0)) + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / logits.len() as f64)
}
