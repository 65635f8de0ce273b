//! Accuracy, per-group accuracy, rank-based ROC-AUC, accuracy parity and
//! the privacy cost gap. Accuracies are percentages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;

/// Group id to accuracy; `None` marks an empty group.
pub type GroupAccuracy = BTreeMap<usize, Option<f64>>;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Percentage of matching entries. An empty input is an error.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Accuracy restricted to each group. Every id in `expected` appears in the
/// result, as `None` when it has no samples.
pub fn group_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    expected: &[usize],
) -> Result<GroupAccuracy> {
    check_lengths(predictions.len(), labels.len())?;
    check_lengths(labels.len(), groups.len())?;
    let mut tally: BTreeMap<usize, (usize, usize)> = expected.iter().map(|&g| (g, (0, 0))).collect();
    for ((p, y), &g) in predictions.iter().zip(labels).zip(groups) {
        let entry = tally.entry(g).or_insert((0, 0));
        entry.1 += 1;
        if p == y {
            entry.0 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|(g, (correct, total))| (g, (total > 0).then(|| 100.0 * correct as f64 / total as f64)))
        .collect())
}

/// Mann-Whitney AUC with midranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            index: i,
            value: scores[i],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum keeps midranks integral
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1..=end share the midrank (start + 1 + end) / 2
        let twice_midrank = (start + 1 + end) as u64;
        let tied_positives = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += twice_midrank * tied_positives;
        start = end;
    }
    let p = positives as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (positives as f64 * negatives as f64))
}

/// Binary AUC on the positive-class probability, or macro one-vs-rest over
/// the classes that have both positives and negatives.
pub fn multiclass_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return roc_auc(&scores, &positive);
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let count = positive.iter().filter(|&&b| b).count();
        if count == 0 || count == labels.len() {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        total += roc_auc(&scores, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("AUC needs at least two classes present".into()));
    }
    Ok(total / used as f64)
}

/// Test-set summary of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub group_accuracy: GroupAccuracy,
    pub auc: f64,
}

/// Scores class-probability rows against labels and groups. Groups
/// `0..classes` are always reported.
pub fn evaluate(probs: &[Vec<f64>], labels: &[usize], groups: &[usize], classes: usize) -> Result<Evaluation> {
    let predictions: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let expected: Vec<usize> = (0..classes).collect();
    Ok(Evaluation {
        accuracy: accuracy(&predictions, labels)?,
        group_accuracy: group_accuracy(&predictions, labels, groups, &expected)?,
        auc: multiclass_auc(probs, labels, classes)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostGap {
    pub pi_a: f64,
    pub pi_b: f64,
    pub gap: f64,
}

fn group_value(acc: &GroupAccuracy, group: usize) -> Result<f64> {
    match acc.get(&group) {
        Some(Some(v)) => Ok(*v),
        Some(None) => Err(Error::Metric(format!("group {group} is empty"))),
        None => Err(Error::Metric(format!("group {group} is missing"))),
    }
}

/// Mean over private runs of per-group accuracy, subtracted from the
/// non-private accuracy of that group.
pub fn accuracy_parity(nonprivate: &GroupAccuracy, private: &[GroupAccuracy], group: usize) -> Result<f64> {
    if private.is_empty() {
        return Err(Error::Metric("need at least one private run".into()));
    }
    let reference = group_value(nonprivate, group)?;
    let mut sum = 0.0;
    for run in private {
        sum += group_value(run, group)?;
    }
    Ok(reference - sum / private.len() as f64)
}

/// `(π_a, π_b, |π_a - π_b|)`.
pub fn privacy_cost_gap(nonprivate: &GroupAccuracy, private: &[GroupAccuracy], a: usize, b: usize) -> Result<CostGap> {
    let pi_a = accuracy_parity(nonprivate, private, a)?;
    let pi_b = accuracy_parity(nonprivate, private, b)?;
    Ok(CostGap {
        pi_a,
        pi_b,
        gap: (pi_a - pi_b).abs(),
    })
}

/// Private-run averages plus parity against a non-private reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub group_accuracy: BTreeMap<usize, f64>,
    pub auc: f64,
    pub parity: BTreeMap<usize, f64>,
    pub gap_groups: Option<(usize, usize)>,
    pub gap: Option<CostGap>,
    pub repetitions: usize,
    pub warnings: Vec<String>,
}

impl FairnessReport {
    /// Groups empty in any run are left out of the group maps and noted in
    /// `warnings`. `gap_groups` selects the pair for the cost gap.
    pub fn build(nonprivate: &Evaluation, private: &[Evaluation], gap_groups: Option<(usize, usize)>) -> Result<Self> {
        if private.is_empty() {
            return Err(Error::Metric("need at least one private run".into()));
        }
        let s = private.len() as f64;
        let mean = |f: &dyn Fn(&Evaluation) -> f64| private.iter().map(f).sum::<f64>() / s;
        let runs: Vec<GroupAccuracy> = private.iter().map(|e| e.group_accuracy.clone()).collect();

        let mut group_accuracy = BTreeMap::new();
        let mut parity = BTreeMap::new();
        let mut warnings = Vec::new();
        for &g in nonprivate.group_accuracy.keys() {
            match accuracy_parity(&nonprivate.group_accuracy, &runs, g) {
                Ok(pi) => {
                    let mean_acc = runs.iter().map(|r| r[&g].unwrap_or(0.0)).sum::<f64>() / s;
                    group_accuracy.insert(g, mean_acc);
                    parity.insert(g, pi);
                }
                Err(e) => warnings.push(format!("group {g} excluded: {e}")),
            }
        }
        let gap = match gap_groups {
            Some((a, b)) => Some(privacy_cost_gap(&nonprivate.group_accuracy, &runs, a, b)?),
            None => None,
        };
        Ok(Self {
            accuracy: mean(&|e| e.accuracy),
            group_accuracy,
            auc: mean(&|e| e.auc),
            parity,
            gap_groups,
            gap,
            repetitions: private.len(),
            warnings,
        })
    }
}
