use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    /// Counts from hard predictions against truth; class 1 is positive.
    pub fn from_labels(predicted: &[u8], truth: &[u8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (1, 1) => c.tp += 1,
                (0, 0) => c.tn += 1,
                (1, _) => c.fp += 1,
                _ => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::Empty("confusion counts"));
    }
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// `TP / (TP + (FP + FN) / 2)`; defined as 0 when `TP + FP + FN == 0`.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64;
    if denom == 0.0 {
        0.0
    } else {
        c.tp as f64 / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Mann-Whitney AUC, `P(s_pos > s_neg) + P(s_pos == s_neg) / 2`, and the ROC
/// curve with one point per distinct score (plus the origin).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<RocPoint>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::non_finite("AUC scores"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // tie groups in ascending score order: (score, positives, negatives)
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for &i in &order {
        let is_pos = labels[i] == 1;
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                if is_pos {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((scores[i], is_pos as u64, !is_pos as u64)),
        }
    }
    // twice the Mann-Whitney U, kept integral until the final division
    let mut twice_u = 0u128;
    let mut neg_below = 0u128;
    for &(_, pos, neg) in &groups {
        twice_u += pos as u128 * (2 * neg_below + neg as u128);
        neg_below += neg as u128;
    }
    let auc = twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64);

    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for &(score, pos, neg) in groups.iter().rev() {
        tp += pos;
        fp += neg;
        roc.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok((auc, roc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(accuracy(&ConfusionCounts::new(50, 30, 10, 10)).unwrap(), 0.8);
        assert_eq!(accuracy(&ConfusionCounts::new(3, 4, 0, 0)).unwrap(), 1.0);
        assert!(accuracy(&ConfusionCounts::default()).is_err());
        assert_eq!(f1(&ConfusionCounts::new(8, 0, 2, 2)), 0.8);
        assert_eq!(f1(&ConfusionCounts::new(0, 5, 3, 1)), 0.0);
        assert_eq!(f1(&ConfusionCounts::new(0, 5, 0, 0)), 0.0);
    }

    #[test]
    fn auc_fixtures() {
        let (auc, roc) = roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(roc.len(), 5);
        assert_eq!((roc[2].fpr, roc[2].tpr), (0.0, 1.0));
        assert_eq!(roc_auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap().0, 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn counts_from_labels() {
        let c = ConfusionCounts::from_labels(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]);
        assert_eq!(c, ConfusionCounts::new(2, 1, 1, 1));
    }
}
