//! Top-k accuracy, class-mean top-5 recall and the per-class table.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(logits: &Tensor, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    if logits.rows() != targets.len() {
        return Err(Error::Dimension {
            op: "metrics",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Label {
            target: t,
            classes: logits.cols(),
        });
    }
    if !logits.is_finite() {
        return Err(Error::Metric("non-finite logits".into()));
    }
    Ok(())
}

/// Position of `target` when the row is ordered by descending logit, equal
/// logits ordered by ascending class id.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

/// Per-sample hit flags for top-k membership.
pub fn top_k_hits(logits: &Tensor, targets: &[usize], k: usize) -> Result<Vec<bool>> {
    check(logits, targets)?;
    if k == 0 || k > logits.cols() {
        return Err(Error::config(format!(
            "k={k} outside 1..={}",
            logits.cols()
        )));
    }
    Ok(targets
        .iter()
        .enumerate()
        .map(|(r, &t)| rank_of(logits.row(r), t) < k)
        .collect())
}

pub fn top_k_accuracy(logits: &Tensor, targets: &[usize], k: usize) -> Result<f64> {
    let hits = top_k_hits(logits, targets, k)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Top-5 is capped at C when there are fewer than five classes.
fn five(c: usize) -> usize {
    c.min(5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRecall {
    pub class: usize,
    pub count: usize,
    pub recall: f64,
}

fn per_class(logits: &Tensor, targets: &[usize]) -> Result<Vec<ClassRecall>> {
    let hits = top_k_hits(logits, targets, five(logits.cols()))?;
    let mut counts = vec![(0usize, 0usize); logits.cols()];
    for (&t, &h) in targets.iter().zip(&hits) {
        counts[t].0 += 1;
        counts[t].1 += h as usize;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(class, (n, h))| ClassRecall {
            class,
            count: n,
            recall: h as f64 / n as f64,
        })
        .collect())
}

/// Unweighted mean over classes that occur in `targets` of each class's
/// top-5 hit rate.
pub fn class_mean_top5_recall(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let table = per_class(logits, targets)?;
    Ok(table.iter().map(|c| c.recall).sum::<f64>() / table.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub recall_at_5_class_mean: f64,
    pub per_class: Vec<ClassRecall>,
}

impl MetricsRecord {
    pub fn compute(logits: &Tensor, targets: &[usize]) -> Result<Self> {
        let per_class = per_class(logits, targets)?;
        let recall = per_class.iter().map(|c| c.recall).sum::<f64>() / per_class.len() as f64;
        Ok(MetricsRecord {
            samples: targets.len(),
            top1: top_k_accuracy(logits, targets, 1)?,
            top5: top_k_accuracy(logits, targets, five(logits.cols()))?,
            recall_at_5_class_mean: recall,
            per_class,
        })
    }

    /// Aligned human-readable summary.
    pub fn table(&self) -> String {
        let mut s = format!(
            "samples  {:>8}\ntop1     {:>8.2}\ntop5     {:>8.2}\nrecall@5 {:>8.2}\n",
            self.samples,
            100.0 * self.top1,
            100.0 * self.top5,
            100.0 * self.recall_at_5_class_mean
        );
        s.push_str("class    count   recall\n");
        for c in &self.per_class {
            s.push_str(&format!("{:>5} {:>8} {:>8.2}\n", c.class, c.count, 100.0 * c.recall));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn k_equal_c_is_one_and_perfect_argmax_is_one() {
        let l = t(&[&[0.1, 0.9, 0.0], &[2.0, 1.0, 0.0]]);
        assert_eq!(top_k_accuracy(&l, &[2, 2], 3).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&l, &[1, 0], 1).unwrap(), 1.0);
    }

    #[test]
    fn top5_hand_case() {
        // six classes; a target ranked sixth misses
        let l = t(&[
            &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        // all-zero rows rank by class id
        assert_eq!(top_k_accuracy(&l, &[5, 1, 4, 3], 5).unwrap(), 0.75);
        assert_eq!(top_k_accuracy(&l, &[5, 1, 5, 0], 5).unwrap(), 0.5);
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let l = t(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(top_k_accuracy(&l, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&l, &[1], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&l, &[1], 2).unwrap(), 1.0);
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let l = t(&[&[1.0, 0.0]]);
        assert!(matches!(top_k_accuracy(&l, &[0], 0), Err(Error::Config(_))));
        assert!(matches!(top_k_accuracy(&l, &[0], 3), Err(Error::Config(_))));
    }

    #[test]
    fn recall_is_unweighted_over_present_classes() {
        // 7 classes so top-5 can miss; class 0 always hit, class 1 never.
        let hit: &[f64] = &[9.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let miss: &[f64] = &[9.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let l = t(&[hit, hit, hit, miss]);
        assert_eq!(class_mean_top5_recall(&l, &[0, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn recall_hand_case_skips_absent_class() {
        // recalls: class 0 → 1, class 1 → 0.5, class 2 absent
        let l = t(&[
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            &[5.0, -1.0, 4.0, 3.0, 2.0, 1.0, 0.5],
        ]);
        assert_eq!(class_mean_top5_recall(&l, &[0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn record_fields() {
        let l = t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let r = MetricsRecord::compute(&l, &[0, 0, 1]).unwrap();
        assert_eq!(r.samples, 3);
        assert!((r.top1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.top5, 1.0);
        assert_eq!(r.per_class.len(), 2);
        assert!(r.table().contains("top1"));
    }

    #[test]
    fn empty_or_nan_input_is_metric_error() {
        assert!(matches!(
            top_k_accuracy(&Tensor::zeros(0, 3), &[], 1),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            top_k_accuracy(&t(&[&[f64::NAN, 0.0]]), &[0], 1),
            Err(Error::Metric(_))
        ));
    }
}
