//! Which single-modality branch gets each sample right.

use std::path::Path;

use serde::Serialize;

use super::metrics::top_k_hits;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counts over the 2×2 table of visual-correct × text-correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct AgreementBreakdown {
    pub both: usize,
    pub visual_only: usize,
    pub text_only: usize,
    pub neither: usize,
}

impl AgreementBreakdown {
    pub fn from_hits(visual: &[bool], text: &[bool]) -> Result<Self> {
        if visual.len() != text.len() {
            return Err(Error::Dimension {
                op: "agreement",
                left: (visual.len(), 1),
                right: (text.len(), 1),
            });
        }
        let mut a = AgreementBreakdown::default();
        for (&v, &t) in visual.iter().zip(text) {
            match (v, t) {
                (true, true) => a.both += 1,
                (true, false) => a.visual_only += 1,
                (false, true) => a.text_only += 1,
                (false, false) => a.neither += 1,
            }
        }
        Ok(a)
    }

    pub fn total(&self) -> usize {
        self.both + self.visual_only + self.text_only + self.neither
    }

    /// Cells in the order both, visual only, text only, neither, as
    /// percentages of the total.
    pub fn percentages(&self) -> [f64; 4] {
        let n = self.total().max(1) as f64;
        [self.both, self.visual_only, self.text_only, self.neither].map(|c| 100.0 * c as f64 / n)
    }
}

/// Compares the top-1 predictions of a visual-only and a text-only model on
/// the same samples.
pub fn agreement_breakdown(visual: &Tensor, text: &Tensor, targets: &[usize]) -> Result<AgreementBreakdown> {
    if visual.cols() != text.cols() {
        return Err(Error::config(format!(
            "visual model has {} classes, text model has {}",
            visual.cols(),
            text.cols()
        )));
    }
    AgreementBreakdown::from_hits(&top_k_hits(visual, targets, 1)?, &top_k_hits(text, targets, 1)?)
}

pub fn agreement_csv(rows: &[(String, AgreementBreakdown)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::data(format!("csv: {e}"));
    w.write_record(["dataset", "category", "count", "percent"]).map_err(csv_err)?;
    for (name, a) in rows {
        let counts = [a.both, a.visual_only, a.text_only, a.neither];
        let labels = ["both correct", "visual only", "text only", "neither"];
        for ((label, count), pct) in labels.iter().zip(counts).zip(a.percentages()) {
            w.write_record([name.as_str(), label, &count.to_string(), &format!("{pct:.2}")])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_agreement_csv(path: &Path, rows: &[(String, AgreementBreakdown)]) -> Result<()> {
    crate::io::write_atomic(path, agreement_csv(rows)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(preds: &[usize], c: usize) -> Tensor {
        let mut t = Tensor::zeros(preds.len(), c);
        for (r, &p) in preds.iter().enumerate() {
            t.set(r, p, 1.0);
        }
        t
    }

    #[test]
    fn identical_models_have_empty_off_diagonal() {
        let l = onehot(&[0, 1, 2, 1], 3);
        let a = agreement_breakdown(&l, &l, &[0, 2, 2, 1]).unwrap();
        assert_eq!((a.visual_only, a.text_only), (0, 0));
        assert_eq!(a.total(), 4);
    }

    #[test]
    fn scripted_ten_samples() {
        let targets = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let visual = onehot(&[0, 1, 2, 0, 0, 0, 1, 1, 0, 0], 3);
        let text = onehot(&[0, 1, 0, 1, 1, 2, 0, 0, 0, 1], 3);
        let a = agreement_breakdown(&visual, &text, &targets).unwrap();
        // v: T T T T F F F T F T ; t: T T F F T T T F F F
        assert_eq!(
            a,
            AgreementBreakdown {
                both: 2,
                visual_only: 4,
                text_only: 3,
                neither: 1
            }
        );
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let r = agreement_breakdown(&onehot(&[0], 3), &onehot(&[0], 4), &[0]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_four_rows_per_dataset() {
        let a = AgreementBreakdown {
            both: 1,
            visual_only: 1,
            text_only: 1,
            neither: 1,
        };
        let s = agreement_csv(&[("ikea-like".into(), a)]).unwrap();
        assert_eq!(s.lines().count(), 5);
        assert!(s.contains("ikea-like,visual only,1,25.00"));
    }
}
