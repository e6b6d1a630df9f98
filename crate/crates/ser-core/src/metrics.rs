//! Classification and sequence metrics: confusion matrices with weighted /
//! unweighted accuracy, Levenshtein distance, and corpus-level character and
//! word error rates.

use crate::data::render_transcript;
use crate::{Error, Result};

/// Square count matrix indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<usize>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: truth.max(pred),
                classes: self.classes,
            });
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Pools another matrix into this one; aggregate metrics over folds are
    /// defined as metrics of the pooled matrix.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "confusion_merge",
                lhs: vec![self.classes],
                rhs: vec![other.classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Weighted accuracy: overall fraction correct.
    pub fn wa(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: usize = (0..self.classes).map(|c| self.count(c, c)).sum();
        trace as f64 / total as f64
    }

    /// Per-class recall; `None` for classes with no true examples.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let row: usize = (0..self.classes).map(|p| self.count(c, p)).sum();
                (row > 0).then(|| self.count(c, c) as f64 / row as f64)
            })
            .collect()
    }

    /// Unweighted accuracy: mean recall over classes present in the data.
    /// Absent classes are skipped with a warning rather than failing the run.
    pub fn ua(&self) -> f64 {
        let recalls = self.recalls();
        let present: Vec<f64> = recalls.iter().filter_map(|r| *r).collect();
        if present.len() < self.classes {
            log::warn!(
                "unweighted accuracy over {}/{} classes; the rest have no examples",
                present.len(),
                self.classes
            );
        }
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Levenshtein distance with unit insert / delete / substitute costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let (n, m) = (hyp.len(), reference.len());
    if n == 0 {
        return m;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

fn rate_over<T: PartialEq, F: Fn(&[usize]) -> Vec<T>>(
    hyps: &[Vec<usize>],
    refs: &[Vec<usize>],
    project: F,
) -> Result<f64> {
    if refs.is_empty() || hyps.len() != refs.len() {
        return Err(Error::EmptyReferences);
    }
    let mut distance = 0usize;
    let mut length = 0usize;
    for (hyp, rf) in hyps.iter().zip(refs) {
        let (h, r) = (project(hyp), project(rf));
        distance += edit_distance(&h, &r);
        length += r.len();
    }
    if length == 0 {
        return Err(Error::EmptyReferences);
    }
    Ok(distance as f64 / length as f64)
}

/// Word error rate over token sequences.
pub fn wer(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    rate_over(hyps, refs, |ids| ids.to_vec())
}

/// Character error rate over the rendered transcript strings (tokens joined
/// by single spaces; spaces count as characters).
pub fn cer(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    rate_over(hyps, refs, |ids| {
        render_transcript(ids).chars().collect::<Vec<char>>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_case() {
        // class A: 3 of 4 correct, class B: 1 of 1 correct.
        let mut c = Confusion::new(2);
        for _ in 0..3 {
            c.record(0, 0).unwrap();
        }
        c.record(0, 1).unwrap();
        c.record(1, 1).unwrap();
        assert_eq!(c.wa(), 0.8);
        assert_eq!(c.ua(), 0.875);
        assert_eq!(c.total(), 5);
    }

    #[test]
    fn perfect_predictions_hit_one() {
        let mut c = Confusion::new(4);
        for cls in 0..4 {
            for _ in 0..=cls {
                c.record(cls, cls).unwrap();
            }
        }
        assert_eq!(c.wa(), 1.0);
        assert_eq!(c.ua(), 1.0);
    }

    #[test]
    fn absent_class_is_skipped_in_ua() {
        let mut c = Confusion::new(3);
        c.record(0, 0).unwrap();
        c.record(0, 0).unwrap();
        c.record(1, 0).unwrap();
        c.record(1, 1).unwrap();
        assert_eq!(c.recalls(), vec![Some(1.0), Some(0.5), None]);
        assert_eq!(c.ua(), 0.75);
    }

    #[test]
    fn distance_pins() {
        let to_chars = |s: &str| s.chars().collect::<Vec<_>>();
        assert_eq!(edit_distance(&to_chars("abc"), &to_chars("abc")), 0);
        assert_eq!(edit_distance(&to_chars(""), &to_chars("ab")), 2);
        assert_eq!(edit_distance(&to_chars("kitten"), &to_chars("sitting")), 3);
        assert_eq!(edit_distance(&to_chars("ab"), &to_chars("")), 2);
    }

    #[test]
    fn rates_on_token_ids() {
        // hyp "ba de" vs ref "ba gi": one token substitution of two tokens;
        // rendered chars differ in 2 of 5 positions.
        let hyps = vec![vec![0, 1]];
        let refs = vec![vec![0, 2]];
        assert_eq!(wer(&hyps, &refs).unwrap(), 0.5);
        assert_eq!(cer(&hyps, &refs).unwrap(), 2.0 / 5.0);
        assert!(wer(&[], &[]).is_err());
    }

    #[test]
    fn out_of_range_and_mismatched_merge_error() {
        let mut c = Confusion::new(2);
        assert!(c.record(2, 0).is_err());
        let other = Confusion::new(3);
        assert!(c.merge(&other).is_err());
    }
}
