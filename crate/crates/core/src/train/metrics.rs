use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// False when the class is absent from both predictions and labels.
    pub counted: bool,
}

/// Per-class and macro precision/recall/F1 plus the confusion matrix.
///
/// A ratio with a zero denominator is 0. Classes that never occur in either
/// predictions or labels are left out of the macro means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_prf1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(TensorError::invalid("metrics", "no predictions"));
    }
    if preds.len() != labels.len() {
        return Err(TensorError::invalid(
            "metrics",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(TensorError::invalid(
                "metrics",
                format!("class index out of range for {num_classes} classes"),
            ));
        }
        confusion[l][p] += 1;
    }
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        classes.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
            counted: support + predicted > 0,
        });
    }
    let counted: Vec<&ClassMetrics> = classes.iter().filter(|c| c.counted).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| counted.iter().map(|c| f(c)).sum::<f64>() / counted.len() as f64;
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: correct as f64 / preds.len() as f64,
        classes,
        confusion,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy = {:.6}", self.accuracy)?;
        writeln!(f, "macro_precision = {:.6}", self.macro_precision)?;
        writeln!(f, "macro_recall = {:.6}", self.macro_recall)?;
        writeln!(f, "macro_f1 = {:.6}", self.macro_f1)?;
        writeln!(f, "# class precision recall f1 support")?;
        for (i, c) in self.classes.iter().enumerate() {
            let mark = if c.counted { "" } else { " (excluded)" };
            writeln!(
                f,
                "class.{i} = {:.6} {:.6} {:.6} {}{mark}",
                c.precision, c.recall, c.f1, c.support
            )?;
        }
        writeln!(f, "# confusion rows = true class, columns = predicted")?;
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(f, "confusion.{i} = {}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = macro_prf1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let r = macro_prf1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        for c in &r.classes {
            assert_eq!((c.precision, c.recall, c.f1), (0.5, 0.5, 0.5));
        }
        assert_eq!(r.macro_f1, 0.5);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
    }

    #[test]
    fn absent_class_is_excluded() {
        let r = macro_prf1(&[0, 1], &[0, 1], 3).unwrap();
        assert!(!r.classes[2].counted);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn never_predicted_class_scores_zero() {
        let r = macro_prf1(&[0, 0], &[0, 1], 2).unwrap();
        assert_eq!(r.classes[1].precision, 0.0);
        assert_eq!(r.classes[1].f1, 0.0);
        assert!(r.classes[1].counted);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(macro_prf1(&[], &[], 2).is_err());
        assert!(macro_prf1(&[0], &[0, 1], 2).is_err());
        assert!(macro_prf1(&[2], &[0], 2).is_err());
    }

    #[test]
    fn argmax_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
