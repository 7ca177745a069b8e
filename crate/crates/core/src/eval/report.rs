use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

/// Confusion matrix (rows: true class, columns: predicted class) with
/// per-class and averaged accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    /// Diagonal of the row-normalized matrix; `None` for classes absent
    /// from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean of the per-class accuracies over the classes present.
    pub average_accuracy: f64,
    /// Correct decisions over all decisions.
    pub overall_accuracy: f64,
    pub total: usize,
    pub correct: usize,
}

impl ClassReport {
    pub fn from_pairs(labels: &[&str], pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let k = labels.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
        let per_class_accuracy: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let average_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            confusion,
            per_class_accuracy,
            average_accuracy,
            overall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            total,
            correct,
        }
    }

    /// One-sided binomial p-value of the correct count against guessing
    /// uniformly among the classes.
    pub fn chance_p_value(&self) -> f64 {
        binomial_p_value(self.correct, self.total, 1.0 / self.labels.len() as f64)
    }

    /// Plain-text table: per-class accuracy in percent, then the average.
    pub fn to_table(&self, title: &str) -> String {
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{title}\n");
        for (label, acc) in self.labels.iter().zip(&self.per_class_accuracy) {
            let cell = acc.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
            out += &format!("  {label:<width$}  {cell:>6}\n");
        }
        out += &format!("  {:<width$}  {:>6.1}\n", "average", 100.0 * self.average_accuracy);
        out
    }
}

/// P(X >= successes) for X ~ Binomial(trials, p).
pub fn binomial_p_value(successes: usize, trials: usize, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    let dist = Binomial::new(p, trials as u64).expect("p lies in [0, 1]");
    dist.sf(successes as u64 - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_class_counts() {
        let r = ClassReport::from_pairs(&["a", "b", "c"], [(0, 0), (0, 1), (1, 1), (2, 0), (2, 2), (2, 2)]);
        let rows: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(rows, vec![2, 1, 3]);
        assert_eq!(r.per_class_accuracy, vec![Some(0.5), Some(1.0), Some(2.0 / 3.0)]);
        assert!((r.average_accuracy - (0.5 + 1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!((r.correct, r.total), (4, 6));
    }

    #[test]
    fn absent_class_is_left_out_of_the_average() {
        let r = ClassReport::from_pairs(&["a", "b"], [(0, 0), (0, 1)]);
        assert_eq!(r.per_class_accuracy, vec![Some(0.5), None]);
        assert_eq!(r.average_accuracy, 0.5);
        assert!(r.to_table("t").contains("  -"));
    }

    #[test]
    fn binomial_tail_matches_direct_sum() {
        // P(X >= 3), n = 5, p = 0.2, summed by hand
        let choose = |n: u64, k: u64| (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64);
        let direct: f64 = (3..=5).map(|k| choose(5, k) * 0.2f64.powi(k as i32) * 0.8f64.powi(5 - k as i32)).sum();
        assert!((binomial_p_value(3, 5, 0.2) - direct).abs() < 1e-12);
        assert_eq!(binomial_p_value(0, 10, 0.3), 1.0);
        assert!(binomial_p_value(60, 60, 0.2) < 1e-40);
    }
}
