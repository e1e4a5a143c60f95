//! Evaluation: accuracy, confusion matrices, cross-fold aggregation, and a
//! nearest-centroid pixel-space baseline.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{save_png, RawImage};

/// Fraction of correct predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(
            "accuracy",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// K×K count matrix; rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::invalid(
                "confusion_matrix",
                format!("{} predictions vs {} labels", predictions.len(), labels.len()),
            ));
        }
        if let Some(&bad) = predictions.iter().chain(labels).find(|&&i| i >= k) {
            return Err(Error::invalid(
                "confusion_matrix",
                format!("index {bad} out of range for {k} labels"),
            ));
        }
        let mut counts = vec![0u64; k * k];
        for (&p, &l) in predictions.iter().zip(labels) {
            counts[l * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + i]).sum()
    }

    /// trace/sum; by construction equals [`accuracy`] on the same inputs.
    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Cell-wise merge of two evaluations.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.k != other.k {
            return Err(Error::invalid(
                "confusion_matrix",
                format!("merging {}×{} with {}×{}", self.k, self.k, other.k, other.k),
            ));
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(ConfusionMatrix { k: self.k, counts })
    }

    /// Row-normalized percentages; rows with no samples render as zeros.
    pub fn row_normalized(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k * self.k];
        for r in 0..self.k {
            let row_sum: u64 = self.counts[r * self.k..(r + 1) * self.k].iter().sum();
            if row_sum > 0 {
                for c in 0..self.k {
                    out[r * self.k + c] =
                        100.0 * self.counts[r * self.k + c] as f64 / row_sum as f64;
                }
            }
        }
        out
    }

    /// Per-label accuracy (diagonal of the row-normalized view, as a
    /// fraction); `None` for labels with no samples.
    pub fn per_label_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|r| {
                let row_sum: u64 = self.counts[r * self.k..(r + 1) * self.k].iter().sum();
                if row_sum == 0 {
                    None
                } else {
                    Some(self.counts[r * self.k + r] as f64 / row_sum as f64)
                }
            })
            .collect()
    }

    /// CSV rendering: header row of predicted labels, then one row per true
    /// label with raw counts.
    pub fn to_csv(&self, label_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in label_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for r in 0..self.k {
            let _ = write!(out, "{}", label_names[r]);
            for c in 0..self.k {
                let _ = write!(out, ",{}", self.counts[r * self.k + c]);
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalized percentage grid as fixed-width text.
    pub fn to_text(&self) -> String {
        let pct = self.row_normalized();
        let mut out = String::new();
        for r in 0..self.k {
            for c in 0..self.k {
                let _ = write!(out, "{:6.1}", pct[r * self.k + c]);
            }
            out.push('\n');
        }
        out
    }

    /// Grayscale heat map PNG of the row-normalized matrix, one cell per
    /// `cell` pixels.
    pub fn save_heatmap(&self, path: &Path, cell: usize) -> Result<()> {
        let pct = self.row_normalized();
        let side = self.k * cell;
        let mut pixels = vec![0u8; side * side];
        for r in 0..self.k {
            for c in 0..self.k {
                let v = (pct[r * self.k + c] / 100.0 * 255.0).round() as u8;
                for dy in 0..cell {
                    for dx in 0..cell {
                        pixels[(r * cell + dy) * side + c * cell + dx] = v;
                    }
                }
            }
        }
        let img = RawImage::new(side, side, 1, pixels)?;
        save_png(&img, path)
    }
}

/// Mean and sample standard deviation of per-fold accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Sample (n−1) standard deviation; undefined for a single fold.
    pub std: Option<f64>,
}

/// Aggregates per-fold accuracies into mean ± sample std.
pub fn aggregate_folds(per_fold: &[f64]) -> Result<FoldSummary> {
    if per_fold.is_empty() {
        return Err(Error::invalid("aggregate_folds", "no folds".to_string()));
    }
    let n = per_fold.len() as f64;
    let mean = per_fold.iter().sum::<f64>() / n;
    let std = if per_fold.len() >= 2 {
        let ss: f64 = per_fold.iter().map(|a| (a - mean) * (a - mean)).sum();
        Some((ss / (n - 1.0)).sqrt())
    } else {
        None
    };
    Ok(FoldSummary { per_fold: per_fold.to_vec(), mean, std })
}

impl FoldSummary {
    /// `"mm.mm ± s.ss"` with accuracies given as percentages.
    pub fn format_percent(&self) -> String {
        match self.std {
            Some(std) => format!("{:.2} ± {:.2}", self.mean * 100.0, std * 100.0),
            None => format!("{:.2}", self.mean * 100.0),
        }
    }
}

/// Nearest-centroid classification in feature space: centroids from the
/// training pairs, L2-nearest prediction on the test pairs. Serves as the
/// pixel-space baseline when features are flattened pixels.
pub fn nearest_centroid_accuracy(
    train: &[(Vec<f32>, usize)],
    test: &[(Vec<f32>, usize)],
    num_labels: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("nearest_centroid", "empty train or test set".to_string()));
    }
    let dim = train[0].0.len();
    let mut centroids = vec![vec![0.0f64; dim]; num_labels];
    let mut counts = vec![0usize; num_labels];
    for (x, y) in train {
        counts[*y] += 1;
        for (c, v) in centroids[*y].iter_mut().zip(x) {
            *c += *v as f64;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for c in centroid.iter_mut() {
                *c /= count as f64;
            }
        }
    }
    let mut predictions = Vec::with_capacity(test.len());
    let labels: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    for (x, _) in test {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (label, centroid) in centroids.iter().enumerate() {
            if counts[label] == 0 {
                continue;
            }
            let d: f64 = centroid
                .iter()
                .zip(x)
                .map(|(c, v)| (c - *v as f64) * (c - *v as f64))
                .sum();
            if d < best_d {
                best_d = d;
                best = label;
            }
        }
        predictions.push(best);
    }
    accuracy(&predictions, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn accuracy_basic_values() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_diagonal_for_perfect_predictions() {
        let labels = [0usize, 1, 2, 1, 0];
        let cm = ConfusionMatrix::new(&labels, &labels, 3).unwrap();
        assert_eq!(cm.trace(), 5);
        assert_eq!(cm.total(), 5);
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    assert_eq!(cm.counts[r * 3 + c], 0);
                }
            }
        }
    }

    #[test]
    fn confusion_hand_tally() {
        // true 0 → predicted [0,0,1]; true 1 → [2,1]; true 2 → [2].
        let labels = [0, 0, 0, 1, 1, 2];
        let preds = [0, 0, 1, 2, 1, 2];
        let cm = ConfusionMatrix::new(&preds, &labels, 3).unwrap();
        assert_eq!(cm.counts, vec![2, 1, 0, 0, 1, 1, 0, 0, 1]);
        assert!((cm.accuracy() - 4.0 / 6.0).abs() < 1e-12);
        let expected = accuracy(&preds, &labels).unwrap();
        assert_eq!(cm.accuracy(), expected);
    }

    #[test]
    fn confusion_rejects_out_of_range() {
        assert!(ConfusionMatrix::new(&[3], &[0], 3).is_err());
        assert!(ConfusionMatrix::new(&[0], &[3], 3).is_err());
    }

    #[test]
    fn confusion_trace_over_sum_equals_accuracy_on_random_sets() {
        let mut rng = SeedRng::from_seed(17);
        for _ in 0..200 {
            let n = 1 + rng.range_usize(50);
            let k = 2 + rng.range_usize(6);
            let preds: Vec<usize> = (0..n).map(|_| rng.range_usize(k)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.range_usize(k)).collect();
            let cm = ConfusionMatrix::new(&preds, &labels, k).unwrap();
            let acc = accuracy(&preds, &labels).unwrap();
            assert!((cm.accuracy() - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let preds = [0, 1, 2, 0, 1, 1];
        let labels = [0, 1, 1, 0, 2, 1];
        let perm = [5, 3, 1, 0, 4, 2];
        let preds_p: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(
            accuracy(&preds, &labels).unwrap(),
            accuracy(&preds_p, &labels_p).unwrap()
        );
        let a = ConfusionMatrix::new(&preds, &labels, 3).unwrap();
        let b = ConfusionMatrix::new(&preds_p, &labels_p, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn merged_matrices_equal_concatenated_evaluation() {
        let (p1, l1) = ([0, 1, 1], [0, 1, 2]);
        let (p2, l2) = ([2, 2, 0, 1], [2, 0, 0, 1]);
        let a = ConfusionMatrix::new(&p1, &l1, 3).unwrap();
        let b = ConfusionMatrix::new(&p2, &l2, 3).unwrap();
        let merged = a.merge(&b).unwrap();
        let concat_p: Vec<usize> = p1.iter().chain(p2.iter()).copied().collect();
        let concat_l: Vec<usize> = l1.iter().chain(l2.iter()).copied().collect();
        let direct = ConfusionMatrix::new(&concat_p, &concat_l, 3).unwrap();
        assert_eq!(merged, direct);
    }

    #[test]
    fn fold_aggregation_textbook_values() {
        let s = aggregate_folds(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, Some(1.0));

        let s = aggregate_folds(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s.std, Some(0.0));

        let s = aggregate_folds(&[0.7]).unwrap();
        assert_eq!(s.std, None);
        assert!(s.mean >= 0.7 - 1e-12);
    }

    #[test]
    fn fold_summary_formatting() {
        let s = aggregate_folds(&[0.9929, 0.9931, 0.9910, 0.9940, 0.9935]).unwrap();
        let text = s.format_percent();
        assert!(text.starts_with("99.29"), "{text}");
        assert!(text.contains(" ± "), "{text}");
        // Two decimals on both sides.
        let parts: Vec<&str> = text.split(" ± ").collect();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].split('.').nth(1).unwrap().len(), 2);
        assert_eq!(parts[1].split('.').nth(1).unwrap().len(), 2);
    }

    #[test]
    fn nearest_centroid_separates_identical_clusters() {
        let train = vec![
            (vec![0.0, 0.0], 0),
            (vec![0.1, 0.0], 0),
            (vec![1.0, 1.0], 1),
            (vec![0.9, 1.0], 1),
        ];
        let test = vec![(vec![0.05, 0.0], 0), (vec![0.95, 1.0], 1)];
        assert_eq!(nearest_centroid_accuracy(&train, &test, 2).unwrap(), 1.0);
    }
}
