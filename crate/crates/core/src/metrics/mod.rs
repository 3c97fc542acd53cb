//! Evaluation: confusion matrix, per-class and aggregate rates, one-vs-rest
//! AUROC, MAE, bootstrap intervals and paired t-tests.

mod stats;

pub use stats::{bootstrap_ci, paired_t_test, TTest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true grades, columns predicted grades.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn to_csv(&self) -> String {
        let k = self.num_classes();
        let mut out = String::from("true\\pred");
        for c in 0..k {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(true_labels: &[usize], pred_labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Input(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&y, &p) in true_labels.iter().zip(pred_labels) {
        if y >= k || p >= k {
            return Err(Error::Input(format!("label pair ({y}, {p}) out of range for K={k}")));
        }
        counts[y][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

/// How the predictions behind a report were produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tau: Option<f64>,
    pub ensemble_members: usize,
    pub combine: Option<String>,
    pub tta_views: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Mean over classes present in the ground truth.
    pub macro_avg: Aggregate,
    /// Support-weighted mean.
    pub weighted_avg: Aggregate,
    pub auroc_macro: Option<f64>,
    pub mae: f64,
    pub accuracy_ci: Option<(f64, f64)>,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub provenance: Provenance,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Everything except AUROC. Any 0/0 rate is 0.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Input("empty confusion matrix".into()));
    }
    let k = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let support = cm.support(c);
            let predicted = cm.predicted(c);
            let fp = predicted - tp;
            let fn_ = support - tp;
            let tn = n - tp - fp - fn_;
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                specificity: ratio(tn, tn + fp),
                support,
            }
        })
        .collect();

    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let count = present.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / count;
    let weighted =
        |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n as f64;
    let macro_avg = Aggregate {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        specificity: mean(|m| m.specificity),
    };
    let weighted_avg = Aggregate {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        specificity: weighted(|m| m.specificity),
    };
    let abs_err: u64 = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| cm.counts[i][j] * i.abs_diff(j) as u64)
        .sum();

    Ok(MetricsReport {
        n,
        accuracy: cm.trace() as f64 / n as f64,
        per_class,
        macro_avg,
        weighted_avg,
        auroc_macro: None,
        mae: abs_err as f64 / n as f64,
        accuracy_ci: None,
        confusion: cm.clone(),
        provenance: Provenance::default(),
    })
}

pub fn mae(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    if true_labels.len() != pred_labels.len() || true_labels.is_empty() {
        return Err(Error::Input(format!(
            "mae needs equal non-empty inputs, got {} and {}",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let total: usize = true_labels
        .iter()
        .zip(pred_labels)
        .map(|(&y, &p)| y.abs_diff(p))
        .sum();
    Ok(total as f64 / true_labels.len() as f64)
}

pub fn accuracy(true_labels: &[usize], pred_labels: &[usize]) -> f64 {
    let hits = true_labels.iter().zip(pred_labels).filter(|(y, p)| y == p).count();
    ratio(hits as u64, true_labels.len() as u64)
}

/// Macro mean over classes with at least one positive and one negative of
/// the pairwise AUROC, ties counting one half.
pub fn auroc_ovr_macro(scores: &[Vec<f32>], true_labels: &[usize]) -> Result<f64> {
    if scores.len() != true_labels.len() {
        return Err(Error::Input(format!(
            "{} score rows vs {} labels",
            scores.len(),
            true_labels.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) {
        return Err(Error::Input("ragged score rows".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for c in 0..k {
        let mut neg: Vec<f32> = Vec::new();
        let mut pos: Vec<f32> = Vec::new();
        for (row, &y) in scores.iter().zip(true_labels) {
            if y == c {
                pos.push(row[c]);
            } else {
                neg.push(row[c]);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        neg.sort_by(f32::total_cmp);
        // doubled pair count keeps everything integral
        let mut twice: u64 = 0;
        for &p in &pos {
            let below = neg.partition_point(|&v| v < p) as u64;
            let not_above = neg.partition_point(|&v| v <= p) as u64;
            twice += 2 * below + (not_above - below);
        }
        total += twice as f64 / 2.0 / (pos.len() as f64 * neg.len() as f64);
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(total / used as f64)
}

impl MetricsReport {
    /// Column order of [`MetricsReport::csv_row`].
    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "n", "accuracy", "macro_precision", "macro_recall", "macro_f1", "macro_specificity",
            "weighted_precision", "weighted_recall", "weighted_f1", "weighted_specificity",
            "auroc_macro", "mae", "accuracy_ci_lo", "accuracy_ci_hi", "tau",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        for c in 0..self.per_class.len() {
            for m in ["precision", "recall", "f1", "specificity", "support"] {
                cols.push(format!("class{c}_{m}"));
            }
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut cols = vec![
            self.n.to_string(),
            self.accuracy.to_string(),
            self.macro_avg.precision.to_string(),
            self.macro_avg.recall.to_string(),
            self.macro_avg.f1.to_string(),
            self.macro_avg.specificity.to_string(),
            self.weighted_avg.precision.to_string(),
            self.weighted_avg.recall.to_string(),
            self.weighted_avg.f1.to_string(),
            self.weighted_avg.specificity.to_string(),
            opt(self.auroc_macro),
            self.mae.to_string(),
            opt(self.accuracy_ci.map(|c| c.0)),
            opt(self.accuracy_ci.map(|c| c.1)),
            opt(self.provenance.tau),
        ];
        for m in &self.per_class {
            cols.extend([
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.specificity.to_string(),
                m.support.to_string(),
            ]);
        }
        cols.join(",")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn example() -> ConfusionMatrix {
        confusion(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2], 3).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let cm = example();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!((cm.support(0), cm.support(1), cm.support(2)), (2, 2, 1));
        let perfect = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert!(matches!(confusion(&[3], &[0], 3), Err(Error::Input(_))));
    }

    #[test]
    fn worked_example() {
        let r = classification_metrics(&example()).unwrap();
        assert_eq!(r.accuracy, 0.8);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((r.per_class[2].f1 - 1.0).abs() < 1e-12);
        assert!((r.macro_avg.f1 - 0.8222).abs() < 1e-4);
        assert!((r.macro_avg.f1 - (2.0 / 3.0 + 0.8 + 1.0) / 3.0).abs() < 1e-12);
        assert!((r.macro_avg.specificity - (1.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_is_all_ones_and_absent_classes_are_skipped() {
        let cm = confusion(&[0, 1, 1, 3], &[0, 1, 1, 3], 5).unwrap();
        let r = classification_metrics(&cm).unwrap();
        for agg in [r.macro_avg, r.weighted_avg] {
            assert_eq!(
                (agg.precision, agg.recall, agg.f1, agg.specificity),
                (1.0, 1.0, 1.0, 1.0)
            );
        }
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(mae(&[0, 4], &[4, 0]).unwrap(), 4.0);
        assert_eq!(mae(&[0, 1, 2, 3], &[1, 2, 3, 4]).unwrap(), 1.0);
        let cm = confusion(&[0, 4], &[4, 0], 5).unwrap();
        assert_eq!(classification_metrics(&cm).unwrap().mae, 4.0);
    }

    #[test]
    fn auroc_examples() {
        let scores = vec![vec![0.1, 0.9], vec![0.2, 0.8], vec![0.9, 0.1], vec![0.8, 0.2]];
        assert_eq!(auroc_ovr_macro(&scores, &[1, 1, 0, 0]).unwrap(), 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        assert_eq!(auroc_ovr_macro(&flat, &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            auroc_ovr_macro(&flat, &[1, 1, 1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
        let scores: Vec<Vec<f32>> = (0..60)
            .map(|_| (0..3).map(|_| (rng.random_range(0..20) as f32) / 20.0).collect())
            .collect();
        let warped: Vec<Vec<f32>> = scores
            .iter()
            .map(|r| r.iter().map(|&v| (3.0 * v).exp() + 1.0).collect())
            .collect();
        assert_eq!(
            auroc_ovr_macro(&scores, &labels).unwrap(),
            auroc_ovr_macro(&warped, &labels).unwrap()
        );
    }

    #[test]
    fn csv_row_matches_header() {
        let r = classification_metrics(&example()).unwrap();
        assert_eq!(r.csv_header().split(',').count(), r.csv_row().split(',').count());
    }

    proptest! {
        #[test]
        fn accuracy_is_trace_over_n(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80)) {
            let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion(&y, &p, 5).unwrap();
            let r = classification_metrics(&cm).unwrap();
            prop_assert_eq!(r.accuracy, cm.trace() as f64 / y.len() as f64);
            prop_assert_eq!(cm.total(), y.len() as u64);
            for m in &r.per_class {
                for v in [m.precision, m.recall, m.f1, m.specificity] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn weighted_equals_macro_for_uniform_support(preds in prop::collection::vec(0usize..4, 12)) {
            let y: Vec<usize> = (0..12).map(|i| i % 4).collect();
            let r = classification_metrics(&confusion(&y, &preds, 4).unwrap()).unwrap();
            prop_assert!((r.weighted_avg.f1 - r.macro_avg.f1).abs() <= 1e-9);
        }
    }
}
