use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the k bins are assigned to roles within a fold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRegime {
    /// test = bin i, val = bin i+1, train = the rest.
    #[default]
    TrainValTest,
    /// val = bin i, train = the rest, no test part.
    TrainVal,
}

impl std::str::FromStr for SplitRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_val_test" => Ok(SplitRegime::TrainValTest),
            "train_val" => Ok(SplitRegime::TrainVal),
            other => Err(Error::Config(format!("unknown split regime `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

/// Per-image stratified k-fold in the train/val/test regime.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    stratified_kfold_with(labels, None, k, seed, SplitRegime::TrainValTest)
}

/// Stratified k-fold. Each class's units (samples, or groups when group
/// ids are given) are shuffled with one seeded stream in ascending class
/// order and dealt round-robin into k bins; each class starts dealing
/// where the previous one stopped, which keeps bin sizes within one.
/// A group takes the label of its first sample.
pub fn stratified_kfold_with(
    labels: &[usize],
    groups: Option<&[String]>,
    k: usize,
    seed: u64,
    regime: SplitRegime,
) -> Result<Vec<FoldSplit>> {
    let min_k = match regime {
        SplitRegime::TrainValTest => 3,
        SplitRegime::TrainVal => 2,
    };
    if k < min_k {
        return Err(Error::Config(format!(
            "k={k} folds leaves no training data in the {regime:?} regime (need k >= {min_k})"
        )));
    }
    if let Some(g) = groups {
        if g.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} group ids for {} samples",
                g.len(),
                labels.len()
            )));
        }
    }

    // units: lists of sample indices that move together
    let mut units: Vec<(usize, Vec<usize>)> = Vec::new();
    match groups {
        None => units.extend(labels.iter().enumerate().map(|(i, &y)| (y, vec![i]))),
        Some(g) => {
            let mut by_group: BTreeMap<&str, usize> = BTreeMap::new();
            for (i, id) in g.iter().enumerate() {
                match by_group.get(id.as_str()) {
                    Some(&u) => units[u].1.push(i),
                    None => {
                        by_group.insert(id, units.len());
                        units.push((labels[i], vec![i]));
                    }
                }
            }
        }
    }

    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..units.len()).filter(|&u| units[u].0 == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Config(format!(
                "class {class} has {} {}, fewer than k={k}",
                members.len(),
                if groups.is_some() { "groups" } else { "samples" }
            )));
        }
        members.shuffle(&mut rng);
        for u in members {
            bins[cursor % k].extend(&units[u].1);
            cursor += 1;
        }
    }
    for b in &mut bins {
        b.sort_unstable();
    }

    Ok((0..k)
        .map(|i| {
            let (test, val) = match regime {
                SplitRegime::TrainValTest => (Some(i), (i + 1) % k),
                SplitRegime::TrainVal => (None, i),
            };
            let mut train_ids: Vec<usize> = (0..k)
                .filter(|&b| b != val && Some(b) != test)
                .flat_map(|b| bins[b].iter().copied())
                .collect();
            train_ids.sort_unstable();
            FoldSplit {
                fold_index: i,
                train_ids,
                val_ids: bins[val].clone(),
                test_ids: test.map(|t| bins[t].clone()).unwrap_or_default(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn balanced(per_class: usize, k: usize) -> Vec<usize> {
        (0..per_class * k).map(|i| i % k).collect()
    }

    #[test]
    fn ten_per_class_five_folds_gives_two_per_bin() {
        let labels = balanced(10, 5);
        let folds = stratified_kfold(&labels, 5, 42).unwrap();
        for f in &folds {
            for c in 0..5 {
                assert_eq!(f.test_ids.iter().filter(|&&i| labels[i] == c).count(), 2);
                assert_eq!(f.val_ids.iter().filter(|&&i| labels[i] == c).count(), 2);
            }
            assert_eq!(f.train_ids.len(), 30);
        }
    }

    #[test]
    fn test_sets_partition_the_data() {
        let labels: Vec<usize> = (0..97).map(|i| (i * 7) % 5).collect();
        let folds = stratified_kfold(&labels, 5, 3).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in &folds {
            for &i in &f.test_ids {
                seen[i] += 1;
            }
            let tr: HashSet<_> = f.train_ids.iter().collect();
            let va: HashSet<_> = f.val_ids.iter().collect();
            let te: HashSet<_> = f.test_ids.iter().collect();
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            assert_eq!(tr.len() + va.len() + te.len(), labels.len());
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn same_seed_same_split() {
        let labels = balanced(7, 5);
        assert_eq!(
            stratified_kfold(&labels, 5, 9).unwrap(),
            stratified_kfold(&labels, 5, 9).unwrap()
        );
        assert_ne!(
            stratified_kfold(&labels, 5, 9).unwrap(),
            stratified_kfold(&labels, 5, 10).unwrap()
        );
    }

    #[test]
    fn small_class_is_config_error() {
        let mut labels = balanced(6, 5);
        labels.push(5);
        assert!(matches!(stratified_kfold(&labels, 5, 1), Err(Error::Config(_))));
        assert!(matches!(stratified_kfold(&labels[..10], 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn train_val_regime_has_no_test() {
        let labels = balanced(12, 5);
        let folds = stratified_kfold_with(&labels, None, 6, 42, SplitRegime::TrainVal).unwrap();
        for f in &folds {
            assert!(f.test_ids.is_empty());
            assert_eq!(f.val_ids.len(), 10);
            assert_eq!(f.train_ids.len(), 50);
        }
    }

    #[test]
    fn groups_stay_together() {
        let labels: Vec<usize> = (0..60).map(|i| (i / 2) % 3).collect();
        let groups: Vec<String> = (0..60).map(|i| format!("s{}", i / 2)).collect();
        let folds = stratified_kfold_with(&labels, Some(&groups), 5, 1, SplitRegime::TrainValTest).unwrap();
        for f in &folds {
            let test: HashSet<&String> = f.test_ids.iter().map(|&i| &groups[i]).collect();
            let train: HashSet<&String> = f.train_ids.iter().map(|&i| &groups[i]).collect();
            assert!(test.is_disjoint(&train));
        }
    }

    proptest! {
        #[test]
        fn stratification_within_one(
            counts in prop::collection::vec(5usize..40, 2..6),
            k in 3usize..6,
            seed in 0u64..1000,
        ) {
            let labels: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
                .collect();
            let folds = stratified_kfold(&labels, k, seed).unwrap();
            for f in &folds {
                for (c, &n) in counts.iter().enumerate() {
                    let got = f.test_ids.iter().filter(|&&i| labels[i] == c).count() as f64;
                    prop_assert!((got - n as f64 / k as f64).abs() <= 1.0);
                }
            }
        }
    }
}
