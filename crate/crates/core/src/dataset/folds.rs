use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fold id for every observation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment.
///
/// Each class is shuffled independently and the classes are then dealt
/// round-robin as one continuous sequence, so both per-class and total fold
/// sizes differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::ClassTooSmall { class, count: members.len(), k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut slot = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments[i] = slot % k;
            slot += 1;
        }
    }
    Ok(FoldPlan { k, assignments, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn per_class_fold_counts(labels: &[usize], plan: &FoldPlan) -> Vec<Vec<usize>> {
        let n_classes = labels.iter().max().unwrap() + 1;
        let mut counts = vec![vec![0; plan.k]; n_classes];
        for (i, &c) in labels.iter().enumerate() {
            counts[c][plan.assignments[i]] += 1;
        }
        counts
    }

    #[test]
    fn reference_class_counts() {
        let labels: Vec<usize> =
            [515, 611, 207, 336].iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let plan = stratified_kfold(&labels, 5, 1).unwrap();
        let expect = [103, 122, 41, 67];
        for (c, folds) in per_class_fold_counts(&labels, &plan).iter().enumerate() {
            for &n in folds {
                assert!(n.abs_diff(expect[c]) <= 1, "class {c}: {folds:?}");
            }
        }
    }

    #[test]
    fn exact_division() {
        let plan = stratified_kfold(&[0; 10], 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn small_class_rejected() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1];
        assert!(matches!(stratified_kfold(&labels, 5, 0), Err(Error::ClassTooSmall { class: 1, count: 3, k: 5 })));
        assert!(stratified_kfold(&labels, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_balanced_and_deterministic(
            labels in proptest::collection::vec(0usize..4, 40..300),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let counts = {
                let mut c = [0usize; 4];
                for &l in &labels { c[l] += 1; }
                c
            };
            prop_assume!(counts.iter().all(|&n| n == 0 || n >= k));
            let plan = stratified_kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(&plan, &stratified_kfold(&labels, k, seed).unwrap());
            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for folds in per_class_fold_counts(&labels, &plan) {
                prop_assert!(folds.iter().max().unwrap() - folds.iter().min().unwrap() <= 1);
            }
            for f in 0..k {
                let test = plan.test_indices(f);
                let train = plan.train_indices(f);
                prop_assert_eq!(test.len() + train.len(), labels.len());
                prop_assert!(test.iter().all(|i| !train.contains(i)));
            }
        }
    }
}
