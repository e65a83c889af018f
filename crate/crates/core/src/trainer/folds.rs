use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::seed::rng_for;
use crate::{Error, Result};

/// Assignment of every sample to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub stratified: bool,
    pub grouped: bool,
}

/// Sample indices of one cross-validation round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldPlan {
    pub fn fold(&self, f: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == f).collect()
    }

    /// Round `i`: fold `i` is the test set, fold `i + 1 (mod k)` the
    /// validation set and the rest the training set.
    pub fn split(&self, i: usize) -> Split {
        let val_fold = (i + 1) % self.k;
        let mut s = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (idx, &f) in self.assignments.iter().enumerate() {
            if f == i {
                s.test.push(idx);
            } else if f == val_fold {
                s.val.push(idx);
            } else {
                s.train.push(idx);
            }
        }
        s
    }
}

/// Stratified k-fold assignment. Samples sharing a group key stay in one
/// fold; with `groups = None` every sample is its own group.
///
/// Per class, groups are shuffled, then placed largest first into the fold
/// holding the fewest samples of that class (ties: fewest samples overall,
/// then lowest index). With singleton groups the per-class fold sizes
/// therefore differ by at most one.
pub fn kfold_split(labels: &[u8], groups: Option<&[u64]>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("fold count", "k must be at least 2"));
    }
    if let Some(g) = groups {
        if g.len() != labels.len() {
            return Err(Error::shape("kfold", "one group key per sample required"));
        }
    }
    let mut units: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for i in 0..labels.len() {
        let key = groups.map_or(i as u64, |g| g[i]);
        units.entry(key).or_default().push(i);
    }
    let mut by_class: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    for (key, members) in units {
        let label = labels[members[0]];
        if label > 1 {
            return Err(Error::invalid("label", "labels must be 0 or 1"));
        }
        if members.iter().any(|&i| labels[i] != label) {
            return Err(Error::invalid(
                "group",
                alloc::format!("group {key} mixes both classes"),
            ));
        }
        by_class[label as usize].push(members);
    }
    let mut assignments = vec![usize::MAX; labels.len()];
    let mut total = vec![0usize; k];
    for (class, mut class_units) in by_class.into_iter().enumerate() {
        let count: usize = class_units.iter().map(Vec::len).sum();
        if count < k {
            return Err(Error::ClassTooSmall {
                class: class as u8,
                count,
                k,
            });
        }
        class_units.shuffle(&mut rng_for(seed, class as u64));
        class_units.sort_by_key(|u| core::cmp::Reverse(u.len()));
        let mut per_fold = vec![0usize; k];
        for unit in class_units {
            let f = (0..k)
                .min_by_key(|&f| (per_fold[f], total[f], f))
                .expect("k >= 2");
            per_fold[f] += unit.len();
            total[f] += unit.len();
            for i in unit {
                assignments[i] = f;
            }
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        stratified: true,
        grouped: groups.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_samples_five_folds() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let plan = kfold_split(&labels, None, 5, 3).unwrap();
        for f in 0..5 {
            let fold = plan.fold(f);
            assert_eq!(fold.len(), 2);
            assert_eq!(fold.iter().map(|&i| labels[i]).sum::<u8>(), 1);
        }
        assert_eq!(plan, kfold_split(&labels, None, 5, 3).unwrap());
    }

    #[test]
    fn groups_stay_together() {
        // six subjects, two volumes each
        let labels = [0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1];
        let groups = [10, 10, 11, 11, 12, 12, 13, 13, 14, 14, 15, 15];
        let plan = kfold_split(&labels, Some(&groups), 3, 1).unwrap();
        for pair in plan.assignments.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
        for f in 0..3 {
            assert_eq!(plan.fold(f).len(), 4);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            kfold_split(&[0, 0, 0, 1, 1], None, 3, 0),
            Err(Error::ClassTooSmall { class: 1, count: 2, k: 3 })
        );
        assert!(kfold_split(&[0, 1, 0, 1], Some(&[1, 1, 2, 2]), 2, 0).is_err());
        assert!(kfold_split(&[0, 1], None, 1, 0).is_err());
    }

    #[test]
    fn split_roles() {
        let labels = [0, 1, 0, 1, 0, 1];
        let plan = kfold_split(&labels, None, 3, 0).unwrap();
        let s = plan.split(2);
        assert_eq!(s.test, plan.fold(2));
        assert_eq!(s.val, plan.fold(0));
        assert_eq!(s.train, plan.fold(1));
    }

    proptest! {
        #[test]
        fn partition_and_balance(labels in proptest::collection::vec(0u8..2, 12..80), k in 2usize..6, seed: u64) {
            let ones = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(ones >= k && labels.len() - ones >= k);
            let plan = kfold_split(&labels, None, k, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in 0..k {
                for i in plan.fold(f) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            for class in 0..2u8 {
                let sizes: Vec<usize> = (0..k)
                    .map(|f| plan.fold(f).iter().filter(|&&i| labels[i] == class).count())
                    .collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            for i in 0..k {
                let s = plan.split(i);
                prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), labels.len());
            }
        }
    }
}
