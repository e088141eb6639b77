use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const FOLDS: usize = 5;

/// Held-out test indices plus a k-fold partition of the training indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl SplitPlan {
    /// Checks disjointness/coverage against `n_total` samples and that the
    /// folds partition the training set with sizes differing by at most one.
    pub fn validate(&self, n_total: usize) -> Result<()> {
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        let test: BTreeSet<usize> = self.test.iter().copied().collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err(Error::InvalidSplit("duplicate index inside a section".into()));
        }
        if let Some(i) = train.intersection(&test).next() {
            return Err(Error::InvalidSplit(format!("index {i} is in both train and test")));
        }
        if train.len() + test.len() != n_total || train.union(&test).any(|&i| i >= n_total) {
            return Err(Error::InvalidSplit(format!(
                "train ∪ test does not cover 0..{n_total}"
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, f) in self.folds.iter().enumerate() {
            for &i in f {
                if !train.contains(&i) {
                    return Err(Error::InvalidSplit(format!("fold {k} index {i} is not a training index")));
                }
                if !seen.insert(i) {
                    return Err(Error::InvalidSplit(format!("index {i} appears in more than one fold")));
                }
            }
        }
        if !self.folds.is_empty() {
            if seen.len() != train.len() {
                return Err(Error::InvalidSplit("folds do not cover the training set".into()));
            }
            let sizes = self.folds.iter().map(Vec::len);
            let (lo, hi) = (sizes.clone().min().unwrap_or(0), sizes.max().unwrap_or(0));
            if hi - lo > 1 {
                return Err(Error::InvalidSplit(format!("fold sizes range {lo}..{hi}")));
            }
        }
        Ok(())
    }

    /// Training indices outside fold `k`, and fold `k` itself.
    pub fn fold_split(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let held: BTreeSet<usize> = self.folds[k].iter().copied().collect();
        let rest = self.train.iter().copied().filter(|i| !held.contains(i)).collect();
        (rest, self.folds[k].clone())
    }
}

/// Stratified 80/20 split with a five-fold partition of the training part.
///
/// Per-class test counts are apportioned by largest remainder so the overall
/// training share is `round(0.8·n)`; each class's shuffled training indices
/// are dealt round-robin into the folds.
pub fn make_split<R: Rng + ?Sized>(labels: &[u8], rng: &mut R) -> Result<SplitPlan> {
    let n = labels.len();
    if n < 10 {
        return Err(Error::InvalidSplit(format!("need at least 10 samples, got {n}")));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let n_test = n - (4 * n + 2) / 5;
    let mut quota: Vec<usize> = by_class.iter().map(|c| c.len() / 5).collect();
    let mut left = n_test - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..classes).collect();
    // Largest fractional remainder first, lowest class id on ties.
    order.sort_by_key(|&c| (std::cmp::Reverse(by_class[c].len() % 5), c));
    for &c in &order {
        if left == 0 {
            break;
        }
        if by_class[c].len() % 5 != 0 {
            quota[c] += 1;
            left -= 1;
        }
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    let mut folds = vec![Vec::new(); FOLDS];
    let mut dealt = 0usize;
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(rng);
        let (t, rest) = idx.split_at(quota[c]);
        test.extend_from_slice(t);
        for &i in rest {
            folds[dealt % FOLDS].push(i);
            dealt += 1;
        }
        train.extend_from_slice(rest);
    }
    train.sort_unstable();
    test.sort_unstable();
    for f in &mut folds {
        f.sort_unstable();
    }
    let plan = SplitPlan { train, test, folds };
    plan.validate(n)?;
    Ok(plan)
}
