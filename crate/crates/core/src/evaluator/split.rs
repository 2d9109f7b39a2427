use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataset::Label;

pub const DEFAULT_TEST_FRACTION: f64 = 0.1;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_user_ids: Vec<String>,
    pub train_user_ids: Vec<String>,
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl SplitPlan {
    /// Training users of every fold except `fold`; everything when there
    /// is only one fold.
    pub fn training_users(&self, fold: usize) -> Vec<&str> {
        if self.folds.len() == 1 {
            return self.folds[0].iter().map(String::as_str).collect();
        }
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().map(String::as_str))
            .collect()
    }
}

/// Seeded order in which classes are contiguous, each class shuffled; plain
/// shuffle for real-valued labels.
pub(crate) fn stratified_order(users: &[(&str, Label)], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    let mut unstratified = Vec::new();
    for &(u, label) in users {
        match label {
            Label::Class(c) => by_class.entry(c).or_default().push(u),
            Label::Real(_) => unstratified.push(u),
        }
    }
    let mut order = Vec::with_capacity(users.len());
    for (_, mut members) in by_class {
        members.shuffle(rng);
        order.extend(members.into_iter().map(str::to_string));
    }
    unstratified.shuffle(rng);
    order.extend(unstratified.into_iter().map(str::to_string));
    order
}

/// Indices of `k` evenly spaced picks out of `n` (systematic sampling).
pub(crate) fn systematic_picks(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| ((2 * i + 1) * n) / (2 * k)).collect()
}

pub(crate) fn deal_folds(order: &[String], n_folds: usize) -> Vec<Vec<String>> {
    let mut folds = vec![Vec::new(); n_folds];
    for (i, u) in order.iter().enumerate() {
        folds[i % n_folds].push(u.clone());
    }
    folds
}

/// Holds out `round(test_fraction · N)` labeled users and deals the rest
/// into `n_folds` folds. Classification labels are stratified: users are
/// ordered class by class, the test set is a systematic sample of that
/// order, and folds are dealt round-robin from what remains.
pub fn make_split_plan(
    labels: &[(&str, Label)],
    test_fraction: f64,
    n_folds: usize,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(EvalError::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    if n_folds < 1 {
        return Err(EvalError::Config("need at least one fold".into()));
    }
    let n = labels.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n < n_folds + n_test {
        return Err(EvalError::TooFewUsers { users: n, folds: n_folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = stratified_order(labels, &mut rng);
    let mut is_test = vec![false; n];
    for i in systematic_picks(n, n_test) {
        is_test[i] = true;
    }
    let mut test = Vec::with_capacity(n_test);
    let mut train = Vec::with_capacity(n - n_test);
    for (u, t) in order.into_iter().zip(is_test) {
        if t {
            test.push(u);
        } else {
            train.push(u);
        }
    }
    let folds = deal_folds(&train, n_folds);
    test.sort();
    let mut train_sorted = train;
    train_sorted.sort();
    Ok(SplitPlan { test_user_ids: test, train_user_ids: train_sorted, folds, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn users(n: usize) -> Vec<(String, Label)> {
        (0..n).map(|i| (format!("u{i:04}"), Label::Class(usize::from(i % 10 < 3)))).collect()
    }

    fn refs(v: &[(String, Label)]) -> Vec<(&str, Label)> {
        v.iter().map(|(u, l)| (u.as_str(), *l)).collect()
    }

    #[test]
    fn hundred_users() {
        let u = users(100);
        let plan = make_split_plan(&refs(&u), 0.1, 5, 1).unwrap();
        assert_eq!(plan.test_user_ids.len(), 10);
        assert_eq!(plan.train_user_ids.len(), 90);
        assert!(plan.folds.iter().all(|f| f.len() == 18));
    }

    #[test]
    fn ninety_three_training_users() {
        let u: Vec<_> = (0..93).map(|i| (format!("u{i}"), Label::Real(i as f64))).collect();
        let plan = make_split_plan(&refs(&u), 0.0, 5, 1).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![19, 19, 19, 18, 18]);
    }

    #[test]
    fn too_few_users() {
        let u = users(4);
        assert!(matches!(make_split_plan(&refs(&u), 0.1, 5, 0), Err(EvalError::TooFewUsers { .. })));
    }

    #[test]
    fn systematic_picks_spread() {
        assert_eq!(systematic_picks(10, 2), vec![2, 7]);
        assert_eq!(systematic_picks(5, 0), Vec::<usize>::new());
    }
}
