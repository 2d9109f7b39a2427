//! Holdout + cross-validation protocol: a fixed test set, five probes each
//! trained on four of five folds and all scored on that same test set.

mod metrics;
mod probe;
mod split;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{mae, mean_std, multiclass_roc_auc, roc_auc};
pub use probe::{fit_probe, Loss, ProbeConfig, ProbeModel, Standardizer};
pub use split::{make_split_plan, SplitPlan, DEFAULT_FOLDS, DEFAULT_TEST_FRACTION};

use crate::dataset::Label;
use crate::embedder::EmbeddingMatrix;
use crate::gateway::cache::sha256_hex;
use crate::schema::Task;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0}: only one class present")]
    SingleClass(String),
    #[error("fold {fold}: training data has a single class")]
    SingleClassFold { fold: usize },
    #[error("{0} is empty")]
    Empty(String),
    #[error("NaN score")]
    NanScore,
    #[error("non-finite feature value")]
    NonFiniteFeature,
    #[error("real-valued label given to a classification task")]
    LabelKind,
    #[error("class {class} outside 0..{n_classes}")]
    ClassRange { class: usize, n_classes: usize },
    #[error("{users} labeled users cannot fill {folds} folds plus the test set")]
    TooFewUsers { users: usize, folds: usize },
    #[error("embeddings missing for users: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("invalid evaluation setting: {0}")]
    Config(String),
}

pub type Labels = BTreeMap<String, Label>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub probe_family: String,
    pub probe: ProbeConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric  mean ± std` plus the per-fold values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:.3} ± {:.3}", self.metric, self.mean, self.std);
        for (i, v) in self.per_fold.iter().enumerate() {
            let _ = writeln!(out, "  fold {}   {v:.4}", i + 1);
        }
        out
    }
}

pub fn metric_name(task: Task) -> &'static str {
    if task.is_classification() {
        "roc_auc"
    } else {
        "mae"
    }
}

fn probe_family(task: Task) -> &'static str {
    match task {
        Task::BinaryClassification => "l2-logistic",
        Task::Multiclass(_) => "l2-logistic-ovr",
        Task::Regression => "ridge",
    }
}

/// Feature rows and labels for `users`, in that order.
fn gather(embeddings: &EmbeddingMatrix, labels: &Labels, users: &[&str]) -> Result<(Matrix, Vec<Label>), EvalError> {
    let missing: Vec<String> =
        users.iter().filter(|u| embeddings.index_of(u).is_none()).map(|u| u.to_string()).collect();
    if !missing.is_empty() {
        return Err(EvalError::Coverage(missing));
    }
    let d = embeddings.dim();
    let mut data = Vec::with_capacity(users.len() * d);
    let mut ys = Vec::with_capacity(users.len());
    for u in users {
        data.extend(embeddings.get(u).expect("checked above").iter().map(|&v| f64::from(v)));
        ys.push(*labels.get(*u).ok_or_else(|| EvalError::Config(format!("no label for user {u}")))?);
    }
    Ok((Matrix::from_vec(users.len(), d, data), ys))
}

/// Scores a fitted probe on a labeled set with the task's metric.
pub fn score_probe(model: &ProbeModel, x: &Matrix, y: &[Label], task: Task) -> Result<f64, EvalError> {
    let preds = model.predict(x);
    match task {
        Task::Regression => {
            let targets: Vec<f64> = y
                .iter()
                .map(|l| match l {
                    Label::Real(v) => *v,
                    Label::Class(c) => *c as f64,
                })
                .collect();
            mae(&preds.iter().map(|p| p[0]).collect::<Vec<_>>(), &targets)
        }
        Task::BinaryClassification => {
            let truth: Vec<bool> = y.iter().map(|l| *l == Label::Class(1)).collect();
            roc_auc(&preds.iter().map(|p| p[0]).collect::<Vec<_>>(), &truth)
        }
        Task::Multiclass(c) => {
            let classes: Vec<usize> = y
                .iter()
                .map(|l| match l {
                    Label::Class(k) => Ok(*k),
                    Label::Real(_) => Err(EvalError::LabelKind),
                })
                .collect::<Result<_, _>>()?;
            multiclass_roc_auc(&preds, &classes, c)
        }
    }
}

/// Trains one probe per fold (leaving that fold out) and scores each on the
/// plan's test users.
pub fn evaluate_cv(
    embeddings: &EmbeddingMatrix,
    labels: &Labels,
    task: Task,
    plan: &SplitPlan,
    probe: &ProbeConfig,
) -> Result<EvalReport, EvalError> {
    let test_users: Vec<&str> = plan.test_user_ids.iter().map(String::as_str).collect();
    let all: Vec<&str> = test_users.iter().copied().chain(plan.folds.iter().flatten().map(String::as_str)).collect();
    let missing: Vec<String> = all.iter().filter(|u| embeddings.index_of(u).is_none()).map(|u| u.to_string()).collect();
    if !missing.is_empty() {
        return Err(EvalError::Coverage(missing));
    }
    let (x_test, y_test) = gather(embeddings, labels, &test_users)?;
    let per_fold = (0..plan.folds.len())
        .into_par_iter()
        .map(|fold| {
            let train = plan.training_users(fold);
            let (x, y) = gather(embeddings, labels, &train)?;
            let model = fit_probe(&x, &y, task, probe).map_err(|e| match e {
                EvalError::SingleClass(_) => EvalError::SingleClassFold { fold },
                other => other,
            })?;
            score_probe(&model, &x_test, &y_test, task)
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let (mean, std) = mean_std(&per_fold);
    let digest_input = serde_json::json!({
        "plan": plan,
        "probe": probe,
        "task": task.to_string(),
        "dim": embeddings.dim(),
    });
    Ok(EvalReport {
        metric: metric_name(task).to_string(),
        per_fold,
        mean,
        std,
        probe_family: probe_family(task).to_string(),
        probe: *probe,
        n_train: plan.folds.iter().map(Vec::len).sum(),
        n_test: plan.test_user_ids.len(),
        config_digest: sha256_hex(digest_input.to_string().as_bytes()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub size: usize,
    pub n_folds: usize,
    pub report: EvalReport,
}

/// Re-runs the protocol on seeded stratified subsamples of the training
/// users; the test set is kept fixed. The full size reproduces
/// [`evaluate_cv`] on `plan` exactly.
pub fn data_size_ablation(
    embeddings: &EmbeddingMatrix,
    labels: &Labels,
    task: Task,
    plan: &SplitPlan,
    sizes: &[usize],
    seed: u64,
    probe: &ProbeConfig,
) -> Result<Vec<AblationPoint>, EvalError> {
    let n_train: usize = plan.folds.iter().map(Vec::len).sum();
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Config("sizes must be strictly ascending".into()));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > n_train || s == 0) {
        return Err(EvalError::Config(format!("size {big} outside 1..={n_train}")));
    }
    let train: Vec<(&str, Label)> = plan
        .folds
        .iter()
        .flatten()
        .map(|u| {
            labels.get(u).map(|l| (u.as_str(), *l)).ok_or_else(|| EvalError::Config(format!("no label for user {u}")))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let sub_plan = if size == n_train {
            plan.clone()
        } else {
            let n_folds = plan.folds.len().min(size);
            if n_folds < plan.folds.len() {
                log::warn!("size {size}: folds reduced to {n_folds}");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let order = split::stratified_order(&train, &mut rng);
            let picked: Vec<String> =
                split::systematic_picks(order.len(), size).into_iter().map(|i| order[i].clone()).collect();
            let mut train_ids = picked.clone();
            train_ids.sort();
            SplitPlan {
                test_user_ids: plan.test_user_ids.clone(),
                train_user_ids: train_ids,
                folds: split::deal_folds(&picked, n_folds),
                seed,
            }
        };
        let report = evaluate_cv(embeddings, labels, task, &sub_plan, probe)?;
        out.push(AblationPoint { size, n_folds: sub_plan.folds.len(), report });
    }
    Ok(out)
}

/// Same users, labels permuted among them (the shuffled-label control).
pub fn shuffle_labels(labels: &Labels, seed: u64) -> Labels {
    let mut values: Vec<Label> = labels.values().copied().collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels.keys().cloned().zip(values).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_report_shape() {
        let r = EvalReport {
            metric: "roc_auc".into(),
            per_fold: vec![0.8, 0.82, 0.84, 0.86, 0.88],
            mean: 0.84,
            std: 0.0316,
            probe_family: "l2-logistic".into(),
            probe: ProbeConfig::default(),
            n_train: 90,
            n_test: 10,
            config_digest: "x".into(),
        };
        assert!(r.to_text().starts_with("roc_auc    0.840 ± 0.032\n"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn shuffled_labels_keep_the_multiset() {
        let labels: Labels = (0..20).map(|i| (format!("u{i}"), Label::Class(i % 3))).collect();
        let s = shuffle_labels(&labels, 4);
        assert_eq!(s.keys().collect::<Vec<_>>(), labels.keys().collect::<Vec<_>>());
        let count = |l: &Labels, c| l.values().filter(|&&v| v == Label::Class(c)).count();
        for c in 0..3 {
            assert_eq!(count(&s, c), count(&labels, c));
        }
        assert_ne!(s, labels);
    }
}
