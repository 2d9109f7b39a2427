use std::collections::BTreeMap;

use es2emb_core::embedder::EmbeddingMatrix;
use es2emb_core::evaluator::{
    data_size_ablation, evaluate_cv, fit_probe, mae, make_split_plan, roc_auc, shuffle_labels, Labels, ProbeConfig,
};
use es2emb_core::tensor::Matrix;
use es2emb_core::{Label, Task};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(2..50);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect();
    (scores, labels)
}

#[test]
fn auc_equals_pairwise_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (s, l) = random_instance(&mut rng);
        assert_eq!(roc_auc(&s, &l).unwrap(), pairwise_auc(&s, &l));
    }
}

#[test]
fn auc_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (s, l) = random_instance(&mut rng);
        let (a, b, c) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0));
        let mapped: Vec<f64> = s.iter().map(|&x| a * x + b + c * x * x * x + (x / 3.0).exp()).collect();
        assert_eq!(roc_auc(&mapped, &l).unwrap(), roc_auc(&s, &l).unwrap());
    }
}

#[test]
fn auc_of_negated_scores_complements() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let n = rng.random_range(2..100);
        let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        l[0] = true;
        l[1] = false;
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let total = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mae_matches_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p: Vec<f64> = (0..300).map(|_| rng.random_range(-5.0..5.0)).collect();
    let t: Vec<f64> = (0..300).map(|_| rng.random_range(-5.0..5.0)).collect();
    let oracle = p.iter().zip(&t).fold(0.0, |acc, (a, b)| acc + (a - b).abs()) / 300.0;
    assert!((mae(&p, &t).unwrap() - oracle).abs() < 1e-12);
}

fn labels_of(n: usize, pos_rate_pct: usize) -> Vec<(String, Label)> {
    (0..n).map(|i| (format!("user{i:05}"), Label::Class(usize::from(i * 100 / n < pos_rate_pct)))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn split_plan_invariants(n in 6usize..600, seed in 0u64..1000, pct in 10usize..90) {
        let owned = labels_of(n, pct);
        let refs: Vec<(&str, Label)> = owned.iter().map(|(u, l)| (u.as_str(), *l)).collect();
        let plan = make_split_plan(&refs, 0.1, 5, seed).unwrap();
        let n_test = (n as f64 * 0.1).round() as usize;
        prop_assert_eq!(plan.test_user_ids.len(), n_test);
        prop_assert_eq!(plan.train_user_ids.len(), n - n_test);
        let mut union: Vec<&String> = plan.folds.iter().flatten().collect();
        union.sort();
        prop_assert_eq!(union, plan.train_user_ids.iter().collect::<Vec<_>>());
        prop_assert!(plan.test_user_ids.iter().all(|u| plan.train_user_ids.binary_search(u).is_err()));
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.len(), 5);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(make_split_plan(&refs, 0.1, 5, seed).unwrap(), plan);
    }
}

#[test]
fn folds_are_stratified() {
    let owned = labels_of(400, 30);
    let refs: Vec<(&str, Label)> = owned.iter().map(|(u, l)| (u.as_str(), *l)).collect();
    let by_user: BTreeMap<&str, Label> = refs.iter().copied().collect();
    let plan = make_split_plan(&refs, 0.1, 5, 3).unwrap();
    let global = 0.3;
    for fold in &plan.folds {
        let pos = fold.iter().filter(|u| by_user[u.as_str()] == Label::Class(1)).count() as f64;
        assert!((pos - global * fold.len() as f64).abs() <= 1.0, "{pos} of {}", fold.len());
    }
    let test_pos = plan.test_user_ids.iter().filter(|u| by_user[u.as_str()] == Label::Class(1)).count() as f64;
    assert!((test_pos - global * plan.test_user_ids.len() as f64).abs() <= 1.0);
}

/// Newton's method on the same regularized logistic objective.
fn newton_logistic(x: &[Vec<f64>], y: &[f64], l2: f64) -> f64 {
    let (n, d) = (x.len(), x[0].len());
    let mut w = vec![0.0; d + 1];
    let objective = |w: &[f64]| {
        let mut f = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            f += (1.0 + z.exp()).ln() - yi * z;
        }
        f / n as f64 + 0.5 * l2 * w[..d].iter().map(|v| v * v).sum::<f64>()
    };
    for _ in 0..50 {
        let mut g = vec![0.0; d + 1];
        let mut h = vec![vec![0.0; d + 1]; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let mut xa = xi.clone();
            xa.push(1.0);
            let z: f64 = xa.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for a in 0..=d {
                g[a] += (p - yi) * xa[a] / n as f64;
                for b in 0..=d {
                    h[a][b] += p * (1.0 - p) * xa[a] * xa[b] / n as f64;
                }
            }
        }
        for a in 0..d {
            g[a] += l2 * w[a];
            h[a][a] += l2;
        }
        let step = solve(h, g);
        for (wi, s) in w.iter_mut().zip(step) {
            *wi -= s;
        }
    }
    objective(&w)
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn standardize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (rows.len() as f64, rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> =
        (0..d).map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    rows.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect()).collect()
}

fn random_problem(seed: u64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|j| gauss(&mut rng) * (j + 1) as f64).collect()).collect();
    let labels = rows
        .iter()
        .map(|r| {
            let z: f64 = r[0] - 0.5 * r[1] + 0.3 * r[3] + gauss(&mut rng) * 1.5;
            Label::Class(usize::from(z > 0.0))
        })
        .collect();
    (rows, labels)
}

#[test]
fn logistic_probe_reaches_newton_optimum() {
    let (rows, labels) = random_problem(21);
    let cfg = ProbeConfig::default();
    let model = fit_probe(&Matrix::from_rows(&rows), &labels, Task::BinaryClassification, &cfg).unwrap();
    let y: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(*l == Label::Class(1)))).collect();
    let oracle = newton_logistic(&standardize(&rows), &y, cfg.l2);
    assert!((model.objective[0] - oracle).abs() < 1e-4, "{} vs {oracle}", model.objective[0]);
}

#[test]
fn ridge_probe_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|r| 3.0 * r[0] - r[2] + 0.7 + rng.random_range(-0.5..0.5)).collect();
    let labels: Vec<Label> = y.iter().map(|&v| Label::Real(v)).collect();
    let cfg = ProbeConfig::default();
    let model = fit_probe(&Matrix::from_rows(&rows), &labels, Task::Regression, &cfg).unwrap();
    // centered design: intercept = mean(y), weights from (XᵀX/n + λI) w = Xᵀy/n
    let xs = standardize(&rows);
    let n = 50.0;
    let ybar = y.iter().sum::<f64>() / n;
    let a: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            (0..4)
                .map(|j| xs.iter().map(|r| r[i] * r[j]).sum::<f64>() / n + if i == j { cfg.l2 } else { 0.0 })
                .collect()
        })
        .collect();
    let b: Vec<f64> = (0..4).map(|i| xs.iter().zip(&y).map(|(r, yy)| r[i] * (yy - ybar)).sum::<f64>() / n).collect();
    let w = solve(a, b);
    for j in 0..4 {
        assert!((model.weights[0][j] - w[j]).abs() < 1e-5, "w{j}: {} vs {}", model.weights[0][j], w[j]);
    }
    assert!((model.weights[0][4] - ybar).abs() < 1e-5);
}

#[test]
fn different_initializations_agree() {
    let (rows, labels) = random_problem(23);
    let x = Matrix::from_rows(&rows);
    let a = fit_probe(&x, &labels, Task::BinaryClassification, &ProbeConfig::default()).unwrap();
    let b =
        fit_probe(&x, &labels, Task::BinaryClassification, &ProbeConfig { init_seed: Some(5), ..Default::default() })
            .unwrap();
    assert!((a.objective[0] - b.objective[0]).abs() < 1e-4);
}

fn planted(n: usize, seed: u64) -> (EmbeddingMatrix, Labels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Labels::new();
    for i in 0..n {
        let user = format!("u{i:04}");
        let class = usize::from(rng.random_bool(0.4));
        let v: Vec<f64> = (0..6).map(|j| gauss(&mut rng) + if j == 0 { 3.0 * class as f64 } else { 0.0 }).collect();
        rows.push((user.clone(), v));
        labels.insert(user, Label::Class(class));
    }
    (EmbeddingMatrix::from_rows(rows).unwrap(), labels)
}

fn plan_for(labels: &Labels, seed: u64) -> es2emb_core::evaluator::SplitPlan {
    let refs: Vec<(&str, Label)> = labels.iter().map(|(u, l)| (u.as_str(), *l)).collect();
    make_split_plan(&refs, 0.1, 5, seed).unwrap()
}

#[test]
fn planted_signal_and_shuffled_control() {
    let (emb, labels) = planted(1000, 31);
    let plan = plan_for(&labels, 1);
    let cfg = ProbeConfig::default();
    let report = evaluate_cv(&emb, &labels, Task::BinaryClassification, &plan, &cfg).unwrap();
    assert!(report.mean > 0.95, "{report:?}");
    assert_eq!(report.per_fold.len(), 5);
    let shuffled = shuffle_labels(&labels, 2);
    let control = evaluate_cv(&emb, &shuffled, Task::BinaryClassification, &plan_for(&shuffled, 1), &cfg).unwrap();
    assert!((0.4..=0.6).contains(&control.mean), "{control:?}");
    let again = evaluate_cv(&emb, &labels, Task::BinaryClassification, &plan, &cfg).unwrap();
    assert_eq!(again, report);
}

#[test]
fn degenerate_embeddings_have_zero_spread() {
    let (_, labels) = planted(200, 32);
    let rows = labels.keys().map(|u| (u.clone(), vec![1.0, 2.0])).collect();
    let emb = EmbeddingMatrix::from_rows(rows).unwrap();
    let report =
        evaluate_cv(&emb, &labels, Task::BinaryClassification, &plan_for(&labels, 4), &ProbeConfig::default()).unwrap();
    assert_eq!(report.std, 0.0);
    assert_eq!(report.mean, 0.5);
}

#[test]
fn missing_embeddings_are_listed() {
    let (emb, mut labels) = planted(100, 33);
    labels.insert("zz_missing".into(), Label::Class(1));
    let err = evaluate_cv(&emb, &labels, Task::BinaryClassification, &plan_for(&labels, 1), &ProbeConfig::default())
        .unwrap_err();
    assert!(err.to_string().contains("zz_missing"));
}

#[test]
fn data_size_curve() {
    let (emb, labels) = planted(600, 34);
    let plan = plan_for(&labels, 7);
    let cfg = ProbeConfig::default();
    let full = plan.train_user_ids.len();
    let curve =
        data_size_ablation(&emb, &labels, Task::BinaryClassification, &plan, &[10, 100, full], 9, &cfg).unwrap();
    let plain = evaluate_cv(&emb, &labels, Task::BinaryClassification, &plan, &cfg).unwrap();
    assert_eq!(curve[2].report, plain);
    assert!(curve[1].report.mean >= curve[0].report.mean - 0.05);
    let again =
        data_size_ablation(&emb, &labels, Task::BinaryClassification, &plan, &[10, 100, full], 9, &cfg).unwrap();
    assert_eq!(again, curve);
    let tiny = data_size_ablation(&emb, &labels, Task::BinaryClassification, &plan, &[4], 9, &cfg).unwrap();
    assert_eq!(tiny[0].n_folds, 4);
}

#[test]
fn regression_reports_mae() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let mut rows = Vec::new();
    let mut labels = Labels::new();
    for i in 0..200 {
        let u = format!("r{i:03}");
        let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        labels.insert(u.clone(), Label::Real(40.0 + 10.0 * v[0]));
        rows.push((u, v));
    }
    let emb = EmbeddingMatrix::from_rows(rows).unwrap();
    let report = evaluate_cv(&emb, &labels, Task::Regression, &plan_for(&labels, 1), &ProbeConfig::default()).unwrap();
    assert_eq!(report.metric, "mae");
    assert!(report.mean < 0.5, "{report:?}");
}

#[test]
fn multiclass_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let mut rows = Vec::new();
    let mut labels = Labels::new();
    for i in 0..300 {
        let u = format!("m{i:03}");
        let c = i % 3;
        let v: Vec<f64> = (0..3).map(|j| gauss(&mut rng) + if j == c { 3.0 } else { 0.0 }).collect();
        labels.insert(u.clone(), Label::Class(c));
        rows.push((u, v));
    }
    let emb = EmbeddingMatrix::from_rows(rows).unwrap();
    let report =
        evaluate_cv(&emb, &labels, Task::Multiclass(3), &plan_for(&labels, 1), &ProbeConfig::default()).unwrap();
    assert!(report.mean > 0.9, "{report:?}");
}
