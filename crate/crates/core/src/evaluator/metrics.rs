use super::EvalError;

/// Binary ROC-AUC by the rank-sum formula with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass("roc_auc".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank sum of positives, doubled so tied midranks stay integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Unweighted mean of one-vs-rest AUCs. `scores[i][c]` scores sample `i`
/// for class `c`. Classes absent from `labels` are skipped with a warning.
pub fn multiclass_roc_auc(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    let mut aucs = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if is_c.iter().all(|&b| b) || !is_c.iter().any(|&b| b) {
            log::warn!("class {c} absent or alone in evaluation labels; skipped in macro AUC");
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        aucs.push(roc_auc(&col, &is_c)?);
    }
    if aucs.is_empty() {
        return Err(EvalError::SingleClass("multiclass roc_auc".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch { left: predictions.len(), right: targets.len() });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty("mae".into()));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Arithmetic mean and sample (n - 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
