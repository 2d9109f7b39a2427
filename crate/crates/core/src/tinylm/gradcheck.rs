use super::{LmError, TinyLm};

/// Below this magnitude the error is measured as absolute difference.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where the maximum occurred.
    pub worst_index: usize,
    pub n_params: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn central_differences(model: &TinyLm, tokens: &[u32], h: f64) -> Result<(Vec<f64>, Vec<f64>), LmError> {
    let (_, analytic) = model.loss_and_grad(tokens)?;
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.loss(tokens)?;
        probe.params_mut()[i] = orig - h;
        let down = probe.loss(tokens)?;
        probe.params_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok((analytic, numeric))
}

/// Compares the analytic loss gradient with central differences (step 1e-4)
/// over every parameter.
pub fn grad_check(model: &TinyLm, tokens: &[u32], tolerance: f64) -> Result<GradCheckReport, LmError> {
    let (analytic, numeric) = central_differences(model, tokens, 1e-4)?;
    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        let diff = (a - n).abs();
        let err = if scale < ABS_FLOOR { diff } else { diff / scale };
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, n_params: analytic.len(), tolerance })
}

/// Largest absolute gap between analytic and central-difference gradients at
/// step `h`.
pub fn fd_residual(model: &TinyLm, tokens: &[u32], h: f64) -> Result<f64, LmError> {
    let (analytic, numeric) = central_differences(model, tokens, h)?;
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max))
}
