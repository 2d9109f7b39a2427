//! L2-regularized logistic (one-vs-rest) and ridge probes fit by Nesterov
//! accelerated gradient descent on standardized features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataset::Label;
use crate::schema::Task;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Penalty on the weights (not the intercept).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    /// Start from random weights instead of zeros.
    pub init_seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-2, max_iter: 10_000, tol: 1e-6, init_seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; constant columns get
    /// scale 1.
    pub fn fit(x: &Matrix) -> Self {
        let (n, d) = (x.rows, x.cols);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Logistic,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub task: String,
    pub standardizer: Standardizer,
    /// One row of `D + 1` per output (intercept last).
    pub weights: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
    pub objective: Vec<f64>,
    pub converged: Vec<bool>,
}

struct Problem<'a> {
    x: &'a Matrix,
    y: Vec<f64>,
    loss: Loss,
    l2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Problem<'_> {
    fn margins(&self, w: &[f64]) -> Vec<f64> {
        let d = self.x.cols;
        (0..self.x.rows).map(|i| self.x.row(i).iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d]).collect()
    }

    fn objective(&self, w: &[f64]) -> f64 {
        let d = self.x.cols;
        let n = self.x.rows as f64;
        let data: f64 = self
            .margins(w)
            .iter()
            .zip(&self.y)
            .map(|(&z, &y)| match self.loss {
                Loss::Logistic => softplus(z) - y * z,
                Loss::Squared => 0.5 * (z - y) * (z - y),
            })
            .sum();
        data / n + 0.5 * self.l2 * w[..d].iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &[f64], g: &mut [f64]) {
        let d = self.x.cols;
        let n = self.x.rows as f64;
        g.fill(0.0);
        for (i, z) in self.margins(w).into_iter().enumerate() {
            let r = match self.loss {
                Loss::Logistic => sigmoid(z) - self.y[i],
                Loss::Squared => z - self.y[i],
            } / n;
            for (gj, xj) in g[..d].iter_mut().zip(self.x.row(i)) {
                *gj += r * xj;
            }
            g[d] += r;
        }
        for j in 0..d {
            g[j] += self.l2 * w[j];
        }
    }

    /// Upper bound on the gradient's Lipschitz constant via the trace of the
    /// (intercept-augmented) Gram matrix.
    fn lipschitz(&self) -> f64 {
        let n = self.x.rows as f64;
        let trace = self.x.data.iter().map(|v| v * v).sum::<f64>() / n + 1.0;
        let curvature = match self.loss {
            Loss::Logistic => 0.25,
            Loss::Squared => 1.0,
        };
        curvature * trace + self.l2
    }

    /// Returns (weights, iterations, converged).
    fn minimize(&self, init: Vec<f64>, cfg: &ProbeConfig) -> (Vec<f64>, usize, bool) {
        let step = 1.0 / self.lipschitz();
        let mut x = init;
        let mut x_prev = x.clone();
        let mut yv = x.clone();
        let mut g = vec![0.0; x.len()];
        let mut t = 1.0f64;
        for iter in 0..cfg.max_iter {
            self.gradient(&yv, &mut g);
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() < cfg.tol {
                return (yv, iter, true);
            }
            x_prev.copy_from_slice(&x);
            for ((xi, yi), gi) in x.iter_mut().zip(&yv).zip(&g) {
                *xi = yi - step * gi;
            }
            // restart momentum when it points uphill
            let uphill: f64 = g.iter().zip(x.iter().zip(&x_prev)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if uphill > 0.0 {
                t = 1.0;
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_next;
            for ((yi, xi), pi) in yv.iter_mut().zip(&x).zip(&x_prev) {
                *yi = xi + beta * (xi - pi);
            }
            t = t_next;
        }
        self.gradient(&x, &mut g);
        let converged = g.iter().map(|v| v * v).sum::<f64>().sqrt() < cfg.tol;
        (x, cfg.max_iter, converged)
    }
}

fn initial_weights(d: usize, cfg: &ProbeConfig, output: usize) -> Vec<f64> {
    match cfg.init_seed {
        None => vec![0.0; d + 1],
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(output as u64));
            (0..=d).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    }
}

/// Fits a probe on raw (unstandardized) features `x` (one row per label).
pub fn fit_probe(x: &Matrix, labels: &[Label], task: Task, cfg: &ProbeConfig) -> Result<ProbeModel, EvalError> {
    if x.rows != labels.len() {
        return Err(EvalError::LengthMismatch { left: x.rows, right: labels.len() });
    }
    if x.rows < 2 {
        return Err(EvalError::Empty("probe training set".into()));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteFeature);
    }
    let standardizer = Standardizer::fit(x);
    let xs = standardizer.apply(x);
    let d = x.cols;

    let targets: Vec<(Vec<f64>, Loss)> = match task {
        Task::Regression => {
            let y = labels
                .iter()
                .map(|l| match l {
                    Label::Real(v) => Ok(*v),
                    Label::Class(c) => Ok(*c as f64),
                })
                .collect::<Result<Vec<f64>, EvalError>>()?;
            vec![(y, Loss::Squared)]
        }
        Task::BinaryClassification | Task::Multiclass(_) => {
            let classes = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    Label::Real(_) => Err(EvalError::LabelKind),
                })
                .collect::<Result<Vec<usize>, EvalError>>()?;
            let n_classes = task.n_classes().expect("classification");
            if let Some(&bad) = classes.iter().find(|&&c| c >= n_classes) {
                return Err(EvalError::ClassRange { class: bad, n_classes });
            }
            let present = (0..n_classes).filter(|c| classes.contains(c)).count();
            if present < 2 {
                return Err(EvalError::SingleClass("probe training set".into()));
            }
            let outputs: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
            outputs
                .into_iter()
                .map(|c| (classes.iter().map(|&k| f64::from(u8::from(k == c))).collect(), Loss::Logistic))
                .collect()
        }
    };

    let mut model = ProbeModel {
        task: task.to_string(),
        standardizer,
        weights: Vec::new(),
        iterations: Vec::new(),
        objective: Vec::new(),
        converged: Vec::new(),
    };
    for (output, (y, loss)) in targets.into_iter().enumerate() {
        if loss == Loss::Logistic && !y.iter().any(|&v| v > 0.5) {
            // class absent from training: a fixed very negative intercept
            log::warn!("class {output} absent from probe training data");
            let mut w = vec![0.0; d + 1];
            w[d] = -30.0;
            model.weights.push(w);
            model.iterations.push(0);
            model.objective.push(f64::NAN);
            model.converged.push(false);
            continue;
        }
        let problem = Problem { x: &xs, y, loss, l2: cfg.l2 };
        let (w, iters, converged) = problem.minimize(initial_weights(d, cfg, output), cfg);
        if !converged {
            log::warn!("probe output {output} stopped at {iters} iterations before reaching tolerance");
        }
        model.objective.push(problem.objective(&w));
        model.weights.push(w);
        model.iterations.push(iters);
        model.converged.push(converged);
    }
    Ok(model)
}

impl ProbeModel {
    /// One score per output per row: probabilities for classification,
    /// predictions for regression.
    pub fn predict(&self, x: &Matrix) -> Vec<Vec<f64>> {
        let xs = self.standardizer.apply(x);
        let regression = self.task == Task::Regression.to_string();
        (0..xs.rows)
            .map(|i| {
                self.weights
                    .iter()
                    .map(|w| {
                        let d = w.len() - 1;
                        let z = xs.row(i).iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
                        if regression {
                            z
                        } else {
                            sigmoid(z)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
