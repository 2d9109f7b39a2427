//! Pre-LayerNorm decoder-only transformer with hand-written backward pass.
//!
//! Parameters live in one flat `Vec<f64>` in this order (also the
//! checkpoint order):
//!
//! 1. token embedding `V×d` (tied with the output projection)
//! 2. position embedding `T_max×d`
//! 3. per block: `ln1.g d`, `ln1.b d`, `W_qkv d×3d`, `b_qkv 3d`, `W_o d×d`,
//!    `b_o d`, `ln2.g d`, `ln2.b d`, `W_fc d×4d`, `b_fc 4d`, `W_proj 4d×d`,
//!    `b_proj d`
//! 4. final norm `lnf.g d`, `lnf.b d`
//!
//! Weight matrices are row-major `in×out`, so a layer computes `x·W + b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{LmConfig, LmError};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &LmConfig) -> Self {
        let (v, t, d) = (c.vocab_size, c.context_len, c.hidden_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(t * d);
        let blocks = (0..c.n_layers)
            .map(|_| BlockOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        Self { tok_emb, pos_emb, blocks, lnf_g, lnf_b, total: at }
    }
}

/// Logits and the per-layer residual stream of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `T×V`; row `t` scores the token at position `t + 1`.
    pub logits: Matrix,
    /// `L + 1` matrices of `T×d`: index 0 is the embedding output, index
    /// `l` the output of block `l`.
    pub hidden_states: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct TinyLm {
    config: LmConfig,
    layout: Layout,
    params: Vec<f64>,
}

struct BlockCache {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att_y: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    ln2_out: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    hidden: Vec<Vec<f64>>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    lnf_out: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * g[j] + b[j];
        }
    }
    (xhat, rstd, out)
}

/// Accumulates `dg`, `db` and returns the input gradient.
fn layer_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    t: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
        for j in 0..d {
            let k = i * d + j;
            dg[j] += dout[k] * xhat[k];
            db[j] += dout[k];
            dxhat[j] = dout[k] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let k = i * d + j;
            dx[k] = rstd[i] * (dxhat[j] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn bias_grad(dy: &[f64], db: &mut [f64]) {
    for row in dy.chunks(db.len()) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

impl TinyLm {
    /// Randomly initialized model (seeded by `config.seed`).
    pub fn new(config: LmConfig) -> Result<Self, LmError> {
        Self::with_init_scale(config, 1.0)
    }

    /// Like [`TinyLm::new`] with all initial standard deviations multiplied
    /// by `scale`; larger weights make finite-difference checks better
    /// conditioned.
    pub fn with_init_scale(config: LmConfig, scale: f64) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let mut fill = |params: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std * scale).expect("positive std");
            for p in params {
                *p = normal.sample(&mut rng);
            }
        };
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        fill(&mut params[layout.tok_emb..layout.tok_emb + config.vocab_size * d], 0.02);
        fill(&mut params[layout.pos_emb..layout.pos_emb + config.context_len * d], 0.01);
        for b in &layout.blocks {
            params[b.ln1_g..b.ln1_g + d].fill(1.0);
            params[b.ln2_g..b.ln2_g + d].fill(1.0);
            fill(&mut params[b.w_qkv..b.w_qkv + 3 * d * d], 0.02);
            fill(&mut params[b.w_o..b.w_o + d * d], resid_std);
            fill(&mut params[b.w_fc..b.w_fc + 4 * d * d], 0.02);
            fill(&mut params[b.w_proj..b.w_proj + 4 * d * d], resid_std);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: LmConfig, params: Vec<f64>) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(LmError::ParamCount { expected: layout.total, actual: params.len() });
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 over the configuration and the f32-rounded parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_bytes());
        for p in &self.params {
            h.update((*p as f32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptyInput);
        }
        if tokens.len() > self.config.context_len {
            return Err(LmError::TooLong { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::TokenRange { token: bad, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32], with_logits: bool) -> (Cache, Option<Vec<f64>>) {
        let c = &self.config;
        let (t, d, nh) = (tokens.len(), c.hidden_dim, c.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        let lay = &self.layout;

        let mut x = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &p[lay.tok_emb + tok as usize * d..][..d];
            let pe = &p[lay.pos_emb + i * d..][..d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        let mut hidden = Vec::with_capacity(c.n_layers + 1);
        hidden.push(x.clone());
        let mut blocks = Vec::with_capacity(c.n_layers);

        for b in &lay.blocks {
            let (ln1_xhat, ln1_rstd, ln1_out) =
                layer_norm(&x, &p[b.ln1_g..b.ln1_g + d], &p[b.ln1_b..b.ln1_b + d], t, d);
            let mut qkv = vec![0.0; t * 3 * d];
            matmul(&ln1_out, &p[b.w_qkv..], &mut qkv, t, d, 3 * d, false);
            add_bias(&mut qkv, &p[b.b_qkv..b.b_qkv + 3 * d]);

            let mut probs = vec![0.0; nh * t * t];
            let mut att_y = vec![0.0; t * d];
            for h in 0..nh {
                for i in 0..t {
                    let q = &qkv[i * 3 * d + h * hd..][..hd];
                    let row = &mut probs[(h * t + i) * t..][..t];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=i {
                        let k = &qkv[u * 3 * d + d + h * hd..][..hd];
                        let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[u] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for v in &mut row[..=i] {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    let y = &mut att_y[i * d + h * hd..][..hd];
                    for u in 0..=i {
                        row[u] /= z;
                        let v = &qkv[u * 3 * d + 2 * d + h * hd..][..hd];
                        for (yy, vv) in y.iter_mut().zip(v) {
                            *yy += row[u] * vv;
                        }
                    }
                }
            }
            let mut attn_out = vec![0.0; t * d];
            matmul(&att_y, &p[b.w_o..], &mut attn_out, t, d, d, false);
            add_bias(&mut attn_out, &p[b.b_o..b.b_o + d]);
            for (xx, a) in x.iter_mut().zip(&attn_out) {
                *xx += a;
            }

            let (ln2_xhat, ln2_rstd, ln2_out) =
                layer_norm(&x, &p[b.ln2_g..b.ln2_g + d], &p[b.ln2_b..b.ln2_b + d], t, d);
            let mut fc_pre = vec![0.0; t * 4 * d];
            matmul(&ln2_out, &p[b.w_fc..], &mut fc_pre, t, d, 4 * d, false);
            add_bias(&mut fc_pre, &p[b.b_fc..b.b_fc + 4 * d]);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mut mlp = vec![0.0; t * d];
            matmul(&fc_act, &p[b.w_proj..], &mut mlp, t, 4 * d, d, false);
            add_bias(&mut mlp, &p[b.b_proj..b.b_proj + d]);
            for (xx, m) in x.iter_mut().zip(&mlp) {
                *xx += m;
            }
            hidden.push(x.clone());
            blocks.push(BlockCache {
                ln1_xhat,
                ln1_rstd,
                ln1_out,
                qkv,
                probs,
                att_y,
                ln2_xhat,
                ln2_rstd,
                ln2_out,
                fc_pre,
                fc_act,
            });
        }

        let (lnf_xhat, lnf_rstd, lnf_out) =
            layer_norm(&x, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d], t, d);
        let logits = with_logits.then(|| {
            let v = c.vocab_size;
            let mut logits = vec![0.0; t * v];
            matmul_a_bt(&lnf_out, &p[lay.tok_emb..lay.tok_emb + v * d], &mut logits, t, d, v, false);
            logits
        });
        (Cache { blocks, hidden, lnf_xhat, lnf_rstd, lnf_out }, logits)
    }

    fn hidden_matrices(&self, hidden: Vec<Vec<f64>>, t: usize) -> Vec<Matrix> {
        hidden.into_iter().map(|h| Matrix::from_vec(t, self.config.hidden_dim, h)).collect()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput, LmError> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let (cache, logits) = self.run(tokens, true);
        Ok(ForwardOutput {
            logits: Matrix::from_vec(t, self.config.vocab_size, logits.expect("logits requested")),
            hidden_states: self.hidden_matrices(cache.hidden, t),
        })
    }

    /// Residual stream only; skips the output projection.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Vec<Matrix>, LmError> {
        self.check_tokens(tokens)?;
        let (cache, _) = self.run(tokens, false);
        Ok(self.hidden_matrices(cache.hidden, tokens.len()))
    }

    /// Summed next-token loss.
    pub fn loss(&self, tokens: &[u32]) -> Result<f64, LmError> {
        super::ntp_loss(&self.forward(tokens)?.logits, tokens)
    }

    /// Summed next-token loss and its gradient with respect to every
    /// parameter.
    pub fn loss_and_grad(&self, tokens: &[u32]) -> Result<(f64, Vec<f64>), LmError> {
        self.check_tokens(tokens)?;
        if tokens.len() < 2 {
            return Err(LmError::TooShort(tokens.len()));
        }
        let c = &self.config;
        let (t, d, v, nh) = (tokens.len(), c.hidden_dim, c.vocab_size, c.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let (cache, logits) = self.run(tokens, true);
        let logits = logits.expect("logits requested");
        let p = &self.params;
        let lay = &self.layout;
        let mut grad = vec![0.0; p.len()];

        // softmax cross-entropy; the last position predicts nothing
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t * v];
        for i in 0..t - 1 {
            let row = &logits[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            let target = tokens[i + 1] as usize;
            loss += z.ln() + max - row[target];
            let drow = &mut dlogits[i * v..(i + 1) * v];
            for (dl, &l) in drow.iter_mut().zip(row) {
                *dl = (l - max).exp() / z;
            }
            drow[target] -= 1.0;
        }

        let (emb_grad, rest) = grad.split_at_mut(lay.pos_emb);
        matmul_at_b(&dlogits, &cache.lnf_out, &mut emb_grad[lay.tok_emb..], t, v, d, true);
        let _ = rest;
        let mut dlnf = vec![0.0; t * d];
        matmul(&dlogits, &p[lay.tok_emb..], &mut dlnf, t, v, d, false);
        let (dg, db) = grad[lay.lnf_g..lay.lnf_b + d].split_at_mut(d);
        let mut dx =
            layer_norm_backward(&dlnf, &cache.lnf_xhat, &cache.lnf_rstd, &p[lay.lnf_g..lay.lnf_g + d], dg, db, t, d);

        for (b, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch
            bias_grad(&dx, &mut grad[b.b_proj..b.b_proj + d]);
            matmul_at_b(&bc.fc_act, &dx, &mut grad[b.w_proj..], t, 4 * d, d, true);
            let mut dact = vec![0.0; t * 4 * d];
            matmul_a_bt(&dx, &p[b.w_proj..b.w_proj + 4 * d * d], &mut dact, t, d, 4 * d, false);
            for (g, &pre) in dact.iter_mut().zip(&bc.fc_pre) {
                *g *= gelu_grad(pre);
            }
            bias_grad(&dact, &mut grad[b.b_fc..b.b_fc + 4 * d]);
            matmul_at_b(&bc.ln2_out, &dact, &mut grad[b.w_fc..], t, d, 4 * d, true);
            let mut dln2 = vec![0.0; t * d];
            matmul_a_bt(&dact, &p[b.w_fc..b.w_fc + 4 * d * d], &mut dln2, t, 4 * d, d, false);
            let (dg, db) = grad[b.ln2_g..b.ln2_b + d].split_at_mut(d);
            let dmid = layer_norm_backward(&dln2, &bc.ln2_xhat, &bc.ln2_rstd, &p[b.ln2_g..b.ln2_g + d], dg, db, t, d);
            for (a, m) in dx.iter_mut().zip(&dmid) {
                *a += m;
            }

            // attention branch
            bias_grad(&dx, &mut grad[b.b_o..b.b_o + d]);
            matmul_at_b(&bc.att_y, &dx, &mut grad[b.w_o..], t, d, d, true);
            let mut dy = vec![0.0; t * d];
            matmul_a_bt(&dx, &p[b.w_o..b.w_o + d * d], &mut dy, t, d, d, false);
            let mut dqkv = vec![0.0; t * 3 * d];
            let mut dp = vec![0.0; t];
            for h in 0..nh {
                for i in 0..t {
                    let probs = &bc.probs[(h * t + i) * t..][..t];
                    let dyi = &dy[i * d + h * hd..][..hd];
                    let mut dot = 0.0;
                    for u in 0..=i {
                        let vv = &bc.qkv[u * 3 * d + 2 * d + h * hd..][..hd];
                        dp[u] = dyi.iter().zip(vv).map(|(a, b)| a * b).sum();
                        dot += probs[u] * dp[u];
                    }
                    for u in 0..=i {
                        let pu = probs[u];
                        let ds = pu * (dp[u] - dot) * scale;
                        for j in 0..hd {
                            dqkv[u * 3 * d + 2 * d + h * hd + j] += pu * dyi[j];
                            dqkv[i * 3 * d + h * hd + j] += ds * bc.qkv[u * 3 * d + d + h * hd + j];
                            dqkv[u * 3 * d + d + h * hd + j] += ds * bc.qkv[i * 3 * d + h * hd + j];
                        }
                    }
                }
            }
            bias_grad(&dqkv, &mut grad[b.b_qkv..b.b_qkv + 3 * d]);
            matmul_at_b(&bc.ln1_out, &dqkv, &mut grad[b.w_qkv..], t, d, 3 * d, true);
            let mut dln1 = vec![0.0; t * d];
            matmul_a_bt(&dqkv, &p[b.w_qkv..b.w_qkv + 3 * d * d], &mut dln1, t, 3 * d, d, false);
            let (dg, db) = grad[b.ln1_g..b.ln1_b + d].split_at_mut(d);
            let din = layer_norm_backward(&dln1, &bc.ln1_xhat, &bc.ln1_rstd, &p[b.ln1_g..b.ln1_g + d], dg, db, t, d);
            for (a, m) in dx.iter_mut().zip(&din) {
                *a += m;
            }
        }

        for (i, &tok) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            for j in 0..d {
                grad[lay.tok_emb + tok as usize * d + j] += row[j];
                grad[lay.pos_emb + i * d + j] += row[j];
            }
        }
        Ok((loss, grad))
    }
}
