//! User embeddings: mean pooling over the last `k` transformer blocks, then
//! over tokens; ensembles by column concatenation; and the `EMB1` matrix file.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::UserSequence;
use crate::gateway::hidden::{HiddenStatesRequest, HiddenStatesResponse};
use crate::gateway::server::{HttpRequest, HttpResponse, LoopbackServer};
use crate::gateway::{hidden_states_remote, EndpointConfig, GatewayError};
use crate::schema::{Dictionaries, Schema};
use crate::serializer::serialize_pipe;
use crate::tensor::Matrix;
use crate::tinylm::{tokenize_fit, LmError, TinyLm};

pub const DEFAULT_K: usize = 8;

const MAGIC: &[u8; 4] = b"EMB1";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no tokens to pool")]
    NoTokens,
    #[error("no block outputs to pool (got {0} hidden-state matrices)")]
    NoLayers(usize),
    #[error("hidden-state layer {layer} is {rows}x{cols}, expected {t}x{d}")]
    LayerShape { layer: usize, rows: usize, cols: usize, t: usize, d: usize },
    #[error("embedding for user {0} has non-finite entries")]
    NonFinite(String),
    #[error("duplicate user id {0}")]
    DuplicateUser(String),
    #[error("row for user {user} has {found} columns, expected {expected}")]
    RowWidth { user: String, expected: usize, found: usize },
    #[error("embedding matrices cover different users; symmetric difference: {}", .0.join(", "))]
    UserSetMismatch(Vec<String>),
    #[error("no matrices to concatenate")]
    NothingToConcat,
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated { path: String, expected: u64, actual: u64 },
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub k: usize,
    /// Add the embedding-layer output to the window once `k` exceeds the
    /// number of blocks.
    pub include_embedding_layer: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, include_embedding_layer: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub vector: Vec<f64>,
    pub k_effective: usize,
    /// Inclusive range of pooled indices into the hidden-state array.
    pub layer_range: (usize, usize),
}

/// Mean over the last `k` block outputs and over all tokens.
///
/// `hidden_states` holds `L + 1` matrices of `T×d`, index 0 being the
/// embedding output. With `k > L` the window is clamped to the `L` blocks
/// (plus index 0 if `include_embedding_layer` is set).
pub fn mean_pool_last_k(hidden_states: &[Matrix], pooling: PoolingConfig) -> Result<Pooled, EmbedError> {
    if pooling.k < 1 {
        return Err(EmbedError::InvalidK);
    }
    if hidden_states.len() < 2 {
        return Err(EmbedError::NoLayers(hidden_states.len()));
    }
    let n_blocks = hidden_states.len() - 1;
    let (t, d) = (hidden_states[0].rows, hidden_states[0].cols);
    if t == 0 {
        return Err(EmbedError::NoTokens);
    }
    for (layer, h) in hidden_states.iter().enumerate() {
        if h.rows != t || h.cols != d {
            return Err(EmbedError::LayerShape { layer, rows: h.rows, cols: h.cols, t, d });
        }
    }
    let first =
        if pooling.k > n_blocks { usize::from(!pooling.include_embedding_layer) } else { n_blocks - pooling.k + 1 };
    let window = &hidden_states[first..];
    let mut vector = vec![0.0; d];
    for h in window {
        for row in h.data.chunks(d) {
            for (acc, x) in vector.iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    let denom = (window.len() * t) as f64;
    vector.iter_mut().for_each(|v| *v /= denom);
    Ok(Pooled { vector, k_effective: window.len(), layer_range: (first, n_blocks) })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TextVariant {
    RawPipe,
    Enriched { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSource {
    pub model_digest: String,
    pub k: usize,
    pub k_effective: usize,
    pub text_variant: TextVariant,
    pub layer_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding {
    pub user_id: String,
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Anything that maps a document to its per-layer hidden states.
pub trait HiddenStateSource: Send + Sync {
    fn hidden_states(&self, text: &str) -> Result<Vec<Matrix>, EmbedError>;
    fn model_digest(&self) -> String;
}

impl HiddenStateSource for TinyLm {
    fn hidden_states(&self, text: &str) -> Result<Vec<Matrix>, EmbedError> {
        let tokens = tokenize_fit(text, self.config().context_len);
        Ok(TinyLm::hidden_states(self, tokens.ids())?)
    }

    fn model_digest(&self) -> String {
        self.digest()
    }
}

/// Hidden states fetched from an inference server.
#[derive(Debug, Clone)]
pub struct RemoteModel {
    pub endpoint: EndpointConfig,
    pub model_id: String,
}

impl HiddenStateSource for RemoteModel {
    fn hidden_states(&self, text: &str) -> Result<Vec<Matrix>, EmbedError> {
        Ok(hidden_states_remote(text, &self.model_id, &self.endpoint)?.layers)
    }

    fn model_digest(&self) -> String {
        format!("remote:{}", self.model_id)
    }
}

pub fn embed_text(
    source: &dyn HiddenStateSource,
    user_id: &str,
    text: &str,
    pooling: PoolingConfig,
    text_variant: TextVariant,
) -> Result<UserEmbedding, EmbedError> {
    let pooled = mean_pool_last_k(&source.hidden_states(text)?, pooling)?;
    if pooled.vector.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite(user_id.to_string()));
    }
    Ok(UserEmbedding {
        user_id: user_id.to_string(),
        vector: pooled.vector,
        source: EmbeddingSource {
            model_digest: source.model_digest(),
            k: pooling.k,
            k_effective: pooled.k_effective,
            text_variant,
            layer_range: pooled.layer_range,
        },
    })
}

/// Embeds the raw pipe serialization of one user's history.
pub fn embed_user(
    source: &dyn HiddenStateSource,
    sequence: &UserSequence,
    schema: &Schema,
    dictionaries: &Dictionaries,
    pooling: PoolingConfig,
) -> Result<UserEmbedding, EmbedError> {
    let text = serialize_pipe(sequence, schema, dictionaries);
    embed_text(source, &sequence.user_id, &text.text, pooling, TextVariant::RawPipe)
}

/// Embeds `(user_id, text)` documents in parallel and assembles the matrix.
pub fn embed_documents(
    source: &dyn HiddenStateSource,
    docs: &[(String, String)],
    pooling: PoolingConfig,
    text_variant: TextVariant,
) -> Result<(EmbeddingMatrix, EmbeddingSource), EmbedError> {
    let embeddings: Vec<UserEmbedding> = docs
        .par_iter()
        .map(|(user, text)| embed_text(source, user, text, pooling, text_variant.clone()))
        .collect::<Result<_, _>>()?;
    let meta = embeddings.first().map(|e| e.source.clone()).unwrap_or(EmbeddingSource {
        model_digest: source.model_digest(),
        k: pooling.k,
        k_effective: 0,
        text_variant,
        layer_range: (0, 0),
    });
    let rows = embeddings.into_iter().map(|e| (e.user_id, e.vector)).collect();
    Ok((EmbeddingMatrix::from_rows(rows)?, meta))
}

/// Rows sorted by unique user id; values stored as `f32` like the file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    user_ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn from_rows(mut rows: Vec<(String, Vec<f64>)>) -> Result<Self, EmbedError> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = rows.first().map_or(0, |r| r.1.len());
        let mut user_ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (user, v) in rows {
            if user_ids.last() == Some(&user) {
                return Err(EmbedError::DuplicateUser(user));
            }
            if v.len() != dim {
                return Err(EmbedError::RowWidth { user, expected: dim, found: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::NonFinite(user));
            }
            data.extend(v.iter().map(|&x| x as f32));
            user_ids.push(user);
        }
        Ok(Self { user_ids, dim, data })
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, user_id: &str) -> Option<usize> {
        self.user_ids.binary_search_by(|u| u.as_str().cmp(user_id)).ok()
    }

    pub fn get(&self, user_id: &str) -> Option<&[f32]> {
        self.index_of(user_id).map(|i| self.row(i))
    }
}

/// Joins matrices column-wise, blocks in argument order.
pub fn concat_embeddings(matrices: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix, EmbedError> {
    let first = matrices.first().ok_or(EmbedError::NothingToConcat)?;
    for m in &matrices[1..] {
        if m.user_ids != first.user_ids {
            let a: BTreeSet<&String> = first.user_ids.iter().collect();
            let b: BTreeSet<&String> = m.user_ids.iter().collect();
            let diff = a.symmetric_difference(&b).map(|s| s.to_string()).collect();
            return Err(EmbedError::UserSetMismatch(diff));
        }
    }
    let dim: usize = matrices.iter().map(|m| m.dim).sum();
    let mut data = Vec::with_capacity(first.len() * dim);
    for i in 0..first.len() {
        for m in matrices {
            data.extend_from_slice(m.row(i));
        }
    }
    Ok(EmbeddingMatrix { user_ids: first.user_ids.clone(), dim, data })
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: &Path) -> Result<(), EmbedError> {
    let mut buf = Vec::with_capacity(18 + matrix.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    for id in &matrix.user_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for x in &matrix.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.persist(path).map_err(|e| EmbedError::Io(e.error))?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let bytes = fs::read(path)?;
    let p = path.display().to_string();
    let format = |message: String| EmbedError::Format { path: p.clone(), message };
    let truncated = |expected: usize| EmbedError::Truncated {
        path: p.clone(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 18 {
        return Err(truncated(18));
    }
    if &bytes[..4] != MAGIC {
        return Err(format("bad magic, expected EMB1".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes")) as usize;
    let mut at = 18;
    let mut user_ids: Vec<String> = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        if bytes.len() < at + 4 {
            return Err(truncated(at + 4));
        }
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        at += 4;
        if bytes.len() < at + len {
            return Err(truncated(at + len));
        }
        let id = std::str::from_utf8(&bytes[at..at + len])
            .map_err(|_| format(format!("user id {i} is not valid UTF-8")))?
            .to_string();
        at += len;
        if let Some(prev) = user_ids.last() {
            if *prev >= id {
                return Err(format(format!("user ids not strictly sorted at index {i} ({prev:?} then {id:?})")));
            }
        }
        user_ids.push(id);
    }
    let expected = at + n * dim * 4;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(format(format!("{} trailing bytes after the matrix", bytes.len() - expected)));
    }
    let data = bytes[at..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(EmbeddingMatrix { user_ids, dim, data })
}

/// Request handler answering `POST /v1/hidden_states` from a local model.
pub fn hidden_states_handler(model: Arc<TinyLm>, model_id: String) -> impl Fn(&HttpRequest) -> HttpResponse {
    move |req| {
        if req.method != "POST" || req.path != "/v1/hidden_states" {
            return HttpResponse::json(404, r#"{"error":"not found"}"#);
        }
        let parsed: HiddenStatesRequest = match serde_json::from_str(&req.body) {
            Ok(p) => p,
            Err(e) => return HttpResponse::json(400, serde_json::json!({ "error": e.to_string() }).to_string()),
        };
        if parsed.model != model_id {
            let msg = format!("unknown model {:?}", parsed.model);
            return HttpResponse::json(404, serde_json::json!({ "error": msg }).to_string());
        }
        match HiddenStateSource::hidden_states(model.as_ref(), &parsed.text) {
            Ok(layers) => HttpResponse::json(
                200,
                serde_json::to_string(&HiddenStatesResponse::from_matrices(&layers)).expect("response serializes"),
            ),
            Err(e) => HttpResponse::json(500, serde_json::json!({ "error": e.to_string() }).to_string()),
        }
    }
}

/// Serves a local model's hidden states on `bind` (e.g. `127.0.0.1:0`).
pub fn serve_hidden_states(model: Arc<TinyLm>, model_id: &str, bind: &str) -> std::io::Result<LoopbackServer> {
    LoopbackServer::start(bind, hidden_states_handler(model, model_id.to_string()))
}
