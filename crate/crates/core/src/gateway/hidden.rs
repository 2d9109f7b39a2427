//! Client for the hidden-states endpoint.
//!
//! `POST <base>/v1/hidden_states` with `{"model": .., "text": ..}` answers
//! `{"tokens": T, "dim": d, "layers": [[[f32; d]; T]; L+1]}`, layer 0 being
//! the embedding output.

use std::sync::atomic::AtomicUsize;

use serde::{Deserialize, Serialize};

use super::{build_agent, post_json_with_retry, EndpointConfig, GatewayError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenStatesRequest {
    pub model: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStatesResponse {
    pub tokens: usize,
    pub dim: usize,
    pub layers: Vec<Vec<Vec<f32>>>,
}

impl HiddenStatesResponse {
    pub fn from_matrices(layers: &[Matrix]) -> Self {
        let tokens = layers.first().map_or(0, |m| m.rows);
        let dim = layers.first().map_or(0, |m| m.cols);
        let layers = layers
            .iter()
            .map(|m| (0..m.rows).map(|t| m.row(t).iter().map(|&x| x as f32).collect()).collect())
            .collect();
        Self { tokens, dim, layers }
    }

    /// Checks the declared shape against every layer and converts.
    pub fn into_matrices(self) -> Result<Vec<Matrix>, GatewayError> {
        if self.tokens == 0 {
            return Err(GatewayError::Content("hidden states for zero tokens".into()));
        }
        if self.layers.is_empty() {
            return Err(GatewayError::Protocol("no layers in hidden-state response".into()));
        }
        let (t, d) = (self.tokens, self.dim);
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.into_iter().enumerate() {
            if layer.len() != t {
                return Err(GatewayError::Protocol(format!("layer {l} has {} rows, expected {t}", layer.len())));
            }
            let mut data = Vec::with_capacity(t * d);
            for (row_idx, row) in layer.into_iter().enumerate() {
                if row.len() != d {
                    return Err(GatewayError::Protocol(format!(
                        "layer {l} row {row_idx} has width {}, expected {d}",
                        row.len()
                    )));
                }
                data.extend(row.into_iter().map(f64::from));
            }
            out.push(Matrix::from_vec(t, d, data));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteHiddenStates {
    /// `L + 1` matrices of shape `tokens × dim`.
    pub layers: Vec<Matrix>,
    pub tokens: usize,
}

pub fn hidden_states_remote(
    text: &str,
    model_id: &str,
    endpoint: &EndpointConfig,
) -> Result<RemoteHiddenStates, GatewayError> {
    let agent = build_agent(endpoint);
    let body = serde_json::to_string(&HiddenStatesRequest { model: model_id.to_string(), text: text.to_string() })
        .expect("request serializes");
    let counter = AtomicUsize::new(0);
    let (response, _) = post_json_with_retry(&agent, endpoint, "/v1/hidden_states", &body, &counter)?;
    let parsed: HiddenStatesResponse = serde_json::from_str(&response)
        .map_err(|e| GatewayError::Protocol(format!("malformed hidden-state response: {e}")))?;
    let tokens = parsed.tokens;
    Ok(RemoteHiddenStates { layers: parsed.into_matrices()?, tokens })
}
