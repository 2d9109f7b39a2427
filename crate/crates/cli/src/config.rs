//! Pipeline configuration: a TOML file with an explicit `schema_version`.
//! Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use es2emb_core::embedder::PoolingConfig;
use es2emb_core::enrichment::{CorpusSpec, EnrichConfig, FormatMode};
use es2emb_core::evaluator::ProbeConfig;
use es2emb_core::gateway::EndpointConfig;
use es2emb_core::tinylm::{LmConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that replaces `endpoint.base_url`.
pub const ENDPOINT_ENV: &str = "ES2EMB_ENDPOINT";

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub name: String,
    pub schema: PathBuf,
    pub events: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawCorpus {
    volume_multiplier: usize,
    include_raw: bool,
    source_datasets: Vec<String>,
    format_mode: String,
}

impl Default for RawCorpus {
    fn default() -> Self {
        Self { volume_multiplier: 1, include_raw: false, source_datasets: Vec::new(), format_mode: "mixed".into() }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEndpoint {
    base_url: String,
    /// Name of the environment variable holding the API key.
    api_key_env: Option<String>,
    timeout_secs: u64,
    max_attempts: u32,
    backoff_ms: u64,
}

impl Default for RawEndpoint {
    fn default() -> Self {
        let d = EndpointConfig::default();
        Self {
            base_url: d.base_url,
            api_key_env: None,
            timeout_secs: d.timeout.as_secs(),
            max_attempts: d.max_attempts,
            backoff_ms: d.backoff_base.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub test_fraction: f64,
    pub n_folds: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { test_fraction: 0.1, n_folds: 5, probe: ProbeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSettings {
    /// Extra EMB1 matrices concatenated after this pipeline's embeddings.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    /// Training-set sizes for `ablate datasize`; empty picks 1/8, 1/4, 1/2
    /// and all of the training users.
    pub sizes: Vec<usize>,
    /// Volume multipliers of the mixed-format rows in `ablate formats`.
    pub volumes: Vec<usize>,
    /// Plain-text corpus (paragraphs separated by blank lines) for the
    /// generic model in `ablate components`; a bundled text when unset.
    pub pretrain_corpus: Option<PathBuf>,
    pub pretrain: TrainConfig,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            sizes: Vec::new(),
            volumes: vec![1],
            pretrain_corpus: None,
            pretrain: TrainConfig { epochs: 20, learning_rate: 1e-3, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    k: Option<usize>,
    #[serde(default)]
    include_embedding_layer: bool,
    eval_dataset: Option<String>,
    #[serde(default)]
    datasets: Vec<DatasetRef>,
    #[serde(default)]
    corpus: RawCorpus,
    #[serde(default)]
    enrich: EnrichConfig,
    #[serde(default)]
    model: LmConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    endpoint: RawEndpoint,
    #[serde(default)]
    eval: EvalSettings,
    #[serde(default)]
    ensemble: EnsembleSettings,
    #[serde(default)]
    ablation: AblationSettings,
}

/// A validated configuration with every path resolved.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub pooling: PoolingConfig,
    pub eval_dataset: String,
    pub datasets: Vec<DatasetRef>,
    pub corpus: CorpusSpec,
    pub enrich: EnrichConfig,
    pub model: LmConfig,
    pub train: TrainConfig,
    pub endpoint: EndpointConfig,
    pub eval: EvalSettings,
    pub ensemble: EnsembleSettings,
    pub ablation: AblationSettings,
}

/// Pulls the field name out of a serde "missing field `x`" / "unknown
/// field `x`" message.
fn field_from_message(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn require_file(field: String, path: &Path) -> Result<(), ConfigError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("file {} not found", path.display())))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path, endpoint_override: Option<String>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, endpoint_override)
    }

    /// `model.seed` and `train.seed` default to the global seed.
    pub fn parse(text: &str, base_dir: &Path, endpoint_override: Option<String>) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("config", e.message()))?;
        let global_seed = table.get("seed").and_then(toml::Value::as_integer);
        if let Some(seed) = global_seed {
            for section in ["model", "train"] {
                let entry = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                if let Some(t) = entry.as_table_mut() {
                    t.entry("seed").or_insert(toml::Value::Integer(seed));
                }
            }
        }
        let raw: RawConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let message = e.message().to_string();
            ConfigError::new(field_from_message(&message).unwrap_or_else(|| "config".into()), message)
        })?;
        Self::validate(raw, base_dir, endpoint_override)
    }

    fn validate(raw: RawConfig, base: &Path, endpoint_override: Option<String>) -> Result<Self, ConfigError> {
        match raw.schema_version {
            None => return Err(ConfigError::new("schema_version", "missing required field")),
            Some(CONFIG_VERSION) => {}
            Some(v) => return Err(ConfigError::new("schema_version", format!("unsupported version {v}"))),
        }
        let k = raw.k.ok_or_else(|| ConfigError::new("k", "missing required field"))?;
        if k == 0 {
            return Err(ConfigError::new("k", "must be at least 1"));
        }
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        if raw.datasets.is_empty() {
            return Err(ConfigError::new("datasets", "at least one dataset is required"));
        }
        let mut datasets = Vec::with_capacity(raw.datasets.len());
        for (i, d) in raw.datasets.iter().enumerate() {
            if d.name.is_empty() {
                return Err(ConfigError::new(format!("datasets[{i}].name"), "must not be empty"));
            }
            if datasets.iter().any(|o: &DatasetRef| o.name == d.name) {
                return Err(ConfigError::new(format!("datasets[{i}].name"), format!("duplicate name {:?}", d.name)));
            }
            let r = DatasetRef {
                name: d.name.clone(),
                schema: resolve(&d.schema),
                events: resolve(&d.events),
                labels: d.labels.as_deref().map(resolve),
            };
            require_file(format!("datasets[{i}].schema"), &r.schema)?;
            require_file(format!("datasets[{i}].events"), &r.events)?;
            if let Some(l) = &r.labels {
                require_file(format!("datasets[{i}].labels"), l)?;
            }
            datasets.push(r);
        }
        let eval_dataset = raw.eval_dataset.unwrap_or_else(|| datasets[0].name.clone());
        match datasets.iter().find(|d| d.name == eval_dataset) {
            None => return Err(ConfigError::new("eval_dataset", format!("no dataset named {eval_dataset:?}"))),
            Some(d) if d.labels.is_none() => {
                return Err(ConfigError::new("eval_dataset", format!("dataset {eval_dataset:?} has no labels file")))
            }
            Some(_) => {}
        }

        let c = raw.corpus;
        if c.volume_multiplier < 1 {
            return Err(ConfigError::new("corpus.volume_multiplier", "must be at least 1"));
        }
        let format_mode: FormatMode = c.format_mode.parse().map_err(|e| ConfigError::new("corpus.format_mode", e))?;
        for s in &c.source_datasets {
            if !datasets.iter().any(|d| &d.name == s) {
                return Err(ConfigError::new("corpus.source_datasets", format!("no dataset named {s:?}")));
            }
        }
        let corpus = CorpusSpec {
            volume_multiplier: c.volume_multiplier,
            include_raw: c.include_raw,
            source_datasets: c.source_datasets,
            format_mode,
        };

        let e = &raw.enrich;
        if !(0.0..=f64::MAX).contains(&e.temperature) {
            return Err(ConfigError::new("enrich.temperature", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&e.max_failure_fraction) {
            return Err(ConfigError::new("enrich.max_failure_fraction", "must lie in [0, 1]"));
        }
        if e.max_in_flight == 0 {
            return Err(ConfigError::new("enrich.max_in_flight", "must be at least 1"));
        }
        if e.context_budget_chars == 0 {
            return Err(ConfigError::new("enrich.context_budget_chars", "must be positive"));
        }
        if e.max_tokens == 0 {
            return Err(ConfigError::new("enrich.max_tokens", "must be positive"));
        }
        raw.model.validate().map_err(|err| ConfigError::new("model", err.to_string()))?;
        raw.train.validate().map_err(|err| ConfigError::new("train", err.to_string()))?;

        let ev = &raw.eval;
        if !(ev.test_fraction > 0.0 && ev.test_fraction < 1.0) {
            return Err(ConfigError::new("eval.test_fraction", "must lie strictly between 0 and 1"));
        }
        if ev.n_folds == 0 {
            return Err(ConfigError::new("eval.n_folds", "must be at least 1"));
        }
        if !(0.0..=f64::MAX).contains(&ev.probe.l2)
            || ev.probe.max_iter == 0
            || ev.probe.tol.is_nan()
            || ev.probe.tol <= 0.0
        {
            return Err(ConfigError::new("eval.probe", "need l2 >= 0, max_iter >= 1 and tol > 0"));
        }

        let ensemble = EnsembleSettings { inputs: raw.ensemble.inputs.iter().map(|p| resolve(p)).collect() };
        for (i, p) in ensemble.inputs.iter().enumerate() {
            require_file(format!("ensemble.inputs[{i}]"), p)?;
        }

        let mut ablation = raw.ablation;
        if ablation.sizes.windows(2).any(|w| w[0] >= w[1]) || ablation.sizes.first() == Some(&0) {
            return Err(ConfigError::new("ablation.sizes", "must be positive and strictly ascending"));
        }
        if ablation.volumes.is_empty() || ablation.volumes.contains(&0) {
            return Err(ConfigError::new("ablation.volumes", "need at least one multiplier, each >= 1"));
        }
        ablation.pretrain.validate().map_err(|err| ConfigError::new("ablation.pretrain", err.to_string()))?;
        if let Some(p) = &ablation.pretrain_corpus {
            let p = resolve(p);
            require_file("ablation.pretrain_corpus".into(), &p)?;
            ablation.pretrain_corpus = Some(p);
        }

        let ep = raw.endpoint;
        let api_key = match &ep.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ConfigError::new("endpoint.api_key_env", format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        if ep.max_attempts == 0 {
            return Err(ConfigError::new("endpoint.max_attempts", "must be at least 1"));
        }
        let endpoint = EndpointConfig {
            base_url: endpoint_override.unwrap_or(ep.base_url),
            api_key,
            timeout: Duration::from_secs(ep.timeout_secs),
            max_attempts: ep.max_attempts,
            backoff_base: Duration::from_millis(ep.backoff_ms),
            max_in_flight: raw.enrich.max_in_flight,
            ..EndpointConfig::default()
        };

        let output_dir = resolve(raw.output_dir.as_deref().unwrap_or(Path::new("out")));
        let cache_dir = raw.cache_dir.as_deref().map(resolve).unwrap_or_else(|| output_dir.join("cache"));
        Ok(Self {
            seed: raw.seed.unwrap_or(0),
            output_dir,
            cache_dir,
            pooling: PoolingConfig { k, include_embedding_layer: raw.include_embedding_layer },
            eval_dataset,
            datasets,
            corpus,
            enrich: raw.enrich,
            model: raw.model,
            train: raw.train,
            endpoint,
            eval: raw.eval,
            ensemble,
            ablation,
        })
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetRef> {
        self.datasets.iter().find(|d| d.name == name)
    }
}
