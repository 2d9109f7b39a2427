//! LLM rewriting of pipe-serialized histories into varied formats, the
//! substring fidelity audit, and fine-tuning corpus assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, UserSequence, Value};
use crate::gateway::cache::sha256_hex;
use crate::gateway::{
    cached_chat_complete, CacheKey, ChatBackend, ChatMessage, ChatRequest, Completion, GatewayError, ResponseCache,
};
use crate::schema::{Dictionaries, Schema};
use crate::serializer::{
    fs_safe, html_escape, markdown_escape, render_table, render_value, serialize_pipe, serialize_variant,
    split_pipe_records, truncate_pipe_recent, Format, SerializedDoc, TableCell,
};

pub const SYSTEM_PROMPT: &str = include_str!("../fixtures/enrichment_system.txt");
pub const USER_PROMPT: &str = include_str!("../fixtures/enrichment_user.txt");

/// Separates the user instructions from the appended transactions.
const BLOCK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum EnrichError {
    #[error("enrichment input must be a pipe document, got {0}")]
    NotPipe(Format),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("mixed-format corpora need an LLM backend and a response cache")]
    MissingBackend,
    #[error("user {user_id} variant {variant}: {source}")]
    Variant {
        user_id: String,
        variant: usize,
        #[source]
        source: GatewayError,
    },
    #[error("{failed} of {total} enrichment requests failed, above the tolerated fraction {tolerated}")]
    TooManyFailures { failed: usize, total: usize, tolerated: f64 },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnrichConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Longest pipe document (in characters) sent to the LLM; longer ones
    /// lose their oldest events.
    pub context_budget_chars: usize,
    /// Fraction of failed requests a corpus build tolerates.
    pub max_failure_fraction: f64,
    pub max_in_flight: usize,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            model_id: "llama-3.1-8b-instruct".to_string(),
            temperature: 0.7,
            max_tokens: 4096,
            context_budget_chars: 16_000,
            max_failure_fraction: 0.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentPrompt {
    pub request: ChatRequest,
    /// The transactions block actually sent.
    pub block: String,
    pub truncated: bool,
}

/// System and user messages of the enrichment prompt with the (possibly
/// truncated) pipe document appended to the user message.
pub fn build_enrichment_prompt(
    doc: &SerializedDoc,
    config: &EnrichConfig,
    seed: u64,
) -> Result<EnrichmentPrompt, EnrichError> {
    if doc.format != Format::Pipe {
        return Err(EnrichError::NotPipe(doc.format));
    }
    let budget = config.context_budget_chars;
    let (block, truncated) = truncate_pipe_recent(&doc.text, |t| t.chars().count() <= budget);
    let request = ChatRequest {
        model_id: config.model_id.clone(),
        messages: vec![
            ChatMessage::system(SYSTEM_PROMPT),
            ChatMessage::user(format!("{USER_PROMPT}{BLOCK_SEPARATOR}{block}")),
        ],
        temperature: config.temperature,
        seed: Some(seed),
        max_tokens: config.max_tokens,
    };
    Ok(EnrichmentPrompt { request, block, truncated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fidelity {
    pub values_total: usize,
    pub values_found: usize,
}

fn count_non_overlapping(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        0
    } else {
        haystack.matches(needle).count()
    }
}

/// Counts source values (numbers, timestamps, code descriptions, non-empty
/// text, with multiplicity) that reappear in `text`. Escaped renderings
/// (CSV quoting, HTML, JSON, Markdown) count as present.
pub fn audit_fidelity(text: &str, events: &UserSequence, schema: &Schema, dictionaries: &Dictionaries) -> Fidelity {
    let mut wanted: BTreeMap<String, usize> = BTreeMap::new();
    for event in &events.events {
        for (field, value) in schema.fields().iter().zip(&event.values) {
            if matches!(value, Value::Text(s) if s.is_empty()) {
                continue;
            }
            let rendered = render_value(value, field.dictionary_ref.as_deref(), dictionaries);
            *wanted.entry(rendered).or_default() += 1;
        }
    }
    let mut fidelity = Fidelity::default();
    for (value, multiplicity) in wanted {
        let json = serde_json::to_string(&value).expect("strings serialize");
        let forms = [
            value.clone(),
            value.replace('"', "\"\""),
            html_escape(&value),
            json[1..json.len() - 1].to_string(),
            markdown_escape(&value),
        ];
        let occurrences = forms.iter().map(|f| count_non_overlapping(text, f)).max().unwrap_or(0);
        fidelity.values_total += multiplicity;
        fidelity.values_found += multiplicity.min(occurrences);
    }
    fidelity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub prompt_digest: String,
    pub temperature: f64,
    pub seed: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedDoc {
    pub user_id: String,
    pub variant_index: usize,
    pub text: String,
    pub provenance: Provenance,
    pub fidelity: Fidelity,
    pub cache_hit: bool,
}

/// Sequence holding only the events that survived truncation (the most
/// recent `kept`).
fn tail_events(sequence: &UserSequence, kept: usize) -> UserSequence {
    let skip = sequence.events.len().saturating_sub(kept);
    UserSequence { user_id: sequence.user_id.clone(), events: sequence.events[skip..].to_vec(), label: None }
}

/// `n_variants` enriched renderings with seeds `0..n_variants`; each result
/// stands alone so callers can tolerate individual failures.
pub fn enrich_user(
    sequence: &UserSequence,
    schema: &Schema,
    dictionaries: &Dictionaries,
    n_variants: usize,
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    config: &EnrichConfig,
) -> Vec<Result<EnrichedDoc, EnrichError>> {
    let doc = serialize_pipe(sequence, schema, dictionaries);
    (0..n_variants)
        .map(|variant| {
            let prompt = build_enrichment_prompt(&doc, config, variant as u64)?;
            let kept = split_pipe_records(&prompt.block).map_or(0, |(_, r)| r.len());
            let audited = tail_events(sequence, kept);
            let done = cached_chat_complete(&prompt.request, cache, backend)
                .map_err(|source| EnrichError::Variant { user_id: sequence.user_id.clone(), variant, source })?;
            let fidelity = audit_fidelity(&done.text, &audited, schema, dictionaries);
            if fidelity.values_found < fidelity.values_total {
                log::warn!(
                    "user {} variant {variant}: {} of {} source values missing from the rewrite",
                    sequence.user_id,
                    fidelity.values_total - fidelity.values_found,
                    fidelity.values_total
                );
            }
            Ok(EnrichedDoc {
                user_id: sequence.user_id.clone(),
                variant_index: variant,
                text: done.text,
                provenance: Provenance {
                    model_id: config.model_id.clone(),
                    prompt_digest: CacheKey::of(&prompt.request).as_str().to_string(),
                    temperature: config.temperature,
                    seed: variant as u64,
                    truncated: prompt.truncated,
                },
                fidelity,
                cache_hit: done.cache_hit,
            })
        })
        .collect()
}

type Mutator = Box<dyn Fn(&str) -> String + Send + Sync>;

/// Offline stand-in for a chat model: re-renders the appended pipe block in
/// one of the deterministic formats, chosen by the request seed.
pub struct StubLlm {
    requests: AtomicUsize,
    mutate: Option<Mutator>,
}

impl Default for StubLlm {
    fn default() -> Self {
        Self::new()
    }
}

impl StubLlm {
    pub fn new() -> Self {
        Self { requests: AtomicUsize::new(0), mutate: None }
    }

    /// Applies `f` to every reply (e.g. to plant omissions).
    pub fn with_mutation(f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self { requests: AtomicUsize::new(0), mutate: Some(Box::new(f)) }
    }

    fn reply(request: &ChatRequest) -> Result<String, GatewayError> {
        let content = request.user_content().ok_or_else(|| GatewayError::InvalidRequest("no user message".into()))?;
        let block = match content.split_once(BLOCK_SEPARATOR) {
            Some((_, block)) => block,
            None => content,
        };
        let (header, records) =
            split_pipe_records(block).map_err(|e| GatewayError::Content(format!("stub cannot read block: {e}")))?;
        let header: Vec<String> = header.split('|').map(str::to_string).collect();
        let rows: Vec<Vec<TableCell>> =
            records.into_iter().map(|r| r.cells.into_iter().map(TableCell::guess).collect()).collect();
        let format = Format::VARIANTS[(request.seed.unwrap_or(0) % Format::VARIANTS.len() as u64) as usize];
        Ok(render_table("customer", &header, &rows, format))
    }
}

impl ChatBackend for StubLlm {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut text = Self::reply(request)?;
        if let Some(f) = &self.mutate {
            text = f(&text);
        }
        Ok(Completion { text, attempts: 1 })
    }

    fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatMode {
    Mixed,
    Single(Format),
}

impl FromStr for FormatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mixed" => Ok(FormatMode::Mixed),
            other => other.parse().map(FormatMode::Single),
        }
    }
}

impl std::fmt::Display for FormatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatMode::Mixed => f.write_str("mixed"),
            FormatMode::Single(format) => write!(f, "{format}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub volume_multiplier: usize,
    pub include_raw: bool,
    /// Dataset names to draw users from; empty means every source given.
    pub source_datasets: Vec<String>,
    pub format_mode: FormatMode,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { volume_multiplier: 1, include_raw: false, source_datasets: Vec::new(), format_mode: FormatMode::Mixed }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), EnrichError> {
        if self.volume_multiplier < 1 {
            return Err(EnrichError::InvalidSpec("volume_multiplier must be at least 1".into()));
        }
        Ok(())
    }

    pub fn documents_per_user(&self) -> usize {
        self.volume_multiplier + usize::from(self.include_raw)
    }
}

/// One dataset plus the dictionaries its codes resolve against.
#[derive(Clone, Copy)]
pub struct CorpusSource<'a> {
    pub dataset: &'a Dataset,
    pub dictionaries: &'a Dictionaries,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub user_id: String,
    pub variant_index: usize,
    pub dataset: String,
    pub format: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub seed: Option<u64>,
    pub prompt_digest: String,
    pub values_total: usize,
    pub values_found: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub rows: Vec<ManifestRow>,
    /// Requests served from the cache / sent to the backend during the build.
    pub cache_hits: usize,
    pub failures: usize,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

fn doc_path(dataset: &str, user_id: &str, variant: usize) -> String {
    format!("docs/{}/{}/{variant}.txt", fs_safe(dataset), fs_safe(user_id))
}

struct Job<'a> {
    source: CorpusSource<'a>,
    sequence: &'a UserSequence,
}

enum Produced {
    Doc { row: ManifestRow, text: String, cache_hit: bool },
    Failed(EnrichError),
}

fn produce<'a>(
    job: &Job<'a>,
    spec: &CorpusSpec,
    backend: Option<(&dyn ChatBackend, &ResponseCache)>,
    config: &EnrichConfig,
) -> Result<Vec<Produced>, EnrichError> {
    let ds = job.source.dataset;
    let (schema, dicts, seq) = (&ds.schema, job.source.dictionaries, job.sequence);
    let m = spec.volume_multiplier;
    let mut out = Vec::with_capacity(spec.documents_per_user());
    let row = |variant: usize, format: &str, seed: Option<u64>, digest: String, fidelity: Fidelity| ManifestRow {
        user_id: seq.user_id.clone(),
        variant_index: variant,
        dataset: ds.name.clone(),
        format: format.to_string(),
        path: doc_path(&ds.name, &seq.user_id, variant),
        seed,
        prompt_digest: digest,
        values_total: fidelity.values_total,
        values_found: fidelity.values_found,
    };
    match spec.format_mode {
        FormatMode::Mixed => {
            let (llm, cache) = backend.ok_or(EnrichError::MissingBackend)?;
            for result in enrich_user(seq, schema, dicts, m, llm, cache, config) {
                out.push(match result {
                    Ok(doc) => Produced::Doc {
                        row: row(
                            doc.variant_index,
                            "llm",
                            Some(doc.provenance.seed),
                            doc.provenance.prompt_digest,
                            doc.fidelity,
                        ),
                        text: doc.text,
                        cache_hit: doc.cache_hit,
                    },
                    Err(e) => Produced::Failed(e),
                });
            }
        }
        FormatMode::Single(format) => {
            let doc = serialize_variant(seq, schema, dicts, format);
            let fidelity = audit_fidelity(&doc.text, seq, schema, dicts);
            for variant in 0..m {
                out.push(Produced::Doc {
                    row: row(variant, format.name(), None, String::new(), fidelity),
                    text: doc.text.clone(),
                    cache_hit: false,
                });
            }
        }
    }
    if spec.include_raw {
        let doc = serialize_pipe(seq, schema, dicts);
        let fidelity = audit_fidelity(&doc.text, seq, schema, dicts);
        out.push(Produced::Doc {
            row: row(m, "pipe", None, String::new(), fidelity),
            text: doc.text,
            cache_hit: false,
        });
    }
    Ok(out)
}

/// Builds the fine-tuning corpus under `out_dir` (documents plus
/// `manifest.csv`). Users of every selected source dataset are included,
/// labeled or not.
pub fn build_corpus(
    sources: &[CorpusSource<'_>],
    spec: &CorpusSpec,
    backend: Option<(&dyn ChatBackend, &ResponseCache)>,
    config: &EnrichConfig,
    out_dir: &Path,
) -> Result<CorpusManifest, EnrichError> {
    spec.validate()?;
    let selected: Vec<CorpusSource<'_>> = sources
        .iter()
        .copied()
        .filter(|s| spec.source_datasets.is_empty() || spec.source_datasets.contains(&s.dataset.name))
        .collect();
    for wanted in &spec.source_datasets {
        if !selected.iter().any(|s| &s.dataset.name == wanted) {
            return Err(EnrichError::InvalidSpec(format!("source dataset {wanted:?} not provided")));
        }
    }
    let jobs: Vec<Job<'_>> = selected
        .iter()
        .flat_map(|&source| source.dataset.sequences.iter().map(move |sequence| Job { source, sequence }))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight.max(1))
        .build()
        .map_err(|e| EnrichError::Io(std::io::Error::other(e)))?;
    let produced: Vec<Vec<Produced>> =
        pool.install(|| jobs.par_iter().map(|job| produce(job, spec, backend, config)).collect::<Result<_, _>>())?;

    let total: usize = produced.iter().map(Vec::len).sum();
    let mut rows = Vec::with_capacity(total);
    let mut failures = Vec::new();
    let mut cache_hits = 0;
    for item in produced.into_iter().flatten() {
        match item {
            Produced::Doc { row, text, cache_hit } => {
                let path = out_dir.join(&row.path);
                fs::create_dir_all(path.parent().expect("document paths have a parent"))?;
                write_if_changed(&path, text.as_bytes())?;
                cache_hits += usize::from(cache_hit);
                rows.push(row);
            }
            Produced::Failed(e) => {
                log::warn!("{e}");
                failures.push(e);
            }
        }
    }
    let tolerated = config.max_failure_fraction;
    if !failures.is_empty() && failures.len() as f64 > tolerated * total as f64 {
        if failures.len() == 1 && tolerated == 0.0 {
            return Err(failures.remove(0));
        }
        return Err(EnrichError::TooManyFailures { failed: failures.len(), total, tolerated });
    }
    rows.sort_by(|a, b| (&a.user_id, &a.dataset, a.variant_index).cmp(&(&b.user_id, &b.dataset, b.variant_index)));
    write_manifest(&out_dir.join(MANIFEST_FILE), &rows)?;
    Ok(CorpusManifest { rows, cache_hits, failures: failures.len() })
}

/// Leaves files with identical content untouched so reruns keep mtimes.
fn write_if_changed(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    fs::write(tmp.path(), bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), EnrichError> {
    let err = |e: csv::Error| EnrichError::Manifest { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| EnrichError::Io(e.into_error()))?;
    write_if_changed(path, &bytes)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, EnrichError> {
    let err = |e: csv::Error| EnrichError::Manifest { path: path.display().to_string(), message: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<Vec<ManifestRow>, _>>().map_err(err)
}

pub fn manifest_digest(path: &Path) -> Result<String, EnrichError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Document texts in manifest order, read relative to `root`.
pub fn load_corpus_texts(root: &Path, rows: &[ManifestRow]) -> Result<Vec<String>, EnrichError> {
    rows.iter().map(|r| fs::read_to_string(root.join(PathBuf::from(&r.path))).map_err(EnrichError::from)).collect()
}
