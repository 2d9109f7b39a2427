//! Pipeline stages. Each stage writes into `<output_dir>/<stage>/`, finishes
//! with a `stage.json` manifest and is skipped on rerun while its
//! fingerprint (config plus input digests) is unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use es2emb_core::embedder::{
    concat_embeddings, embed_documents, load_matrix, save_matrix, EmbeddingMatrix, EmbeddingSource, TextVariant,
};
use es2emb_core::enrichment::{
    build_corpus, load_corpus_texts, manifest_digest, read_manifest, CorpusSource, CorpusSpec, StubLlm, MANIFEST_FILE,
};
use es2emb_core::evaluator::{data_size_ablation, evaluate_cv, make_split_plan, EvalReport, Labels, SplitPlan};
use es2emb_core::gateway::cache::sha256_hex;
use es2emb_core::gateway::{ChatBackend, HttpChatClient, ResponseCache};
use es2emb_core::serializer::{fs_safe, write_serialized_corpus};
use es2emb_core::tinylm::{load_checkpoint, save_checkpoint, tokenize_fit, train, write_loss_csv, TinyLm, TrainConfig};
use es2emb_core::{load_dataset, serialize_pipe, Dataset, Dictionaries, SchemaConfig};
use serde::Serialize;
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::config::PipelineConfig;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

const STAGE_MANIFEST: &str = "stage.json";
const FAILED_MARKER: &str = ".failed";

/// Text used to train the generic model of `ablate components` when the
/// configuration names no corpus.
pub const BUNDLED_PRETRAIN: &str = include_str!("../data/pretrain.txt");

#[derive(Debug, Error)]
#[error("stage {stage} failed: {message}")]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub stages_run: Vec<String>,
    pub stages_skipped: Vec<String>,
    /// Requests that reached an LLM backend (cache misses).
    pub llm_requests: usize,
    pub models_trained: usize,
}

impl RunStats {
    pub fn summary(&self) -> String {
        format!(
            "{} stage(s) run, {} up to date, {} LLM request(s), {} model(s) trained",
            self.stages_run.len(),
            self.stages_skipped.len(),
            self.llm_requests,
            self.models_trained
        )
    }
}

#[derive(Serialize)]
struct StageManifest<'a> {
    stage: &'a str,
    fingerprint: &'a str,
    outputs: &'a [String],
    details: Json,
}

pub fn file_digest(path: &Path) -> Result<String, BoxError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?))
}

fn json_digest(value: &Json) -> String {
    sha256_hex(value.to_string().as_bytes())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), BoxError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub struct Runner {
    pub config: PipelineConfig,
    pub force: bool,
    pub stub_llm: bool,
    pub stats: RunStats,
    loaded: BTreeMap<String, (Dataset, Dictionaries)>,
}

impl Runner {
    pub fn new(config: PipelineConfig, force: bool, stub_llm: bool) -> Self {
        Self { config, force, stub_llm, stats: RunStats::default(), loaded: BTreeMap::new() }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.config.output_dir.join(stage)
    }

    /// Runs `body` unless the stage's manifest already records
    /// `fingerprint` and every listed output exists. A failed run leaves a
    /// `.failed` marker next to whatever it produced.
    fn stage(
        &mut self,
        stage: &str,
        fingerprint: &Json,
        outputs: &[String],
        body: impl FnOnce(&mut Self, &Path) -> Result<Json, BoxError>,
    ) -> Result<(), StageError> {
        let fail = |message: String| StageError { stage: stage.to_string(), message };
        let dir = self.stage_dir(stage);
        let fingerprint = json_digest(fingerprint);
        let manifest = dir.join(STAGE_MANIFEST);
        if !self.force && !dir.join(FAILED_MARKER).exists() && outputs.iter().all(|o| dir.join(o).exists()) {
            let recorded = fs::read_to_string(&manifest)
                .ok()
                .and_then(|t| serde_json::from_str::<Json>(&t).ok())
                .and_then(|j| j.get("fingerprint").and_then(Json::as_str).map(str::to_string));
            if recorded.as_deref() == Some(fingerprint.as_str()) {
                log::info!("[{stage}] up to date");
                self.stats.stages_skipped.push(stage.to_string());
                return Ok(());
            }
        }
        fs::create_dir_all(&dir).map_err(|e| fail(e.to_string()))?;
        let _ = fs::remove_file(&manifest);
        log::info!("[{stage}] running");
        match body(self, &dir) {
            Ok(details) => {
                let m = StageManifest { stage, fingerprint: &fingerprint, outputs, details };
                write_json(&manifest, &m).map_err(|e| fail(e.to_string()))?;
                let _ = fs::remove_file(dir.join(FAILED_MARKER));
                self.stats.stages_run.push(stage.to_string());
                log::info!("[{stage}] done");
                Ok(())
            }
            Err(e) => {
                let _ = fs::write(dir.join(FAILED_MARKER), format!("{e}\n"));
                Err(fail(e.to_string()))
            }
        }
    }

    fn dataset(&mut self, name: &str) -> Result<&(Dataset, Dictionaries), BoxError> {
        if !self.loaded.contains_key(name) {
            let r = self.config.dataset(name).ok_or_else(|| format!("unknown dataset {name:?}"))?.clone();
            let schema = SchemaConfig::load(&r.schema)?;
            let mut ds = load_dataset(&r.events, r.labels.as_deref(), &schema)?;
            ds.name = r.name.clone();
            self.loaded.insert(name.to_string(), (ds, schema.dictionaries));
        }
        Ok(&self.loaded[name])
    }

    fn load_all(&mut self) -> Result<(), BoxError> {
        let names: Vec<String> = self.config.datasets.iter().map(|d| d.name.clone()).collect();
        for n in names {
            self.dataset(&n)?;
        }
        Ok(())
    }

    fn dataset_digests(&self, names: &[String]) -> Result<Json, BoxError> {
        let mut out = serde_json::Map::new();
        for d in self.config.datasets.iter().filter(|d| names.contains(&d.name)) {
            let mut files = vec![file_digest(&d.schema)?, file_digest(&d.events)?];
            if let Some(l) = &d.labels {
                files.push(file_digest(l)?);
            }
            out.insert(d.name.clone(), json!(files));
        }
        Ok(Json::Object(out))
    }

    fn all_names(&self) -> Vec<String> {
        self.config.datasets.iter().map(|d| d.name.clone()).collect()
    }

    fn raw_docs(&mut self, name: &str) -> Result<Vec<(String, String)>, BoxError> {
        let (ds, dicts) = self.dataset(name)?;
        Ok(ds.sequences.iter().map(|s| (s.user_id.clone(), serialize_pipe(s, &ds.schema, dicts).text)).collect())
    }

    // ---- stages ----

    pub fn serialize(&mut self) -> Result<(), StageError> {
        let names = self.all_names();
        let fp = json!({ "datasets": self.dataset_digests(&names).map_err(stage_err("serialize"))? });
        let outputs: Vec<String> = names.iter().map(|n| format!("{}/manifest.csv", fs_safe(n))).collect();
        self.stage("serialize", &fp, &outputs, |r, dir| {
            let mut counts = serde_json::Map::new();
            for name in &names {
                let (ds, dicts) = r.dataset(name)?;
                let docs: Vec<_> = ds.sequences.iter().map(|s| serialize_pipe(s, &ds.schema, dicts)).collect();
                write_serialized_corpus(&dir.join(fs_safe(name)), &docs)?;
                counts.insert(name.clone(), json!(docs.len()));
            }
            Ok(json!({ "documents": counts }))
        })
    }

    fn backend(&self) -> Box<dyn ChatBackend> {
        if self.stub_llm {
            Box::new(StubLlm::new())
        } else {
            Box::new(HttpChatClient::new(self.config.endpoint.clone()))
        }
    }

    fn backend_identity(&self) -> String {
        if self.stub_llm {
            "stub".into()
        } else {
            format!("http:{}", self.config.enrich.model_id)
        }
    }

    /// Builds a training corpus in `dir`, counting backend requests.
    fn corpus_into(&mut self, spec: &CorpusSpec, dir: &Path) -> Result<Json, BoxError> {
        self.load_all()?;
        let sources: Vec<CorpusSource<'_>> =
            self.loaded.values().map(|(dataset, dictionaries)| CorpusSource { dataset, dictionaries }).collect();
        let cache = ResponseCache::open(self.config.cache_dir.join("llm"))?;
        let backend = self.backend();
        let result = build_corpus(&sources, spec, Some((backend.as_ref(), &cache)), &self.config.enrich, dir);
        let sent = backend.requests_sent();
        self.stats.llm_requests += sent;
        let m = result?;
        Ok(json!({
            "documents": m.rows.len(),
            "cache_hits": m.cache_hits,
            "llm_requests": sent,
            "failures": m.failures,
            "manifest_digest": manifest_digest(&dir.join(MANIFEST_FILE))?,
        }))
    }

    fn corpus_fingerprint(&self, spec: &CorpusSpec) -> Result<Json, BoxError> {
        let names = if spec.source_datasets.is_empty() { self.all_names() } else { spec.source_datasets.clone() };
        Ok(json!({
            "volume_multiplier": spec.volume_multiplier,
            "include_raw": spec.include_raw,
            "sources": names,
            "format_mode": spec.format_mode.to_string(),
            "enrich": self.config.enrich,
            "backend": self.backend_identity(),
            "datasets": self.dataset_digests(&names)?,
        }))
    }

    pub fn enrich(&mut self) -> Result<(), StageError> {
        let spec = self.config.corpus.clone();
        let fp = self.corpus_fingerprint(&spec).map_err(stage_err("enrich"))?;
        self.stage("enrich", &fp, &[MANIFEST_FILE.into()], |r, dir| r.corpus_into(&spec, dir))
    }

    /// Trains on the documents of a corpus manifest, optionally starting
    /// from a checkpoint, and writes `model.tlm` + `loss.csv` into `dir`.
    fn train_into(
        &mut self,
        corpus_dir: &Path,
        init: Option<&Path>,
        train_cfg: &TrainConfig,
        dir: &Path,
    ) -> Result<Json, BoxError> {
        let rows = read_manifest(&corpus_dir.join(MANIFEST_FILE))?;
        let texts = load_corpus_texts(corpus_dir, &rows)?;
        self.train_texts(&texts, init, train_cfg, dir)
    }

    fn train_texts(
        &mut self,
        texts: &[String],
        init: Option<&Path>,
        train_cfg: &TrainConfig,
        dir: &Path,
    ) -> Result<Json, BoxError> {
        let mut model = match init {
            Some(p) => load_checkpoint(p)?,
            None => TinyLm::new(self.config.model.clone())?,
        };
        let ctx = model.config().context_len;
        let streams: Vec<_> = texts.iter().map(|t| tokenize_fit(t, ctx)).collect();
        let outcome = train(&mut model, &streams, train_cfg)?;
        self.stats.models_trained += 1;
        save_checkpoint(&model, &dir.join("model.tlm"))?;
        write_loss_csv(&outcome.history, &dir.join("loss.csv"))?;
        let last = outcome.history.last().map(|h| h.per_token_loss);
        Ok(json!({
            "documents": texts.len(),
            "steps": outcome.steps,
            "skipped_documents": outcome.skipped_documents,
            "final_loss_per_token": last,
            "model_digest": model.digest(),
        }))
    }

    pub fn train(&mut self) -> Result<(), StageError> {
        let corpus = self.stage_dir("enrich");
        let fp = (|| -> Result<Json, BoxError> {
            Ok(json!({
                "corpus": manifest_digest(&corpus.join(MANIFEST_FILE))?,
                "model": self.config.model,
                "train": self.config.train,
            }))
        })()
        .map_err(stage_err("train"))?;
        let cfg = self.config.train.clone();
        self.stage("train", &fp, &["model.tlm".into(), "loss.csv".into()], |r, dir| {
            r.train_into(&corpus, None, &cfg, dir)
        })
    }

    /// Embeds every user of `dataset` from the raw pipe serialization.
    fn embed_dataset(&mut self, model: &TinyLm, dataset: &str) -> Result<(EmbeddingMatrix, EmbeddingSource), BoxError> {
        let docs = self.raw_docs(dataset)?;
        Ok(embed_documents(model, &docs, self.config.pooling, TextVariant::RawPipe)?)
    }

    pub fn embed(&mut self) -> Result<(), StageError> {
        let checkpoint = self.stage_dir("train").join("model.tlm");
        let names = self.all_names();
        let fp = (|| -> Result<Json, BoxError> {
            Ok(json!({
                "checkpoint": file_digest(&checkpoint)?,
                "pooling": { "k": self.config.pooling.k, "include_embedding_layer": self.config.pooling.include_embedding_layer },
                "datasets": self.dataset_digests(&names)?,
            }))
        })()
        .map_err(stage_err("embed"))?;
        let outputs: Vec<String> = names.iter().map(|n| format!("{}.emb", fs_safe(n))).collect();
        self.stage("embed", &fp, &outputs, |r, dir| {
            let model = load_checkpoint(&checkpoint)?;
            let mut sources = serde_json::Map::new();
            for name in &names {
                let (matrix, source) = r.embed_dataset(&model, name)?;
                save_matrix(&matrix, &dir.join(format!("{}.emb", fs_safe(name))))?;
                sources.insert(name.clone(), json!({ "users": matrix.len(), "dim": matrix.dim(), "source": source }));
            }
            Ok(Json::Object(sources))
        })
    }

    fn own_embeddings(&self) -> PathBuf {
        self.stage_dir("embed").join(format!("{}.emb", fs_safe(&self.config.eval_dataset)))
    }

    /// The ensemble when one is configured, else this pipeline's embeddings.
    fn eval_embeddings(&self) -> PathBuf {
        if self.config.ensemble.inputs.is_empty() {
            self.own_embeddings()
        } else {
            self.stage_dir("ensemble").join("ensemble.emb")
        }
    }

    pub fn ensemble(&mut self) -> Result<(), StageError> {
        if self.config.ensemble.inputs.is_empty() {
            log::info!("[ensemble] no extra inputs configured, nothing to concatenate");
            return Ok(());
        }
        let mut inputs = vec![self.own_embeddings()];
        inputs.extend(self.config.ensemble.inputs.iter().cloned());
        let fp = (|| -> Result<Json, BoxError> {
            Ok(json!({ "inputs": inputs.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>, _>>()? }))
        })()
        .map_err(stage_err("ensemble"))?;
        self.stage("ensemble", &fp, &["ensemble.emb".into()], |_, dir| {
            let mats = inputs.iter().map(|p| load_matrix(p)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&EmbeddingMatrix> = mats.iter().collect();
            let cat = concat_embeddings(&refs)?;
            save_matrix(&cat, &dir.join("ensemble.emb"))?;
            Ok(json!({ "dims": mats.iter().map(EmbeddingMatrix::dim).collect::<Vec<_>>(), "dim": cat.dim() }))
        })
    }

    fn labels_and_plan(&mut self) -> Result<(Labels, SplitPlan), BoxError> {
        let name = self.config.eval_dataset.clone();
        let (ds, _) = self.dataset(&name)?;
        let labels: Labels = ds.labels_by_user().into_iter().map(|(u, l)| (u.to_string(), l)).collect();
        let pairs: Vec<_> = labels.iter().map(|(u, l)| (u.as_str(), *l)).collect();
        let ev = &self.config.eval;
        let plan = make_split_plan(&pairs, ev.test_fraction, ev.n_folds, self.config.seed)?;
        Ok((labels, plan))
    }

    fn evaluate_matrix(&mut self, matrix: &EmbeddingMatrix) -> Result<EvalReport, BoxError> {
        let (labels, plan) = self.labels_and_plan()?;
        let task = self.dataset(&self.config.eval_dataset.clone())?.0.task;
        Ok(evaluate_cv(matrix, &labels, task, &plan, &self.config.eval.probe)?)
    }

    fn eval_fingerprint(&self, embeddings: &Path, extra: Json) -> Result<Json, BoxError> {
        let name = self.config.eval_dataset.clone();
        Ok(json!({
            "embeddings": file_digest(embeddings)?,
            "labels": self.dataset_digests(&[name])?,
            "eval": self.config.eval,
            "seed": self.config.seed,
            "extra": extra,
        }))
    }

    pub fn eval(&mut self) -> Result<(), StageError> {
        let path = self.eval_embeddings();
        let fp = self.eval_fingerprint(&path, Json::Null).map_err(stage_err("eval"))?;
        self.stage("eval", &fp, &["report.json".into(), "report.txt".into()], |r, dir| {
            let report = r.evaluate_matrix(&load_matrix(&path)?)?;
            fs::write(dir.join("report.json"), report.to_json() + "\n")?;
            fs::write(dir.join("report.txt"), report.to_text())?;
            log::info!("[eval] {} {:.3} ± {:.3}", report.metric, report.mean, report.std);
            Ok(json!({ "mean": report.mean, "std": report.std }))
        })
    }

    pub fn pipeline(&mut self) -> Result<(), StageError> {
        self.serialize()?;
        self.enrich()?;
        self.train()?;
        self.embed()?;
        self.ensemble()?;
        self.eval()
    }

    // ---- ablations ----

    pub fn ablate_datasize(&mut self) -> Result<(), StageError> {
        let path = self.eval_embeddings();
        let sizes = self.config.ablation.sizes.clone();
        let fp = self.eval_fingerprint(&path, json!({ "sizes": sizes })).map_err(stage_err("ablate/datasize"))?;
        self.stage("ablate/datasize", &fp, &["datasize.json".into(), "datasize.csv".into()], |r, dir| {
            let matrix = load_matrix(&path)?;
            let (labels, plan) = r.labels_and_plan()?;
            let n_train = plan.train_user_ids.len();
            let sizes = if sizes.is_empty() { default_sizes(n_train, plan.folds.len()) } else { sizes };
            let task = r.dataset(&r.config.eval_dataset.clone())?.0.task;
            let points =
                data_size_ablation(&matrix, &labels, task, &plan, &sizes, r.config.seed, &r.config.eval.probe)?;
            write_json(&dir.join("datasize.json"), &points)?;
            let mut csv = String::from("size,n_folds,mean,std\n");
            for p in &points {
                csv.push_str(&format!("{},{},{},{}\n", p.size, p.n_folds, p.report.mean, p.report.std));
                log::info!("[ablate/datasize] {:>6} users: {:.3} ± {:.3}", p.size, p.report.mean, p.report.std);
            }
            fs::write(dir.join("datasize.csv"), csv)?;
            Ok(json!({ "sizes": sizes }))
        })
    }

    fn pretrain_texts(&self) -> Result<Vec<String>, BoxError> {
        let text = match &self.config.ablation.pretrain_corpus {
            Some(p) => fs::read_to_string(p)?,
            None => BUNDLED_PRETRAIN.to_string(),
        };
        Ok(text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()).map(str::to_string).collect())
    }

    /// Generic model, then fine-tunes on raw, enriched and cross-dataset
    /// enriched corpora; every row is scored on the same split.
    pub fn ablate_components(&mut self) -> Result<(), StageError> {
        const STAGE: &str = "ablate/components";
        let eval_name = self.config.eval_dataset.clone();
        let fp = (|| -> Result<Json, BoxError> {
            Ok(json!({
                "pretrain_texts": json_digest(&json!(self.pretrain_texts()?)),
                "pretrain": self.config.ablation.pretrain,
                "model": self.config.model,
                "train": self.config.train,
                "pooling": { "k": self.config.pooling.k, "include_embedding_layer": self.config.pooling.include_embedding_layer },
                "corpus": self.corpus_fingerprint(&self.config.corpus.clone())?,
                "eval": self.eval_fingerprint_inputs()?,
            }))
        })()
        .map_err(stage_err(STAGE))?;
        self.stage(STAGE, &fp, &["components.json".into(), "components.txt".into()], |r, dir| {
            let generic_dir = dir.join("pretrained");
            fs::create_dir_all(&generic_dir)?;
            let texts = r.pretrain_texts()?;
            let pre_cfg = r.config.ablation.pretrain.clone();
            r.train_texts(&texts, None, &pre_cfg, &generic_dir)?;
            let generic = generic_dir.join("model.tlm");
            let finetune = r.config.train.clone();

            let mut rows = Vec::new();
            rows.push(r.score_checkpoint("pretrained", &generic, texts.len())?);

            let raw_dir = dir.join("raw");
            fs::create_dir_all(&raw_dir)?;
            let raw: Vec<String> = r.raw_docs(&eval_name)?.into_iter().map(|(_, t)| t).collect();
            r.train_texts(&raw, Some(&generic), &finetune, &raw_dir)?;
            rows.push(r.score_checkpoint("fine-tuned, raw", &raw_dir.join("model.tlm"), raw.len())?);

            let cross_sources = r.all_names();
            for (label, sources) in [
                ("fine-tuned, enriched", vec![eval_name.clone()]),
                ("fine-tuned, enriched, cross-dataset", cross_sources),
            ] {
                let row_dir = dir.join(fs_safe(label));
                let corpus_dir = row_dir.join("corpus");
                let spec = CorpusSpec { source_datasets: sources, ..r.config.corpus.clone() };
                let built = r.corpus_into(&spec, &corpus_dir)?;
                r.train_into(&corpus_dir, Some(&generic), &finetune, &row_dir)?;
                let n = built["documents"].as_u64().unwrap_or(0) as usize;
                rows.push(r.score_checkpoint(label, &row_dir.join("model.tlm"), n)?);
            }
            write_rows(dir, "components", &rows)?;
            Ok(json!({ "rows": rows.len() }))
        })
    }

    /// Single-format corpora, mixed corpora at each configured volume and
    /// mixed + raw at the largest volume; models trained from scratch.
    pub fn ablate_formats(&mut self) -> Result<(), StageError> {
        const STAGE: &str = "ablate/formats";
        let mut specs: Vec<(String, CorpusSpec)> = Vec::new();
        let base = CorpusSpec { volume_multiplier: 1, include_raw: false, ..self.config.corpus.clone() };
        for f in es2emb_core::serializer::Format::VARIANTS.iter().copied().chain([es2emb_core::Format::Pipe]) {
            let spec = CorpusSpec { format_mode: es2emb_core::enrichment::FormatMode::Single(f), ..base.clone() };
            specs.push((format!("{f}, 1x"), spec));
        }
        let mixed = CorpusSpec { format_mode: es2emb_core::enrichment::FormatMode::Mixed, ..base.clone() };
        for &v in &self.config.ablation.volumes {
            specs.push((format!("mixed, {v}x"), CorpusSpec { volume_multiplier: v, ..mixed.clone() }));
        }
        let top = *self.config.ablation.volumes.iter().max().unwrap_or(&1);
        specs.push((
            format!("mixed + raw, {}x", top + 1),
            CorpusSpec { volume_multiplier: top, include_raw: true, ..mixed },
        ));

        let fp = (|| -> Result<Json, BoxError> {
            let corpora = specs.iter().map(|(_, s)| self.corpus_fingerprint(s)).collect::<Result<Vec<_>, _>>()?;
            Ok(json!({
                "corpora": corpora,
                "model": self.config.model,
                "train": self.config.train,
                "pooling": { "k": self.config.pooling.k, "include_embedding_layer": self.config.pooling.include_embedding_layer },
                "eval": self.eval_fingerprint_inputs()?,
            }))
        })()
        .map_err(stage_err(STAGE))?;
        self.stage(STAGE, &fp, &["formats.json".into(), "formats.txt".into()], |r, dir| {
            let cfg = r.config.train.clone();
            let mut rows = Vec::new();
            for (label, spec) in &specs {
                let row_dir = dir.join(fs_safe(label));
                let corpus_dir = row_dir.join("corpus");
                let built = r.corpus_into(spec, &corpus_dir)?;
                r.train_into(&corpus_dir, None, &cfg, &row_dir)?;
                let n = built["documents"].as_u64().unwrap_or(0) as usize;
                rows.push(r.score_checkpoint(label, &row_dir.join("model.tlm"), n)?);
            }
            write_rows(dir, "formats", &rows)?;
            Ok(json!({ "rows": rows.len() }))
        })
    }

    fn eval_fingerprint_inputs(&self) -> Result<Json, BoxError> {
        let names = self.all_names();
        Ok(
            json!({ "datasets": self.dataset_digests(&names)?, "eval": self.config.eval, "seed": self.config.seed, "eval_dataset": self.config.eval_dataset }),
        )
    }

    fn score_checkpoint(&mut self, label: &str, checkpoint: &Path, documents: usize) -> Result<AblationRow, BoxError> {
        let model = load_checkpoint(checkpoint)?;
        let name = self.config.eval_dataset.clone();
        let (matrix, _) = self.embed_dataset(&model, &name)?;
        let report = self.evaluate_matrix(&matrix)?;
        log::info!("[ablate] {label}: {:.3} ± {:.3}", report.mean, report.std);
        Ok(AblationRow { setting: label.to_string(), training_documents: documents, report })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub training_documents: usize,
    pub report: EvalReport,
}

fn write_rows(dir: &Path, name: &str, rows: &[AblationRow]) -> Result<(), BoxError> {
    write_json(&dir.join(format!("{name}.json")), &rows)?;
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
    let mut text = format!(
        "{:<width$}  {:>9}  {}\n",
        "setting",
        "documents",
        rows.first().map_or("", |r| r.report.metric.as_str())
    );
    for r in rows {
        text.push_str(&format!(
            "{:<width$}  {:>9}  {:.3} ± {:.3}\n",
            r.setting, r.training_documents, r.report.mean, r.report.std
        ));
    }
    fs::write(dir.join(format!("{name}.txt")), text)?;
    Ok(())
}

/// 1/8, 1/4, 1/2 and all of the training users, keeping at least two users
/// per fold.
pub fn default_sizes(n_train: usize, n_folds: usize) -> Vec<usize> {
    let floor = (2 * n_folds).min(n_train);
    let mut sizes: Vec<usize> = [8, 4, 2, 1].iter().map(|d| (n_train / d).max(floor)).collect();
    sizes.dedup();
    sizes
}

fn stage_err(stage: &str) -> impl Fn(BoxError) -> StageError + '_ {
    move |e| StageError { stage: stage.to_string(), message: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_ascend_and_end_at_full() {
        assert_eq!(default_sizes(800, 5), vec![100, 200, 400, 800]);
        assert_eq!(default_sizes(40, 5), vec![10, 20, 40]);
        assert_eq!(default_sizes(6, 5), vec![6]);
    }

    #[test]
    fn bundled_text_has_paragraphs() {
        assert!(BUNDLED_PRETRAIN.split("\n\n").filter(|p| !p.trim().is_empty()).count() >= 10);
    }
}
