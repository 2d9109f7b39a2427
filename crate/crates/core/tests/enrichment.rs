use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use es2emb_core::enrichment::{
    audit_fidelity, build_corpus, build_enrichment_prompt, enrich_user, manifest_digest, read_manifest, CorpusSource,
    CorpusSpec, EnrichConfig, EnrichError, FormatMode, StubLlm, MANIFEST_FILE, SYSTEM_PROMPT, USER_PROMPT,
};
use es2emb_core::gateway::{ChatBackend, ChatRequest, Completion, GatewayError, ResponseCache, Role};
use es2emb_core::serializer::serialize_variant;
use es2emb_core::{
    serialize_pipe, CodeDictionary, Dataset, Decimal, Dictionaries, EventRecord, FieldKind, FieldSchema, Format, Label,
    Schema, Task, UserSequence, Value,
};
use proptest::prelude::*;

fn schema() -> Schema {
    Schema::new(
        vec![
            FieldSchema::new("date", FieldKind::Timestamp),
            FieldSchema::new("amount", FieldKind::Numeric).with_unit("rubles"),
            FieldSchema::new("mcc", FieldKind::CategoricalCoded).with_dictionary("mcc"),
            FieldSchema::new("type", FieldKind::CategoricalCoded).with_dictionary("type"),
        ],
        "date",
    )
    .unwrap()
}

fn dictionaries() -> Dictionaries {
    let mut d = Dictionaries::new();
    d.insert(
        "mcc".into(),
        CodeDictionary::from_pairs([
            ("5411", "Grocery Stores, Supermarkets"),
            ("5412", "Grocery Stores"),
            ("6011", "Financial Institutions"),
            ("5814", "Fast Food"),
        ])
        .unwrap(),
    );
    d.insert("type".into(), CodeDictionary::from_pairs([("1", "Point of Sale"), ("7", "Deposit")]).unwrap());
    d
}

fn event(date: u64, amount: &str, mcc: &str, kind: &str) -> EventRecord {
    EventRecord::new(vec![
        Value::Timestamp(date),
        Value::Number(amount.parse::<Decimal>().unwrap()),
        Value::Code(mcc.into()),
        Value::Code(kind.into()),
    ])
}

fn user(id: &str, n_events: usize) -> UserSequence {
    let mccs = ["5411", "5412", "6011", "5814"];
    let events = (0..n_events)
        .map(|i| event(17000 + i as u64, &format!("{}.{}", 10 + i * 3, i % 10), mccs[i % 4], ["1", "7"][i % 2]))
        .collect();
    UserSequence { user_id: id.into(), events, label: Some(Label::Class(n_events % 2)) }
}

fn dataset(name: &str, prefix: &str, n_users: usize) -> Dataset {
    Dataset {
        name: name.into(),
        schema: schema(),
        task: Task::BinaryClassification,
        sequences: (0..n_users)
            .map(|i| {
                let mut seq = user(&format!("{prefix}{i:02}"), 3 + i % 4);
                for (j, e) in seq.events.iter_mut().enumerate() {
                    e.values[0] = Value::Timestamp(17000 + 100 * i as u64 + j as u64);
                }
                seq
            })
            .collect(),
    }
}

fn cache_dir() -> (tempfile::TempDir, ResponseCache) {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path().join("cache")).unwrap();
    (dir, cache)
}

/// Replies with the user message's transaction block unchanged.
struct Echo;

impl ChatBackend for Echo {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let content = request.user_content().unwrap();
        Ok(Completion { text: content.split_once("\n\n").unwrap().1.to_string(), attempts: 1 })
    }

    fn requests_sent(&self) -> usize {
        0
    }
}

#[test]
fn prompt_carries_fixture_text_and_document() {
    let doc = serialize_pipe(&user("u", 10), &schema(), &dictionaries());
    let p = build_enrichment_prompt(&doc, &EnrichConfig::default(), 3).unwrap();
    let system = &p.request.messages[0];
    let user_msg = p.request.user_content().unwrap();
    assert_eq!(system.role, Role::System);
    assert!(system.content.starts_with("You are a specialized AI assistant designed for text data transformation."));
    assert!(user_msg.contains("Paraphrase category names and transaction types"));
    assert_eq!(system.content, SYSTEM_PROMPT);
    assert_eq!(user_msg.strip_prefix(USER_PROMPT).unwrap().strip_prefix("\n\n").unwrap(), doc.text);
    assert_eq!(p.block, doc.text);
    assert!(!p.truncated);
    assert_eq!(p.request.seed, Some(3));
}

#[test]
fn long_documents_keep_recent_events() {
    let seq = user("u", 40);
    let doc = serialize_pipe(&seq, &schema(), &dictionaries());
    let cfg = EnrichConfig { context_budget_chars: 400, ..EnrichConfig::default() };
    let p = build_enrichment_prompt(&doc, &cfg, 0).unwrap();
    assert!(p.truncated);
    assert!(p.block.chars().count() <= 400);
    assert!(p.block.starts_with(&schema().header_line()));
    assert!(doc.text.ends_with(p.block.lines().last().unwrap()));
    assert!(p.block.lines().count() < doc.text.lines().count());
}

#[test]
fn non_pipe_input_is_rejected() {
    let doc = serialize_variant(&user("u", 2), &schema(), &dictionaries(), Format::Json);
    assert!(matches!(
        build_enrichment_prompt(&doc, &EnrichConfig::default(), 0),
        Err(EnrichError::NotPipe(Format::Json))
    ));
}

#[test]
fn echo_preserves_every_value() {
    let (_d, cache) = cache_dir();
    let seq = user("u", 6);
    let docs = enrich_user(&seq, &schema(), &dictionaries(), 1, &Echo, &cache, &EnrichConfig::default());
    assert_eq!(docs.len(), 1);
    let doc = docs[0].as_ref().unwrap();
    assert_eq!(doc.fidelity.values_total, 24);
    assert_eq!(doc.fidelity.values_found, doc.fidelity.values_total);
}

#[test]
fn seven_variants_have_distinct_seeds() {
    let (_d, cache) = cache_dir();
    let stub = StubLlm::new();
    let docs = enrich_user(&user("u", 5), &schema(), &dictionaries(), 7, &stub, &cache, &EnrichConfig::default());
    let docs: Vec<_> = docs.into_iter().map(Result::unwrap).collect();
    assert_eq!(docs.iter().map(|d| d.provenance.seed).collect::<Vec<_>>(), (0..7).collect::<Vec<u64>>());
    assert_eq!(docs.iter().map(|d| d.variant_index).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
    let digests: BTreeSet<_> = docs.iter().map(|d| d.provenance.prompt_digest.clone()).collect();
    assert_eq!(digests.len(), 7);
    assert!(docs.iter().all(|d| !d.text.is_empty() && d.fidelity.values_found == d.fidelity.values_total));
    assert_eq!(stub.requests_sent(), 7);
}

#[test]
fn dropped_amount_is_detected() {
    let (_d, cache) = cache_dir();
    let seq = user("u", 4);
    let amount = "13.1";
    assert_eq!(seq.events[1].values[1], Value::Number(amount.parse().unwrap()));
    let stub = StubLlm::with_mutation(move |t| t.replacen(amount, "", 1));
    let doc =
        enrich_user(&seq, &schema(), &dictionaries(), 1, &stub, &cache, &EnrichConfig::default()).remove(0).unwrap();
    assert_eq!(doc.fidelity.values_found, doc.fidelity.values_total - 1);
}

#[test]
fn transaction_breakdown_fixture_passes_audit() {
    let text = include_str!("fixtures/transaction_breakdown.txt");
    let seq = UserSequence {
        user_id: "u".into(),
        events: vec![event(17298, "4", "5412", "1"), event(17299, "8", "6011", "7")],
        label: None,
    };
    let f = audit_fidelity(text, &seq, &schema(), &dictionaries());
    assert_eq!((f.values_found, f.values_total), (8, 8));
    for needle in ["17298", "4", "Grocery Stores"] {
        assert!(text.contains(needle));
    }
}

#[test]
fn boilerplate_finds_nothing() {
    let f = audit_fidelity("Here is your transformed output.", &user("u", 3), &schema(), &dictionaries());
    assert_eq!((f.values_found, f.values_total), (0, 12));
}

fn arb_description() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["Shop", ", ", "\"", "|", "<", "&", "\\", "Café", "x"]), 1..6)
        .prop_map(|parts| parts.concat())
}

proptest! {
    #[test]
    fn deterministic_variants_keep_all_values(
        descriptions in prop::collection::vec(arb_description(), 3),
        cells in prop::collection::vec((0u64..100_000, -5000i64..5000, 0usize..3), 1..12),
    ) {
        prop_assume!(descriptions.iter().collect::<BTreeSet<_>>().len() == 3);
        let mut dicts = dictionaries();
        dicts.insert(
            "mcc".into(),
            CodeDictionary::from_pairs(descriptions.iter().enumerate().map(|(i, d)| (i.to_string(), d.clone()))).unwrap(),
        );
        let events = cells
            .iter()
            .map(|&(t, a, c)| event(t, &format!("{}.{:02}", a / 100, (a % 100).abs()), &c.to_string(), "1"))
            .collect();
        let seq = UserSequence { user_id: "p".into(), events, label: None };
        for format in [Format::Pipe, Format::Json, Format::Markdown, Format::Html, Format::Yaml, Format::Plain] {
            let doc = serialize_variant(&seq, &schema(), &dicts, format);
            let f = audit_fidelity(&doc.text, &seq, &schema(), &dicts);
            prop_assert_eq!(f.values_found, f.values_total, "{}", format);
        }
    }
}

fn mixed(multiplier: usize, include_raw: bool) -> CorpusSpec {
    CorpusSpec { volume_multiplier: multiplier, include_raw, ..CorpusSpec::default() }
}

#[test]
fn corpus_sizes_follow_the_multiplier() {
    let ds = dataset("bank", "u", 10);
    let dicts = dictionaries();
    let sources = [CorpusSource { dataset: &ds, dictionaries: &dicts }];
    let stub = StubLlm::new();
    let (dir, cache) = cache_dir();
    for (spec, expected) in [(mixed(1, false), 10), (mixed(7, false), 70), (mixed(7, true), 80)] {
        let out = dir.path().join(format!("c{}", spec.documents_per_user()));
        let m = build_corpus(&sources, &spec, Some((&stub, &cache)), &EnrichConfig::default(), &out).unwrap();
        assert_eq!(m.rows.len(), expected);
        assert_eq!(read_manifest(&out.join(MANIFEST_FILE)).unwrap(), m.rows);
        for row in &m.rows {
            assert!(!std::fs::read_to_string(out.join(&row.path)).unwrap().is_empty());
        }
        let pairs: BTreeSet<_> = m.rows.iter().map(|r| (r.user_id.clone(), r.variant_index)).collect();
        assert_eq!(pairs.len(), expected);
        if spec.include_raw {
            assert_eq!(m.rows.iter().filter(|r| r.format == "pipe").count(), 10);
        }
    }
}

#[test]
fn single_format_needs_no_backend() {
    let ds = dataset("bank", "u", 4);
    let dicts = dictionaries();
    let sources = [CorpusSource { dataset: &ds, dictionaries: &dicts }];
    let dir = tempfile::tempdir().unwrap();
    let spec =
        CorpusSpec { format_mode: FormatMode::Single(Format::Markdown), volume_multiplier: 2, ..CorpusSpec::default() };
    let m = build_corpus(&sources, &spec, None, &EnrichConfig::default(), dir.path()).unwrap();
    assert_eq!(m.rows.len(), 8);
    assert!(m.rows.iter().all(|r| r.format == "markdown" && r.values_found == r.values_total));
    let err = build_corpus(&sources, &mixed(1, false), None, &EnrichConfig::default(), dir.path());
    assert!(matches!(err, Err(EnrichError::MissingBackend)));
    let bad = CorpusSpec { volume_multiplier: 0, ..CorpusSpec::default() };
    assert!(matches!(
        build_corpus(&sources, &bad, None, &EnrichConfig::default(), dir.path()),
        Err(EnrichError::InvalidSpec(_))
    ));
}

#[test]
fn cross_dataset_corpus_covers_both_sources() {
    let (a, b) = (dataset("alpha", "a", 5), dataset("beta", "b", 5));
    let dicts = dictionaries();
    let sources =
        [CorpusSource { dataset: &a, dictionaries: &dicts }, CorpusSource { dataset: &b, dictionaries: &dicts }];
    let stub = StubLlm::new();
    let (dir, cache) = cache_dir();
    let m =
        build_corpus(&sources, &mixed(1, false), Some((&stub, &cache)), &EnrichConfig::default(), dir.path()).unwrap();
    let ids: Vec<_> = m.rows.iter().map(|r| r.user_id.clone()).collect();
    let expected: BTreeSet<_> = a.sequences.iter().chain(&b.sequences).map(|s| s.user_id.clone()).collect();
    assert_eq!(ids.len(), 10);
    assert_eq!(ids.iter().cloned().collect::<BTreeSet<_>>(), expected);

    let only_beta = CorpusSpec { source_datasets: vec!["beta".into()], ..mixed(1, false) };
    let m = build_corpus(&sources, &only_beta, Some((&stub, &cache)), &EnrichConfig::default(), dir.path()).unwrap();
    assert!(m.rows.iter().all(|r| r.dataset == "beta"));
    let missing = CorpusSpec { source_datasets: vec!["gamma".into()], ..mixed(1, false) };
    assert!(build_corpus(&sources, &missing, Some((&stub, &cache)), &EnrichConfig::default(), dir.path()).is_err());
}

#[test]
fn warm_cache_replay_is_byte_identical() {
    let ds = dataset("bank", "u", 6);
    let dicts = dictionaries();
    let sources = [CorpusSource { dataset: &ds, dictionaries: &dicts }];
    let (dir, cache) = cache_dir();
    let out = dir.path().join("corpus");
    let spec = mixed(3, true);
    let cold = StubLlm::new();
    build_corpus(&sources, &spec, Some((&cold, &cache)), &EnrichConfig::default(), &out).unwrap();
    assert_eq!(cold.requests_sent(), 18);
    let first = std::fs::read(out.join(MANIFEST_FILE)).unwrap();
    let digest = manifest_digest(&out.join(MANIFEST_FILE)).unwrap();

    let warm = StubLlm::new();
    let m = build_corpus(&sources, &spec, Some((&warm, &cache)), &EnrichConfig::default(), &out).unwrap();
    assert_eq!(warm.requests_sent(), 0);
    assert_eq!(m.cache_hits, 18);
    assert_eq!(std::fs::read(out.join(MANIFEST_FILE)).unwrap(), first);
    assert_eq!(manifest_digest(&out.join(MANIFEST_FILE)).unwrap(), digest);
}

/// Fails every request whose transactions belong to a chosen user.
struct Flaky {
    poison: &'static str,
    calls: AtomicUsize,
}

impl ChatBackend for Flaky {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if request.seed == Some(1) && request.user_content().unwrap().contains(self.poison) {
            return Err(GatewayError::Permanent { status: 400, body: "rejected".into() });
        }
        StubLlm::new().complete(request)
    }

    fn requests_sent(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[test]
fn failure_fraction_is_enforced() {
    let ds = dataset("bank", "u", 4);
    let dicts = dictionaries();
    let sources = [CorpusSource { dataset: &ds, dictionaries: &dicts }];
    let flaky = Flaky { poison: "17305", calls: AtomicUsize::new(0) };
    let (dir, cache) = cache_dir();
    let strict = build_corpus(&sources, &mixed(2, false), Some((&flaky, &cache)), &EnrichConfig::default(), dir.path());
    assert!(matches!(strict, Err(EnrichError::Variant { ref user_id, variant: 1, .. }) if user_id == "u03"));
    let lenient = EnrichConfig { max_failure_fraction: 0.2, ..EnrichConfig::default() };
    let m = build_corpus(&sources, &mixed(2, false), Some((&flaky, &cache)), &lenient, dir.path()).unwrap();
    assert_eq!((m.rows.len(), m.failures), (7, 1));
}
