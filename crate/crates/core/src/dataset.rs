//! Event records, user sequences, CSV ingestion and dataset validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::schema::{FieldKind, Schema, SchemaConfig, Task};

/// A decimal number kept in its normalized textual form.
///
/// Plain decimals are normalized without going through floating point
/// (`"004.50"` becomes `"4.5"`, `"7.0"` becomes `"7"`); other finite float
/// syntaxes are parsed and rendered with the shortest round-tripping digits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal(String);

impl Decimal {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.parse().expect("normalized decimal always parses")
    }

    pub fn from_f64(value: f64) -> Option<Self> {
        value.is_finite().then(|| normalize_plain(&format!("{value}")).expect("f64 display is plain"))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for Decimal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(d) = normalize_plain(s) {
            return Ok(d);
        }
        match s.parse::<f64>() {
            Ok(v) => Decimal::from_f64(v).ok_or_else(|| format!("non-finite number {s:?}")),
            Err(_) => Err(format!("not a number: {s:?}")),
        }
    }
}

fn normalize_plain(s: &str) -> Option<Decimal> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if int_part.is_empty() && frac_part.is_empty() || !all_digits(int_part) || !all_digits(frac_part) {
        return None;
    }
    let int_part = int_part.trim_start_matches('0');
    let frac_part = frac_part.trim_end_matches('0');
    let mut out = String::with_capacity(s.len());
    let is_zero = int_part.is_empty() && frac_part.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(if int_part.is_empty() { "0" } else { int_part });
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    Some(Decimal(out))
}

/// One typed cell of an event.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Code(String),
    Number(Decimal),
    Timestamp(u64),
    Text(String),
}

impl Value {
    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Code(_) => FieldKind::CategoricalCoded,
            Value::Number(_) => FieldKind::Numeric,
            Value::Timestamp(_) => FieldKind::Timestamp,
            Value::Text(_) => FieldKind::FreeText,
        }
    }

    /// Parses a raw cell according to the declared field kind.
    pub fn parse(kind: FieldKind, raw: &str) -> Result<Self, String> {
        match kind {
            FieldKind::CategoricalCoded => Ok(Value::Code(raw.to_string())),
            FieldKind::Numeric => raw.parse().map(Value::Number),
            FieldKind::Timestamp => raw
                .trim()
                .parse::<u64>()
                .map(Value::Timestamp)
                .map_err(|_| format!("timestamp must be a non-negative integer, got {raw:?}")),
            FieldKind::FreeText => Ok(Value::Text(raw.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub values: Vec<Value>,
}

impl EventRecord {
    pub fn new(values: Vec<Value>) -> Self {
        Self { values }
    }

    pub fn timestamp(&self, schema: &Schema) -> Option<u64> {
        match self.values.get(schema.timestamp_index()) {
            Some(Value::Timestamp(t)) => Some(*t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Real(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub events: Vec<EventRecord>,
    pub label: Option<Label>,
}

impl UserSequence {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub schema: Schema,
    pub task: Task,
    /// Sorted by `user_id`.
    pub sequences: Vec<UserSequence>,
}

impl Dataset {
    pub fn labeled(&self) -> impl Iterator<Item = &UserSequence> {
        self.sequences.iter().filter(|s| s.is_labeled())
    }

    pub fn get(&self, user_id: &str) -> Option<&UserSequence> {
        self.sequences.binary_search_by(|s| s.user_id.as_str().cmp(user_id)).ok().map(|i| &self.sequences[i])
    }

    pub fn labels_by_user(&self) -> BTreeMap<&str, Label> {
        self.sequences.iter().filter_map(|s| s.label.map(|l| (s.user_id.as_str(), l))).collect()
    }

    pub fn event_count(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: column {column:?}: {message}")]
    Cell { path: PathBuf, line: u64, column: String, message: String },
    #[error("{path}:{line}: duplicate label for user {user_id:?}")]
    DuplicateLabel { path: PathBuf, line: u64, user_id: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Reads events (and optional labels) into a [`Dataset`].
///
/// Users are sorted by id and their events are stably sorted by timestamp,
/// so events sharing a timestamp keep their file order. Users present only in
/// the label file get an empty event list; users without a label are the
/// unlabeled part of the dataset.
pub fn load_dataset(
    events_csv: &Path,
    labels_csv: Option<&Path>,
    config: &SchemaConfig,
) -> Result<Dataset, DatasetError> {
    let schema = &config.schema;
    fn csv_err(path: &Path) -> impl Fn(csv::Error) -> DatasetError + '_ {
        move |source| DatasetError::Csv { path: path.to_path_buf(), source }
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(events_csv).map_err(csv_err(events_csv))?;
    let headers = reader.headers().map_err(csv_err(events_csv))?.clone();
    let column = |name: &str, path: &Path| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn { path: path.to_path_buf(), column: name.to_string() })
    };
    let user_col = column(&config.user_id_column, events_csv)?;
    let field_cols = schema.fields().iter().map(|f| column(&f.name, events_csv)).collect::<Result<Vec<_>, _>>()?;

    let mut grouped: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(events_csv))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut values = Vec::with_capacity(field_cols.len());
        for (field, &col) in schema.fields().iter().zip(&field_cols) {
            let raw = record.get(col).unwrap_or("");
            let value = Value::parse(field.kind, raw).map_err(|message| DatasetError::Cell {
                path: events_csv.to_path_buf(),
                line,
                column: field.name.clone(),
                message,
            })?;
            values.push(value);
        }
        grouped.entry(record.get(user_col).unwrap_or("").to_string()).or_default().push(EventRecord::new(values));
    }

    let mut labels: BTreeMap<String, Label> = BTreeMap::new();
    if let Some(labels_csv) = labels_csv {
        let mut reader =
            csv::ReaderBuilder::new().has_headers(true).from_path(labels_csv).map_err(csv_err(labels_csv))?;
        let headers = reader.headers().map_err(csv_err(labels_csv))?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::MissingColumn { path: labels_csv.to_path_buf(), column: name.to_string() })
        };
        let user_col = find(&config.user_id_column)?;
        let label_col = find(&config.label_column)?;
        for record in reader.records() {
            let record = record.map_err(csv_err(labels_csv))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let user_id = record.get(user_col).unwrap_or("").to_string();
            let raw = record.get(label_col).unwrap_or("");
            let label = parse_label(config.task, raw).map_err(|message| DatasetError::Cell {
                path: labels_csv.to_path_buf(),
                line,
                column: config.label_column.clone(),
                message,
            })?;
            if labels.insert(user_id.clone(), label).is_some() {
                return Err(DatasetError::DuplicateLabel { path: labels_csv.to_path_buf(), line, user_id });
            }
        }
    }
    for user_id in labels.keys() {
        grouped.entry(user_id.clone()).or_default();
    }

    let ts = schema.timestamp_index();
    let sequences = grouped
        .into_iter()
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| match &e.values[ts] {
                Value::Timestamp(t) => *t,
                _ => 0,
            });
            let label = labels.get(&user_id).copied();
            UserSequence { user_id, events, label }
        })
        .collect();

    let name = events_csv
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset { name, schema: schema.clone(), task: config.task, sequences })
}

fn parse_label(task: Task, raw: &str) -> Result<Label, String> {
    let raw = raw.trim();
    match task {
        Task::Regression => match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Label::Real(v)),
            _ => Err(format!("label must be a finite number, got {raw:?}")),
        },
        _ => {
            let c = raw.parse::<usize>().map_err(|_| format!("label must be a class index, got {raw:?}"))?;
            let n = task.n_classes().unwrap_or(0);
            if c >= n {
                return Err(format!("class index {c} outside [0, {n})"));
            }
            Ok(Label::Class(c))
        }
    }
}

/// The invariant a [`Violation`] breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    EmptyFieldName { field: usize },
    DuplicateFieldName { name: String },
    MissingDictionaryRef { field: String },
    DuplicateUserId,
    Arity { event: usize, expected: usize, actual: usize },
    ValueKind { event: usize, field: String, expected: FieldKind, actual: FieldKind },
    Unsorted { event: usize },
    LabelKind { label: String },
    LabelRange { class: usize, n_classes: usize },
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::EmptyFieldName { field } => write!(f, "field-name-nonempty: field #{field}"),
            Rule::DuplicateFieldName { name } => write!(f, "field-name-unique: {name:?}"),
            Rule::MissingDictionaryRef { field } => write!(f, "categorical-needs-dictionary: {field:?}"),
            Rule::DuplicateUserId => f.write_str("user-id-unique"),
            Rule::Arity { event, expected, actual } => {
                write!(f, "event-arity: event {event} has {actual} values, schema has {expected}")
            }
            Rule::ValueKind { event, field, expected, actual } => {
                write!(f, "value-kind: event {event} field {field:?} is {actual}, expected {expected}")
            }
            Rule::Unsorted { event } => write!(f, "events-sorted: event {event} precedes its predecessor"),
            Rule::LabelKind { label } => write!(f, "label-kind: {label} does not fit the task"),
            Rule::LabelRange { class, n_classes } => {
                write!(f, "label-range: class {class} outside [0, {n_classes})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Empty for schema-level violations.
    pub user_id: String,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.user_id.is_empty() {
            write!(f, "schema: {}", self.rule)
        } else {
            write!(f, "user {:?}: {}", self.user_id, self.rule)
        }
    }
}

/// Checks every type invariant; an empty result means the dataset is valid.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let schema_violation = |rule| Violation { user_id: String::new(), rule };
    let mut names = BTreeSet::new();
    for (i, field) in dataset.schema.fields().iter().enumerate() {
        if field.name.is_empty() {
            out.push(schema_violation(Rule::EmptyFieldName { field: i }));
        } else if !names.insert(field.name.as_str()) {
            out.push(schema_violation(Rule::DuplicateFieldName { name: field.name.clone() }));
        }
        if field.kind == FieldKind::CategoricalCoded && field.dictionary_ref.is_none() {
            out.push(schema_violation(Rule::MissingDictionaryRef { field: field.name.clone() }));
        }
    }

    let fields = dataset.schema.fields();
    let mut users = BTreeSet::new();
    for seq in &dataset.sequences {
        let mut push = |rule| out.push(Violation { user_id: seq.user_id.clone(), rule });
        if !users.insert(seq.user_id.as_str()) {
            push(Rule::DuplicateUserId);
        }
        let mut previous: Option<u64> = None;
        for (e, event) in seq.events.iter().enumerate() {
            if event.values.len() != fields.len() {
                push(Rule::Arity { event: e, expected: fields.len(), actual: event.values.len() });
                continue;
            }
            for (field, value) in fields.iter().zip(&event.values) {
                if value.kind() != field.kind {
                    push(Rule::ValueKind {
                        event: e,
                        field: field.name.clone(),
                        expected: field.kind,
                        actual: value.kind(),
                    });
                }
            }
            if let Some(t) = event.timestamp(&dataset.schema) {
                if previous.is_some_and(|p| t < p) {
                    push(Rule::Unsorted { event: e });
                }
                previous = Some(t);
            }
        }
        match (seq.label, dataset.task) {
            (None, _) => {}
            (Some(Label::Class(c)), task) if task.is_classification() => {
                let n = task.n_classes().unwrap_or(0);
                if c >= n {
                    push(Rule::LabelRange { class: c, n_classes: n });
                }
            }
            (Some(Label::Real(_)), Task::Regression) => {}
            (Some(label), _) => push(Rule::LabelKind { label: label.to_string() }),
        }
    }
    out
}
