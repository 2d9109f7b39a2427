//! Field schemas, code dictionaries and the schema configuration file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

/// Current version of the schema configuration format.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("field name must not be empty (field #{0})")]
    EmptyFieldName(usize),
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("field name {0:?} must not contain '|' or line breaks")]
    ReservedCharacter(String),
    #[error("categorical field {0:?} has no dictionary reference")]
    MissingDictionaryRef(String),
    #[error("timestamp field {0:?} is not declared")]
    UnknownTimestampField(String),
    #[error("field {0:?} is designated as timestamp but declared as {1}")]
    TimestampKind(String, FieldKind),
    #[error("dictionary {dictionary:?}: {message}")]
    Dictionary { dictionary: String, message: String },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    CategoricalCoded,
    Numeric,
    Timestamp,
    FreeText,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::CategoricalCoded => "categorical",
            FieldKind::Numeric => "numeric",
            FieldKind::Timestamp => "timestamp",
            FieldKind::FreeText => "text",
        })
    }
}

impl FromStr for FieldKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "categorical" | "categorical-coded" => Ok(FieldKind::CategoricalCoded),
            "numeric" => Ok(FieldKind::Numeric),
            "timestamp" => Ok(FieldKind::Timestamp),
            "text" | "free-text" => Ok(FieldKind::FreeText),
            other => Err(format!("unknown field kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
    pub unit: Option<String>,
    pub dictionary_ref: Option<String>,
}

impl FieldSchema {
    pub fn new(name: impl Into<String>, kind: FieldKind) -> Self {
        Self { name: name.into(), kind, unit: None, dictionary_ref: None }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }

    pub fn with_dictionary(mut self, dictionary: impl Into<String>) -> Self {
        self.dictionary_ref = Some(dictionary.into());
        self
    }
}

/// An ordered, validated list of fields with one designated timestamp field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<FieldSchema>,
    timestamp_index: usize,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>, timestamp_field: &str) -> Result<Self, SchemaError> {
        let mut seen = BTreeSet::new();
        for (i, field) in fields.iter().enumerate() {
            if field.name.is_empty() {
                return Err(SchemaError::EmptyFieldName(i));
            }
            if field.name.contains(['|', '\n', '\r']) {
                return Err(SchemaError::ReservedCharacter(field.name.clone()));
            }
            if !seen.insert(field.name.as_str()) {
                return Err(SchemaError::DuplicateField(field.name.clone()));
            }
            if field.kind == FieldKind::CategoricalCoded && field.dictionary_ref.is_none() {
                return Err(SchemaError::MissingDictionaryRef(field.name.clone()));
            }
        }
        let timestamp_index = fields
            .iter()
            .position(|f| f.name == timestamp_field)
            .ok_or_else(|| SchemaError::UnknownTimestampField(timestamp_field.to_string()))?;
        let kind = fields[timestamp_index].kind;
        if kind != FieldKind::Timestamp {
            return Err(SchemaError::TimestampKind(timestamp_field.to_string(), kind));
        }
        Ok(Self { fields, timestamp_index })
    }

    /// Builds a schema without validation, for fixtures exercising the validator.
    pub fn new_unchecked(fields: Vec<FieldSchema>, timestamp_index: usize) -> Self {
        Self { fields, timestamp_index }
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn arity(&self) -> usize {
        self.fields.len()
    }

    pub fn timestamp_index(&self) -> usize {
        self.timestamp_index
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Field names joined by `|`, the first line of a pipe document.
    pub fn header_line(&self) -> String {
        self.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join("|")
    }
}

/// Code to description mapping for one categorical field.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeDictionary {
    entries: BTreeMap<String, String>,
    reverse: BTreeMap<String, Vec<String>>,
}

impl CodeDictionary {
    pub fn from_pairs<I, C, D>(pairs: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = (C, D)>,
        C: Into<String>,
        D: Into<String>,
    {
        let mut dict = CodeDictionary::default();
        for (code, description) in pairs {
            let (code, description) = (code.into(), description.into());
            if description.is_empty() {
                return Err(format!("code {code:?} has an empty description"));
            }
            if dict.entries.contains_key(&code) {
                return Err(format!("duplicate code {code:?}"));
            }
            dict.reverse.entry(description.clone()).or_default().push(code.clone());
            dict.entries.insert(code, description);
        }
        Ok(dict)
    }

    /// Reads a two-column `code,description` CSV with a header row.
    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let name = path.display().to_string();
        let err = |message: String| SchemaError::Dictionary { dictionary: name.clone(), message };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| err(e.to_string()))?;
        let mut pairs = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 2 {
                return Err(err(format!("line {line}: expected 2 columns, found {}", record.len())));
            }
            pairs.push((record[0].to_string(), record[1].to_string()));
        }
        Self::from_pairs(pairs).map_err(err)
    }

    pub fn lookup(&self, code: &str) -> Option<&str> {
        self.entries.get(code).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(c, d)| (c.as_str(), d.as_str()))
    }

    /// Maps a rendered description back to its code, accepting the
    /// `UNKNOWN(<code>)` fallback for codes missing from the dictionary.
    pub fn reverse_lookup(&self, description: &str) -> Result<String, ReverseLookupError> {
        match self.reverse.get(description).map(Vec::as_slice) {
            Some([code]) => Ok(code.clone()),
            Some(codes) => Err(ReverseLookupError::Ambiguous(description.to_string(), codes.to_vec())),
            None => match parse_unknown(description) {
                Some(code) if !self.entries.contains_key(code) => Ok(code.to_string()),
                _ => Err(ReverseLookupError::Absent(description.to_string())),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReverseLookupError {
    #[error("description {0:?} is not in the dictionary")]
    Absent(String),
    #[error("description {0:?} maps to several codes {1:?}")]
    Ambiguous(String, Vec<String>),
}

fn parse_unknown(description: &str) -> Option<&str> {
    description.strip_prefix("UNKNOWN(")?.strip_suffix(')')
}

/// Description for `code`, or `UNKNOWN(<code>)` when the dictionary lacks it.
pub fn map_code(code: &str, dictionary: &CodeDictionary) -> String {
    match dictionary.lookup(code) {
        Some(description) => description.to_string(),
        None => format!("UNKNOWN({code})"),
    }
}

/// Dictionaries by name, as referenced from [`FieldSchema::dictionary_ref`].
pub type Dictionaries = BTreeMap<String, CodeDictionary>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    BinaryClassification,
    Multiclass(usize),
    Regression,
}

impl Task {
    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Task::BinaryClassification => Some(2),
            Task::Multiclass(c) => Some(*c),
            Task::Regression => None,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Task::Regression)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::BinaryClassification => f.write_str("binary"),
            Task::Multiclass(c) => write!(f, "multiclass({c})"),
            Task::Regression => f.write_str("regression"),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchemaConfig {
    schema_version: u32,
    #[serde(default = "default_user_column")]
    user_id_column: String,
    #[serde(default = "default_label_column")]
    label_column: String,
    timestamp_field: String,
    task: String,
    n_classes: Option<usize>,
    #[serde(rename = "fields")]
    fields: Vec<RawField>,
    #[serde(default)]
    dictionaries: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    name: String,
    kind: String,
    unit: Option<String>,
    dictionary: Option<String>,
}

fn default_user_column() -> String {
    "user_id".to_string()
}

fn default_label_column() -> String {
    "label".to_string()
}

/// Everything needed to ingest one dataset: schema, dictionaries, task and
/// the names of the id/label columns.
#[derive(Debug, Clone)]
pub struct SchemaConfig {
    pub schema: Schema,
    pub dictionaries: Dictionaries,
    pub task: Task,
    pub user_id_column: String,
    pub label_column: String,
}

impl SchemaConfig {
    /// Loads a TOML schema file; dictionary paths resolve relative to it.
    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            SchemaError::Config { message, .. } => SchemaError::Config { path: path.to_path_buf(), message },
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, SchemaError> {
        let config_err = |message: String| SchemaError::Config { path: PathBuf::new(), message };
        let raw: RawSchemaConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(SchemaError::Version(raw.schema_version));
        }
        let task = match (raw.task.as_str(), raw.n_classes) {
            ("binary", _) => Task::BinaryClassification,
            ("multiclass", Some(c)) if c >= 2 => Task::Multiclass(c),
            ("multiclass", _) => return Err(config_err("multiclass task needs n_classes >= 2".into())),
            ("regression", _) => Task::Regression,
            (other, _) => return Err(config_err(format!("unknown task {other:?}"))),
        };
        let mut fields = Vec::with_capacity(raw.fields.len());
        for f in raw.fields {
            let kind = f.kind.parse::<FieldKind>().map_err(config_err)?;
            let mut field = FieldSchema::new(f.name, kind);
            field.unit = f.unit;
            field.dictionary_ref = f.dictionary;
            fields.push(field);
        }
        let schema = Schema::new(fields, &raw.timestamp_field)?;
        let mut dictionaries = Dictionaries::new();
        for field in schema.fields() {
            let Some(name) = &field.dictionary_ref else { continue };
            if dictionaries.contains_key(name) {
                continue;
            }
            let rel = raw.dictionaries.get(name).ok_or_else(|| {
                config_err(format!("field {:?} references undeclared dictionary {name:?}", field.name))
            })?;
            dictionaries.insert(name.clone(), CodeDictionary::load(&base_dir.join(rel))?);
        }
        Ok(Self { schema, dictionaries, task, user_id_column: raw.user_id_column, label_column: raw.label_column })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcc() -> CodeDictionary {
        CodeDictionary::from_pairs([("5411", "Grocery Stores, Supermarkets"), ("5812", "Restaurants")]).unwrap()
    }

    #[test]
    fn maps_known_code() {
        assert_eq!(map_code("5411", &mcc()), "Grocery Stores, Supermarkets");
    }

    #[test]
    fn unknown_code_falls_back() {
        assert_eq!(map_code("0000", &mcc()), "UNKNOWN(0000)");
        assert_eq!(mcc().reverse_lookup("UNKNOWN(0000)").unwrap(), "0000");
    }

    #[test]
    fn map_code_is_pure() {
        let d = mcc();
        assert_eq!(map_code("5812", &d).as_bytes(), map_code("5812", &d).as_bytes());
    }

    #[test]
    fn empty_description_rejected() {
        let err = CodeDictionary::from_pairs([("5411", "")]).unwrap_err();
        assert!(err.contains("empty description"));
    }

    #[test]
    fn duplicate_code_rejected() {
        assert!(CodeDictionary::from_pairs([("1", "a"), ("1", "b")]).is_err());
    }

    #[test]
    fn ambiguous_reverse_lookup() {
        let d = CodeDictionary::from_pairs([("1", "same"), ("2", "same")]).unwrap();
        assert!(matches!(d.reverse_lookup("same"), Err(ReverseLookupError::Ambiguous(..))));
    }

    #[test]
    fn schema_rules() {
        let ts = FieldSchema::new("t", FieldKind::Timestamp);
        assert!(matches!(
            Schema::new(vec![ts.clone(), FieldSchema::new("mcc", FieldKind::CategoricalCoded)], "t"),
            Err(SchemaError::MissingDictionaryRef(_))
        ));
        assert!(matches!(Schema::new(vec![ts.clone(), ts.clone()], "t"), Err(SchemaError::DuplicateField(_))));
        assert!(matches!(
            Schema::new(vec![FieldSchema::new("t", FieldKind::Numeric)], "t"),
            Err(SchemaError::TimestampKind(..))
        ));
        assert!(matches!(
            Schema::new(vec![ts.clone(), FieldSchema::new("a|b", FieldKind::Numeric)], "t"),
            Err(SchemaError::ReservedCharacter(_))
        ));
        let s = Schema::new(vec![ts, FieldSchema::new("amount", FieldKind::Numeric)], "t").unwrap();
        assert_eq!(s.header_line(), "t|amount");
    }

    #[test]
    fn parses_config() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mcc.csv"), "code,description\n5411,\"Grocery Stores, Supermarkets\"\n").unwrap();
        let text = r#"
            schema_version = 1
            timestamp_field = "date"
            task = "multiclass"
            n_classes = 4

            [[fields]]
            name = "date"
            kind = "timestamp"
            unit = "days since epoch"

            [[fields]]
            name = "mcc"
            kind = "categorical"
            dictionary = "mcc"

            [dictionaries]
            mcc = "mcc.csv"
        "#;
        let cfg = SchemaConfig::parse(text, dir.path()).unwrap();
        assert_eq!(cfg.task, Task::Multiclass(4));
        assert_eq!(cfg.dictionaries["mcc"].lookup("5411"), Some("Grocery Stores, Supermarkets"));
        assert_eq!(cfg.user_id_column, "user_id");
    }
}
