//! Text renderings of user histories.
//!
//! The pipe format is the canonical one: a header line with the field names
//! joined by `|`, then one line per event with cell values joined by `", "`.
//! Categorical codes are replaced by their dictionary descriptions. A cell is
//! wrapped in double quotes (CSV-style, inner quotes doubled) when it is
//! empty or contains `", "`, a quote, or a line break; every other cell is
//! written verbatim, which keeps the format unambiguous and lossless.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{EventRecord, UserSequence, Value};
use crate::schema::{map_code, Dictionaries, FieldKind, Schema};

pub const CELL_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Format {
    Pipe,
    Json,
    Markdown,
    Html,
    Yaml,
    Plain,
}

impl Format {
    /// The deterministic alternatives to the pipe format.
    pub const VARIANTS: [Format; 5] = [Format::Json, Format::Markdown, Format::Html, Format::Yaml, Format::Plain];

    pub fn name(&self) -> &'static str {
        match self {
            Format::Pipe => "pipe",
            Format::Json => "json",
            Format::Markdown => "markdown",
            Format::Html => "html",
            Format::Yaml => "yaml",
            Format::Plain => "plain",
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pipe" => Ok(Format::Pipe),
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            "html" => Ok(Format::Html),
            "yaml" => Ok(Format::Yaml),
            "plain" | "text" => Ok(Format::Plain),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedDoc {
    pub user_id: String,
    pub format: Format,
    pub text: String,
    pub char_count: usize,
}

impl SerializedDoc {
    fn new(user_id: &str, format: Format, text: String) -> Self {
        let char_count = text.chars().count();
        Self { user_id: user_id.to_string(), format, text, char_count }
    }
}

/// Human-readable rendering of one value: descriptions for codes, normalized
/// digits for numbers, the raw string for free text.
pub fn render_value(value: &Value, field_dictionary: Option<&str>, dictionaries: &Dictionaries) -> String {
    match value {
        Value::Code(code) => match field_dictionary.and_then(|d| dictionaries.get(d)) {
            Some(dict) => map_code(code, dict),
            None => format!("UNKNOWN({code})"),
        },
        Value::Number(d) => d.to_string(),
        Value::Timestamp(t) => t.to_string(),
        Value::Text(s) => s.clone(),
    }
}

/// Rendered cells of one event, in schema order.
pub fn render_event(event: &EventRecord, schema: &Schema, dictionaries: &Dictionaries) -> Vec<String> {
    schema
        .fields()
        .iter()
        .zip(&event.values)
        .map(|(field, value)| render_value(value, field.dictionary_ref.as_deref(), dictionaries))
        .collect()
}

fn needs_quotes(cell: &str) -> bool {
    cell.is_empty() || cell.contains(CELL_SEPARATOR) || cell.contains(['"', '\n', '\r'])
}

fn push_cell(out: &mut String, cell: &str) {
    if needs_quotes(cell) {
        out.push('"');
        out.push_str(&cell.replace('"', "\"\""));
        out.push('"');
    } else {
        out.push_str(cell);
    }
}

fn pipe_line(cells: &[String]) -> String {
    let mut line = String::new();
    for (i, cell) in cells.iter().enumerate() {
        if i > 0 {
            line.push_str(CELL_SEPARATOR);
        }
        push_cell(&mut line, cell);
    }
    line
}

pub fn serialize_pipe(sequence: &UserSequence, schema: &Schema, dictionaries: &Dictionaries) -> SerializedDoc {
    let mut text = schema.header_line();
    for event in &sequence.events {
        text.push('\n');
        text.push_str(&pipe_line(&render_event(event, schema, dictionaries)));
    }
    SerializedDoc::new(&sequence.user_id, Format::Pipe, text)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipeError {
    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("line {line}: expected {expected} cells, found {found}")]
    Arity { line: usize, expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: field {field:?}: {message}")]
    Cell { line: usize, field: String, message: String },
    #[error("line {line}: description {description:?} not found in dictionary {dictionary:?}")]
    UnknownDescription { line: usize, description: String, dictionary: String },
}

/// One parsed record of a pipe document: its starting line (1-based, the
/// header is line 1), byte span in the source text, and unquoted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipeRecord {
    pub line: usize,
    pub start: usize,
    pub end: usize,
    pub cells: Vec<String>,
}

/// Splits a pipe document into its header and records without consulting a
/// schema.
pub fn split_pipe_records(text: &str) -> Result<(&str, Vec<PipeRecord>), PipeError> {
    let (header, body_start) = match text.find('\n') {
        Some(i) => (&text[..i], Some(i + 1)),
        None => (text, None),
    };
    let mut records = Vec::new();
    let Some(mut pos) = body_start else {
        return Ok((header, records));
    };
    let bytes = text.as_bytes();
    let mut line = 2;
    // a single trailing newline is tolerated
    while pos < text.len() {
        let start = pos;
        let record_line = line;
        let mut cells = Vec::new();
        loop {
            if bytes.get(pos) == Some(&b'"') {
                let mut cell = String::new();
                pos += 1;
                loop {
                    let Some(rel) = text[pos..].find('"') else {
                        return Err(PipeError::Malformed {
                            line: record_line,
                            message: "unterminated quoted cell".into(),
                        });
                    };
                    let chunk = &text[pos..pos + rel];
                    line += chunk.matches('\n').count();
                    cell.push_str(chunk);
                    pos += rel + 1;
                    if bytes.get(pos) == Some(&b'"') {
                        cell.push('"');
                        pos += 1;
                    } else {
                        break;
                    }
                }
                cells.push(cell);
                if text[pos..].starts_with(CELL_SEPARATOR) {
                    pos += CELL_SEPARATOR.len();
                    continue;
                }
                match bytes.get(pos) {
                    None => break,
                    Some(b'\n') => {
                        pos += 1;
                        line += 1;
                        break;
                    }
                    Some(_) => {
                        return Err(PipeError::Malformed {
                            line: record_line,
                            message: "quoted cell followed by stray characters".into(),
                        })
                    }
                }
            } else {
                let rest = &text[pos..];
                let sep = rest.find(CELL_SEPARATOR);
                let nl = rest.find('\n');
                match (sep, nl) {
                    (Some(s), n) if n.is_none_or(|n| s < n) => {
                        cells.push(rest[..s].to_string());
                        pos += s + CELL_SEPARATOR.len();
                    }
                    (_, Some(n)) => {
                        cells.push(rest[..n].to_string());
                        pos += n + 1;
                        line += 1;
                        break;
                    }
                    (_, None) => {
                        cells.push(rest.to_string());
                        pos = text.len();
                        break;
                    }
                }
            }
        }
        let end = if text[..pos].ends_with('\n') { pos - 1 } else { pos };
        records.push(PipeRecord { line: record_line, start, end, cells });
    }
    Ok((header, records))
}

/// Inverse of [`serialize_pipe`]; the user id is not part of the document.
pub fn parse_pipe(
    text: &str,
    user_id: &str,
    schema: &Schema,
    dictionaries: &Dictionaries,
) -> Result<UserSequence, PipeError> {
    let (header, records) = split_pipe_records(text)?;
    let expected = schema.header_line();
    if header != expected {
        return Err(PipeError::Header { expected, found: header.to_string() });
    }
    let mut events = Vec::with_capacity(records.len());
    for record in records {
        if record.cells.len() != schema.arity() {
            return Err(PipeError::Arity { line: record.line, expected: schema.arity(), found: record.cells.len() });
        }
        let mut values = Vec::with_capacity(schema.arity());
        for (field, cell) in schema.fields().iter().zip(record.cells) {
            let value = match field.kind {
                FieldKind::CategoricalCoded => {
                    let dict_name = field.dictionary_ref.clone().unwrap_or_default();
                    let code = match dictionaries.get(&dict_name) {
                        Some(dict) => dict.reverse_lookup(&cell).ok(),
                        None => cell.strip_prefix("UNKNOWN(").and_then(|c| c.strip_suffix(')')).map(str::to_string),
                    };
                    Value::Code(code.ok_or(PipeError::UnknownDescription {
                        line: record.line,
                        description: cell,
                        dictionary: dict_name,
                    })?)
                }
                kind => Value::parse(kind, &cell).map_err(|message| PipeError::Cell {
                    line: record.line,
                    field: field.name.clone(),
                    message,
                })?,
            };
            values.push(value);
        }
        events.push(EventRecord::new(values));
    }
    Ok(UserSequence { user_id: user_id.to_string(), events, label: None })
}

/// Keeps the header and the most recent records of a pipe document so that
/// `fits` accepts the result. Returns the text and whether anything was cut.
pub fn truncate_pipe_recent(text: &str, fits: impl Fn(&str) -> bool) -> (String, bool) {
    if fits(text) {
        return (text.to_string(), false);
    }
    let Ok((header, records)) = split_pipe_records(text) else {
        return (text.to_string(), false);
    };
    let assemble = |first: usize| {
        let mut out = header.to_string();
        if let Some(r) = records.get(first) {
            out.push('\n');
            out.push_str(&text[r.start..records.last().map_or(r.end, |l| l.end)]);
        }
        out
    };
    // smallest drop count that fits; the result length is monotone in it
    let (mut lo, mut hi) = (0, records.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fits(&assemble(mid)) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    (assemble(lo), true)
}

/// A rendered table cell; numeric cells are emitted unquoted where the
/// format distinguishes numbers from strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableCell {
    pub text: String,
    pub numeric: bool,
}

impl TableCell {
    pub fn guess(text: String) -> Self {
        let numeric = is_plain_number(&text);
        Self { text, numeric }
    }
}

fn is_plain_number(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = body.split_once('.').unwrap_or((body, "1"));
    !int.is_empty()
        && !frac.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.bytes().all(|b| b.is_ascii_digit())
        && (int == "0" || !int.starts_with('0'))
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn markdown_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('|', "\\|").replace('\n', "<br>")
}

/// Renders a header plus rows in one of the variant formats.
pub fn render_table(user_id: &str, header: &[String], rows: &[Vec<TableCell>], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Pipe => {
            out.push_str(&header.join("|"));
            for row in rows {
                out.push('\n');
                out.push_str(&pipe_line(&row.iter().map(|c| c.text.clone()).collect::<Vec<_>>()));
            }
        }
        Format::Json => {
            let _ = write!(out, "{{\n  \"user_id\": {},\n  \"events\": [", json_string(user_id));
            for (i, row) in rows.iter().enumerate() {
                out.push_str(if i == 0 { "\n    {" } else { ",\n    {" });
                for (j, (name, cell)) in header.iter().zip(row).enumerate() {
                    let value = if cell.numeric { cell.text.clone() } else { json_string(&cell.text) };
                    let sep = if j == 0 { "" } else { ", " };
                    let _ = write!(out, "{sep}{}: {value}", json_string(name));
                }
                out.push('}');
            }
            out.push_str(if rows.is_empty() { "]\n}" } else { "\n  ]\n}" });
        }
        Format::Markdown => {
            let _ = writeln!(out, "## Transactions of user {}\n", markdown_escape(user_id));
            let names: Vec<_> = header.iter().map(|h| markdown_escape(h)).collect();
            let _ = writeln!(out, "| {} |", names.join(" | "));
            let _ = write!(out, "|{}", " --- |".repeat(header.len()));
            for row in rows {
                let cells: Vec<_> = row.iter().map(|c| markdown_escape(&c.text)).collect();
                let _ = write!(out, "\n| {} |", cells.join(" | "));
            }
        }
        Format::Html => {
            let _ = write!(
                out,
                "<html>\n<body>\n<h2>Transactions of user {}</h2>\n<table>\n<thead><tr>",
                html_escape(user_id)
            );
            for name in header {
                let _ = write!(out, "<th>{}</th>", html_escape(name));
            }
            out.push_str("</tr></thead>\n<tbody>\n");
            for row in rows {
                out.push_str("<tr>");
                for cell in row {
                    let _ = write!(out, "<td>{}</td>", html_escape(&cell.text));
                }
                out.push_str("</tr>\n");
            }
            out.push_str("</tbody>\n</table>\n</body>\n</html>");
        }
        Format::Yaml => {
            let _ = write!(out, "user_id: {}\nevents:", json_string(user_id));
            if rows.is_empty() {
                out.push_str(" []");
            }
            for row in rows {
                for (j, (name, cell)) in header.iter().zip(row).enumerate() {
                    let lead = if j == 0 { "\n  - " } else { "\n    " };
                    let value = if cell.numeric { cell.text.clone() } else { json_string(&cell.text) };
                    let _ = write!(out, "{lead}{}: {value}", json_string(name));
                }
            }
        }
        Format::Plain => {
            let _ = write!(out, "User {user_id} has {} recorded transactions.", rows.len());
            for (i, row) in rows.iter().enumerate() {
                let _ = write!(out, "\nTransaction {}:", i + 1);
                for (j, (name, cell)) in header.iter().zip(row).enumerate() {
                    let sep = if j == 0 { " " } else { "; " };
                    let _ = write!(out, "{sep}{name} = {}", cell.text);
                }
                out.push('.');
            }
        }
    }
    out
}

/// Deterministic local rendering in one of the non-pipe formats.
pub fn serialize_variant(
    sequence: &UserSequence,
    schema: &Schema,
    dictionaries: &Dictionaries,
    format: Format,
) -> SerializedDoc {
    if format == Format::Pipe {
        return serialize_pipe(sequence, schema, dictionaries);
    }
    let header: Vec<String> = schema
        .fields()
        .iter()
        .map(|f| match &f.unit {
            Some(unit) => format!("{} ({unit})", f.name),
            None => f.name.clone(),
        })
        .collect();
    let rows: Vec<Vec<TableCell>> = sequence
        .events
        .iter()
        .map(|event| {
            schema
                .fields()
                .iter()
                .zip(&event.values)
                .map(|(field, value)| TableCell {
                    text: render_value(value, field.dictionary_ref.as_deref(), dictionaries),
                    numeric: matches!(value, Value::Number(_) | Value::Timestamp(_)),
                })
                .collect()
        })
        .collect();
    SerializedDoc::new(&sequence.user_id, format, render_table(&sequence.user_id, &header, &rows, format))
}

/// File-system-safe rendering of an identifier: bytes outside
/// `[A-Za-z0-9._-]` are percent-encoded.
pub fn fs_safe(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && !out.is_empty()) {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    if out.is_empty() {
        out.push_str("%00");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedManifestRow {
    pub user_id: String,
    pub format: Format,
    pub path: PathBuf,
    pub char_count: usize,
}

/// Writes `<out_dir>/<format>/<user_id>.txt` per document plus
/// `<out_dir>/manifest.csv`. Rows are sorted by format, then user id.
pub fn write_serialized_corpus(out_dir: &Path, docs: &[SerializedDoc]) -> io::Result<Vec<SerializedManifestRow>> {
    let mut rows = Vec::with_capacity(docs.len());
    for doc in docs {
        let rel = PathBuf::from(doc.format.name()).join(format!("{}.txt", fs_safe(&doc.user_id)));
        let path = out_dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &doc.text)?;
        rows.push(SerializedManifestRow {
            user_id: doc.user_id.clone(),
            format: doc.format,
            path: rel,
            char_count: doc.char_count,
        });
    }
    rows.sort_by(|a, b| (a.format, &a.user_id).cmp(&(b.format, &b.user_id)));
    let mut writer = csv::Writer::from_path(out_dir.join("manifest.csv")).map_err(io::Error::other)?;
    writer.write_record(["user_id", "format", "path", "char_count"]).map_err(io::Error::other)?;
    for row in &rows {
        writer
            .write_record([
                row.user_id.as_str(),
                row.format.name(),
                &row.path.to_string_lossy(),
                &row.char_count.to_string(),
            ])
            .map_err(io::Error::other)?;
    }
    writer.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{CodeDictionary, FieldSchema};

    fn setup() -> (Schema, Dictionaries) {
        let schema = Schema::new(
            vec![
                FieldSchema::new("date", FieldKind::Timestamp).with_unit("days"),
                FieldSchema::new("amount", FieldKind::Numeric),
                FieldSchema::new("mcc", FieldKind::CategoricalCoded).with_dictionary("mcc"),
                FieldSchema::new("note", FieldKind::FreeText),
            ],
            "date",
        )
        .unwrap();
        let mut dicts = Dictionaries::new();
        dicts.insert(
            "mcc".into(),
            CodeDictionary::from_pairs([("5411", "Grocery Stores, Supermarkets"), ("5541", "Service Stations")])
                .unwrap(),
        );
        (schema, dicts)
    }

    fn ev(t: u64, amount: &str, mcc: &str, note: &str) -> EventRecord {
        EventRecord::new(vec![
            Value::Timestamp(t),
            Value::Number(amount.parse().unwrap()),
            Value::Code(mcc.into()),
            Value::Text(note.into()),
        ])
    }

    fn seq(events: Vec<EventRecord>) -> UserSequence {
        UserSequence { user_id: "u1".into(), events, label: None }
    }

    #[test]
    fn comma_description_is_quoted() {
        let (schema, dicts) = setup();
        let doc = serialize_pipe(&seq(vec![ev(17298, "4.0", "5411", "x")]), &schema, &dicts);
        assert_eq!(doc.text, "date|amount|mcc|note\n17298, 4, \"Grocery Stores, Supermarkets\", x");
        assert_eq!(doc.char_count, doc.text.chars().count());
    }

    #[test]
    fn empty_sequence_is_header_only() {
        let (schema, dicts) = setup();
        let doc = serialize_pipe(&seq(vec![]), &schema, &dicts);
        assert_eq!(doc.text, "date|amount|mcc|note");
        assert_eq!(parse_pipe(&doc.text, "u1", &schema, &dicts).unwrap().events, vec![]);
    }

    #[test]
    fn parses_hand_built_document() {
        let (schema, dicts) = setup();
        let text = "date|amount|mcc|note\n1, 2.5, Service Stations, a,b\n3, -7, \"Grocery Stores, Supermarkets\", \"say \"\"hi\"\"\"";
        let parsed = parse_pipe(text, "u1", &schema, &dicts).unwrap();
        assert_eq!(parsed.events, vec![ev(1, "2.5", "5541", "a,b"), ev(3, "-7", "5411", "say \"hi\"")]);
    }

    #[test]
    fn arity_error_names_line() {
        let (schema, dicts) = setup();
        let text = "date|amount|mcc|note\n1, 2, Service Stations, a\n1, 2, Service Stations";
        assert_eq!(
            parse_pipe(text, "u", &schema, &dicts).unwrap_err(),
            PipeError::Arity { line: 3, expected: 4, found: 3 }
        );
    }

    #[test]
    fn header_mismatch() {
        let (schema, dicts) = setup();
        assert!(matches!(parse_pipe("a|b", "u", &schema, &dicts), Err(PipeError::Header { .. })));
    }

    #[test]
    fn unknown_description_named() {
        let (schema, dicts) = setup();
        let err = parse_pipe("date|amount|mcc|note\n1, 2, Bakeries, a", "u", &schema, &dicts).unwrap_err();
        assert!(matches!(err, PipeError::UnknownDescription { ref description, .. } if description == "Bakeries"));
    }

    #[test]
    fn awkward_cells_round_trip() {
        let (schema, dicts) = setup();
        let notes = ["", " lead", "trail,", ",", "a\nb", "\"q\"", ", ", "x,,y", "UNKNOWN(9)"];
        let events: Vec<_> = notes.iter().enumerate().map(|(i, n)| ev(i as u64, "1", "9999", n)).collect();
        let s = seq(events);
        let doc = serialize_pipe(&s, &schema, &dicts);
        assert_eq!(parse_pipe(&doc.text, "u1", &schema, &dicts).unwrap(), s);
    }

    #[test]
    fn line_count_is_one_plus_events() {
        let (schema, dicts) = setup();
        let s = seq(vec![ev(1, "1", "5411", "a"), ev(2, "2", "5541", "b")]);
        assert_eq!(serialize_pipe(&s, &schema, &dicts).text.lines().count(), 3);
    }

    #[test]
    fn truncation_keeps_header_and_recent_events() {
        let (schema, dicts) = setup();
        let s = seq((0..20).map(|i| ev(i, "10", "5541", "n")).collect());
        let doc = serialize_pipe(&s, &schema, &dicts);
        let (cut, truncated) = truncate_pipe_recent(&doc.text, |t| t.len() <= 120);
        assert!(truncated);
        assert!(cut.len() <= 120);
        let parsed = parse_pipe(&cut, "u1", &schema, &dicts).unwrap();
        assert!(!parsed.events.is_empty());
        assert_eq!(parsed.events.last(), s.events.last());
        let (same, truncated) = truncate_pipe_recent(&doc.text, |_| true);
        assert!(!truncated);
        assert_eq!(same, doc.text);
    }

    #[test]
    fn empty_json_has_empty_array() {
        let (schema, dicts) = setup();
        let doc = serialize_variant(&seq(vec![]), &schema, &dicts, Format::Json);
        let v: serde_json::Value = serde_json::from_str(&doc.text).unwrap();
        assert_eq!(v["events"], serde_json::json!([]));
    }

    #[test]
    fn variants_are_well_formed_and_deterministic() {
        let (schema, dicts) = setup();
        let s = seq(vec![ev(17298, "4", "5411", "say \"hi\""), ev(17299, "8.25", "0000", "<b>")]);
        for format in Format::VARIANTS {
            let a = serialize_variant(&s, &schema, &dicts, format);
            let b = serialize_variant(&s, &schema, &dicts, format);
            assert_eq!(a.text.as_bytes(), b.text.as_bytes());
            assert_eq!(a.format, format);
        }
        let json = serialize_variant(&s, &schema, &dicts, Format::Json).text;
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["events"][1]["amount"], serde_json::json!(8.25));
        assert_eq!(v["events"][0]["mcc"], "Grocery Stores, Supermarkets");
        assert_eq!(v["events"][1]["mcc"], "UNKNOWN(0000)");
        assert_eq!(v["events"][0]["note"], "say \"hi\"");
        let html = serialize_variant(&s, &schema, &dicts, Format::Html).text;
        assert!(html.contains("<td>&lt;b&gt;</td>"));
        assert_eq!(html.matches("<tr>").count(), 3); // header + 2 events
    }

    #[test]
    fn fs_safe_encodes() {
        assert_eq!(fs_safe("user_1.a"), "user_1.a");
        assert_eq!(fs_safe("../x"), "%2E.%2Fx");
        assert_eq!(fs_safe(""), "%00");
    }
}
