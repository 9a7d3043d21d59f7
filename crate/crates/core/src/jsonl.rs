//! Line-delimited JSON helpers shared by the file formats.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

/// One non-blank line of a JSONL file with its 1-based line number.
pub struct Line {
    pub number: usize,
    pub text: String,
}

/// Reads all non-blank lines of `path`.
pub fn read_lines(path: &Path) -> io::Result<Vec<Line>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        lines.push(Line {
            number: idx + 1,
            text,
        });
    }
    Ok(lines)
}

/// Writes one JSON document per line.
pub fn write_all<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Field-level access to a JSON object with error messages that name the
/// offending field.
pub struct Fields<'a> {
    map: &'a Map<String, Value>,
}

/// A field that is missing or has the wrong type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl<'a> Fields<'a> {
    pub fn of(value: &'a Value) -> Result<Self, FieldError> {
        value
            .as_object()
            .map(|map| Self { map })
            .ok_or_else(|| FieldError::new("<record>", "expected a JSON object"))
    }

    pub fn string(&self, name: &str) -> Result<String, FieldError> {
        match self.map.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(FieldError::new(name, format!("expected a string, found {other}"))),
            None => Err(FieldError::new(name, "missing")),
        }
    }

    pub fn integer(&self, name: &str) -> Result<i64, FieldError> {
        match self.map.get(name) {
            Some(Value::Number(n)) => n
                .as_i64()
                .ok_or_else(|| FieldError::new(name, format!("expected an integer, found {n}"))),
            Some(other) => Err(FieldError::new(name, format!("expected an integer, found {other}"))),
            None => Err(FieldError::new(name, "missing")),
        }
    }

    pub fn optional_integer(&self, name: &str) -> Result<Option<i64>, FieldError> {
        match self.map.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.integer(name).map(Some),
        }
    }

    /// A list of strings; absent or null is an empty list.
    pub fn string_list(&self, name: &str) -> Result<Vec<String>, FieldError> {
        match self.map.get(name) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(i, item)| match item {
                    Value::String(s) => Ok(s.clone()),
                    other => Err(FieldError::new(
                        name,
                        format!("element {i}: expected a string, found {other}"),
                    )),
                })
                .collect(),
            Some(other) => Err(FieldError::new(name, format!("expected a list, found {other}"))),
        }
    }

    pub fn required_string_list(&self, name: &str) -> Result<Vec<String>, FieldError> {
        if !self.map.contains_key(name) {
            return Err(FieldError::new(name, "missing"));
        }
        self.string_list(name)
    }
}
