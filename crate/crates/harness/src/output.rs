//! Result tables and their CSV / JSON serialization.
//!
//! Emitted tables always start with a `config_hash` column. Floats are
//! rounded to 6 significant digits and written in Rust's shortest
//! round-trip form with a decimal point or exponent, so integers, floats,
//! booleans and text are distinguishable when read back.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Value as Json};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

/// Rounds to 6 significant digits.
pub fn round6(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

impl Value {
    /// The value as it reads back after emission.
    pub fn rounded(&self) -> Value {
        match self {
            Value::Float(v) => Value::Float(round6(*v)),
            other => other.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(v) => Some(*v),
            _ => None,
        }
    }

    fn parse_cell(s: &str) -> Value {
        if let Ok(i) = i64::from_str(s) {
            return Value::Int(i);
        }
        if let Ok(b) = bool::from_str(s) {
            return Value::Bool(b);
        }
        if s.contains(['.', 'e', 'E']) || matches!(s, "NaN" | "inf" | "-inf") {
            if let Ok(v) = f64::from_str(s) {
                return Value::Float(v);
            }
        }
        Value::Text(s.to_string())
    }

    fn to_json(&self) -> Json {
        match self {
            Value::Int(i) => json!(i),
            Value::Float(v) if v.is_finite() => json!(round6(*v)),
            Value::Float(v) => json!(format!("{v:?}")),
            Value::Bool(b) => json!(b),
            Value::Text(t) => json!(t),
        }
    }

    fn from_json(v: &Json) -> Option<Value> {
        Some(match v {
            Json::Bool(b) => Value::Bool(*b),
            Json::Number(n) => match n.as_i64() {
                Some(i) if !n.is_f64() => Value::Int(i),
                _ => Value::Float(n.as_f64()?),
            },
            Json::String(s) => match s.as_str() {
                "NaN" | "inf" | "-inf" => Value::Float(s.parse().ok()?),
                _ => Value::Text(s.clone()),
            },
            _ => return None,
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(v) => write!(f, "{:?}", round6(*v)),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Text(t) => f.write_str(t),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Rows sharing a fixed column order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl ResultTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(HarnessError::Config(format!(
                "row has {} fields, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell by row index and column name.
    pub fn get(&self, row: usize, name: &str) -> Option<&Value> {
        self.column(name).and_then(|c| self.rows.get(row).map(|r| &r[c]))
    }

    /// Copy with every float rounded as it would be after emission.
    pub fn rounded(&self) -> Self {
        Self {
            columns: self.columns.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(Value::rounded).collect())
                .collect(),
        }
    }

    /// Copy with a leading `config_hash` column holding `hash`.
    pub fn with_hash(&self, hash: &str) -> Self {
        let mut columns = vec!["config_hash".to_string()];
        columns.extend(self.columns.iter().cloned());
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![Value::Text(hash.to_string())];
                row.extend(r.iter().cloned());
                row
            })
            .collect();
        Self { columns, rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => HarnessError::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        HarnessError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Serializes `table` to a string, without adding columns.
pub fn render(table: &ResultTable, format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
            let to_err = |e: csv::Error| HarnessError::Format {
                path: "<memory>".into(),
                msg: e.to_string(),
            };
            w.write_record(&table.columns).map_err(to_err)?;
            for row in &table.rows {
                w.write_record(row.iter().map(Value::to_string)).map_err(to_err)?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Format {
                path: "<memory>".into(),
                msg: e.to_string(),
            })?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Json => {
            let rows: Vec<Json> = table
                .rows
                .iter()
                .map(|r| Json::Array(r.iter().map(Value::to_json).collect()))
                .collect();
            let doc = json!({ "columns": table.columns, "rows": rows });
            Ok(serde_json::to_string_pretty(&doc).expect("json value serializes") + "\n")
        }
    }
}

/// Writes `table` with a leading `config_hash` column taken from `cfg`.
/// Callers include a `seed` column in every table.
pub fn emit_results(table: &ResultTable, cfg: &ExperimentConfig, format: Format, path: &Path) -> Result<()> {
    if table.column("seed").is_none() {
        return Err(HarnessError::Config("result tables must carry a seed column".into()));
    }
    write_text(path, &render(&table.with_hash(&cfg.hash()), format)?)
}

/// Writes the canonical config listing next to emitted tables.
pub fn emit_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    write_text(path, &cfg.to_kv())
}

/// Reads a table written by [`emit_results`] or [`render`].
pub fn parse_results(path: &Path, format: Format) -> Result<ResultTable> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |msg: String| HarnessError::Format {
        path: path.display().to_string(),
        msg,
    };
    match format {
        Format::Csv => {
            let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
            let columns = r
                .headers()
                .map_err(|e| csv_err(path, e))?
                .iter()
                .map(String::from)
                .collect();
            let mut table = ResultTable {
                columns,
                rows: Vec::new(),
            };
            for rec in r.records() {
                let rec = rec.map_err(|e| csv_err(path, e))?;
                table.rows.push(rec.iter().map(Value::parse_cell).collect());
            }
            Ok(table)
        }
        Format::Json => {
            let doc: Json = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            let columns = doc["columns"]
                .as_array()
                .ok_or_else(|| bad("missing columns".into()))?
                .iter()
                .map(|c| {
                    c.as_str()
                        .map(String::from)
                        .ok_or_else(|| bad("non-string column".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = doc["rows"]
                .as_array()
                .ok_or_else(|| bad("missing rows".into()))?
                .iter()
                .map(|row| {
                    row.as_array()
                        .ok_or_else(|| bad("row is not an array".into()))?
                        .iter()
                        .map(|v| Value::from_json(v).ok_or_else(|| bad(format!("unsupported cell {v}"))))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResultTable { columns, rows })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(round6(1.0 / 7.0), 0.142857);
        assert_eq!(round6(-1234567.0), -1234570.0);
        assert_eq!(round6(1.0e-9 / 3.0), 3.33333e-10);
        assert_eq!(Value::Float(2.0).to_string(), "2.0");
        assert_eq!(Value::Float(1e-7).to_string(), "1e-7");
    }

    #[test]
    fn cells_parse_back_to_their_kind() {
        for v in [
            Value::Int(-3),
            Value::Float(2.0),
            Value::Float(1.5e-7),
            Value::Bool(true),
            Value::Text("OOM".into()),
            Value::Float(f64::INFINITY),
        ] {
            assert_eq!(Value::parse_cell(&v.to_string()), v);
        }
    }
}
