//! Rendering of command results as JSON documents and CSV tables.

use serde_json::{json, Value};

use crate::config::{Format, RunConfig};

/// One CSV field.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(x) => format!("{x:?}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<u32> for Cell {
    fn from(i: u32) -> Self {
        Cell::Int(i64::from(i))
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// A rectangular table with named columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Two-column `key,value` table of every leaf of a JSON document.
    pub fn flatten(value: &Value) -> Self {
        let mut table = Table::new(["key", "value"]);
        flatten_into(value, String::new(), &mut table);
        table
    }
}

fn flatten_into(value: &Value, prefix: String, table: &mut Table) {
    let join = |key: &str| if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
    match value {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten_into(v, join(k), table)),
        Value::Array(items) => items.iter().enumerate().for_each(|(i, v)| flatten_into(v, join(&i.to_string()), table)),
        Value::Null => table.push(vec![Cell::Text(prefix), Cell::Text(String::new())]),
        Value::Bool(b) => table.push(vec![Cell::Text(prefix), Cell::Text(b.to_string())]),
        Value::Number(n) => table.push(vec![Cell::Text(prefix), Cell::Text(n.to_string())]),
        Value::String(s) => table.push(vec![Cell::Text(prefix), Cell::Text(s.clone())]),
    }
}

/// Result of one command before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub command: String,
    pub result: Value,
    /// Main tabular output; the flattened result is used when absent.
    pub table: Option<Table>,
}

/// A named file body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub name: String,
    pub body: Vec<u8>,
}

fn json_bytes(value: &Value) -> Vec<u8> {
    let mut body = serde_json::to_vec_pretty(value).expect("JSON values serialize");
    body.push(b'\n');
    body
}

fn csv_bytes(table: &Table, hash: &str) -> anyhow::Result<Vec<u8>> {
    let mut body = format!("# config_sha256={hash}\n").into_bytes();
    let mut writer = csv::Writer::from_writer(&mut body);
    writer.write_record(&table.columns)?;
    for row in &table.rows {
        writer.write_record(row.iter().map(Cell::render))?;
    }
    writer.flush()?;
    drop(writer);
    Ok(body)
}

/// Render an artifact; the first file is the primary output.
pub fn render(artifact: &Artifact, cfg: &RunConfig, format: Format) -> anyhow::Result<Vec<Rendered>> {
    let hash = cfg.hash();
    let config = serde_json::to_value(cfg)?;
    let cmd = &artifact.command;
    Ok(match format {
        Format::Json => {
            let doc = json!({ "command": cmd, "config_hash": hash, "config": config, "result": artifact.result });
            vec![Rendered { name: format!("{cmd}.json"), body: json_bytes(&doc) }]
        }
        Format::Csv => {
            let flat;
            let table = match &artifact.table {
                Some(t) => t,
                None => {
                    flat = Table::flatten(&artifact.result);
                    &flat
                }
            };
            let doc = json!({ "command": cmd, "config_hash": hash, "config": config });
            vec![
                Rendered { name: format!("{cmd}.csv"), body: csv_bytes(table, &hash)? },
                Rendered { name: format!("{cmd}.config.json"), body: json_bytes(&doc) },
            ]
        }
    })
}
