//! Loss traces and metric reports.
//!
//! The trace is a CSV file `iteration,l_triplet,l_cross,l_self,lr`. A report
//! is a flat JSON object of named scalars plus the same fields as a one-row
//! CSV file. Floats use the shortest representation that reads back exactly,
//! so identical runs give byte-identical files.

use std::io::Write;
use std::path::Path;

use crossmodal_core::trainer::TraceRow;

use crate::error::{Error, IoContext, Result};
use crate::formats::write_atomic;

pub const TRACE_HEADER: &str = "iteration,l_triplet,l_cross,l_self,lr";

pub fn format_trace_row(r: &TraceRow) -> String {
    format!("{},{},{},{},{}", r.iteration, r.l_triplet, r.l_cross, r.l_self, r.lr)
}

pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s += &format_trace_row(r);
        s.push('\n');
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Format(format!("trace must start with `{TRACE_HEADER}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Format(format!("bad trace row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            let [it, t, c, s, lr] = f[..] else { return Err(bad()) };
            let n = |v: &str| v.parse::<f64>().map_err(|_| bad());
            Ok(TraceRow { iteration: it.parse().map_err(|_| bad())?, l_triplet: n(t)?, l_cross: n(c)?, l_self: n(s)?, lr: n(lr)? })
        })
        .collect()
}

/// Appends trace rows as they arrive.
pub struct TraceWriter {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl TraceWriter {
    /// Creates `path` with a header, or appends to it when `append` is set
    /// and the file exists.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.is_file();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .at(path)?;
        let mut w = Self { file: std::io::BufWriter::new(file), path: path.to_path_buf() };
        if !(append && exists) {
            writeln!(w.file, "{TRACE_HEADER}").at(path)?;
        }
        Ok(w)
    }

    pub fn push(&mut self, row: &TraceRow) -> Result<()> {
        writeln!(self.file, "{}", format_trace_row(row)).at(&self.path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().at(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Int(u64),
    Text(String),
}

impl Value {
    fn csv(&self) -> String {
        match self {
            Value::Num(v) => v.to_string(),
            Value::Int(v) => v.to_string(),
            Value::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Value::Num(v) => serde_json::Value::from(*v),
            Value::Int(v) => serde_json::Value::from(*v),
            Value::Text(s) => serde_json::Value::from(s.as_str()),
        }
    }
}

/// Named scalar results of one evaluation protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub protocol: String,
    pub fields: Vec<(String, Value)>,
}

impl Report {
    pub fn new(protocol: &str) -> Self {
        Self { protocol: protocol.into(), fields: vec![("protocol".into(), Value::Text(protocol.into()))] }
    }

    pub fn num(mut self, name: &str, v: f64) -> Self {
        self.fields.push((name.into(), Value::Num(v)));
        self
    }

    pub fn int(mut self, name: &str, v: u64) -> Self {
        self.fields.push((name.into(), Value::Int(v)));
        self
    }

    pub fn text(mut self, name: &str, v: &str) -> Self {
        self.fields.push((name.into(), Value::Text(v.into())));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_num(&self, name: &str) -> Option<f64> {
        match self.get(name)? {
            Value::Num(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            Value::Text(_) => None,
        }
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self.fields.iter().map(|(k, v)| (k.clone(), v.json())).collect();
        let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("maps of scalars serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&str> = self.fields.iter().map(|(n, _)| n.as_str()).collect();
        let values: Vec<String> = self.fields.iter().map(|(_, v)| v.csv()).collect();
        format!("{}\n{}\n", names.join(","), values.join(","))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        write_atomic(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }
}
