//! Episode traces: one JSON object per line. The first line is a header, an
//! optional client-metadata line may follow, then one record per tick and a
//! closing line with the termination reason.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::operators::OperatorKind;
use crate::scenario::Task;

pub const TRACE_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("trace has no records")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: u32,
    pub seed: u64,
    pub operator: OperatorKind,
    pub dt: f64,
    pub n_mission: usize,
    pub n_safety: usize,
    pub policies: Vec<String>,
    pub convergence_threshold: f64,
    pub position_tolerance: f64,
    /// Radians.
    pub rotation_tolerance: f64,
    pub dwell: f64,
    pub d_safe: f64,
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub pose: [f64; 7],
    pub twist: [f64; 6],
    pub u_h: Vec<f64>,
    pub u_r: Vec<f64>,
    pub alpha: Vec<f64>,
    pub p: Vec<f64>,
    pub cond: Vec<f64>,
    pub prior: Vec<f64>,
    /// Potential values, mission policies then safety policies.
    pub phi: Vec<f64>,
    /// Active task, `None` after the schedule completed.
    pub task: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ScheduleComplete,
    MaxDuration,
    InputsExhausted,
    Diverged,
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEnd {
    pub termination: Termination,
    pub completed_tasks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub client: Option<Value>,
    pub records: Vec<TraceRecord>,
    pub end: Option<TraceEnd>,
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    header: &'a TraceHeader,
}

#[derive(Serialize)]
struct ClientLine<'a> {
    client: &'a Value,
}

#[derive(Serialize)]
struct EndLine<'a> {
    end: &'a TraceEnd,
}

impl EpisodeTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, client: None, records: Vec::new(), end: None }
    }

    pub fn duration(&self) -> f64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn completed_tasks(&self) -> usize {
        self.end.as_ref().map_or(0, |e| e.completed_tasks)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        line(&mut w, &HeaderLine { header: &self.header })?;
        if let Some(c) = &self.client {
            line(&mut w, &ClientLine { client: c })?;
        }
        for r in &self.records {
            line(&mut w, r)?;
        }
        if let Some(e) = &self.end {
            line(&mut w, &EndLine { end: e })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut header = None;
        let mut client = None;
        let mut records = Vec::new();
        let mut end = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            let fmt = |message: String| TraceError::Format { line: n, message };
            if line.trim().is_empty() {
                continue;
            }
            if end.is_some() {
                return Err(fmt("content after the end line".into()));
            }
            let v: Value = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
            let obj = v.as_object().ok_or_else(|| fmt("expected an object".into()))?;
            if header.is_none() {
                let h = obj.get("header").ok_or_else(|| fmt("first line must be the header".into()))?;
                let h: TraceHeader = serde_json::from_value(h.clone()).map_err(|e| fmt(e.to_string()))?;
                if h.schema != TRACE_SCHEMA {
                    return Err(fmt(format!("unsupported trace schema {}", h.schema)));
                }
                header = Some(h);
            } else if let Some(c) = obj.get("client") {
                if client.is_some() || !records.is_empty() {
                    return Err(fmt("client line must directly follow the header".into()));
                }
                client = Some(c.clone());
            } else if let Some(e) = obj.get("end") {
                end = Some(serde_json::from_value(e.clone()).map_err(|e| fmt(e.to_string()))?);
            } else {
                // parse from the raw text so floats round-trip exactly
                let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
                records.push(rec);
            }
        }
        let header = header.ok_or(TraceError::Empty)?;
        Ok(Self { header, client, records, end })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        Self::read_from(text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn line<W: Write, T: Serialize>(w: &mut W, v: &T) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

impl From<serde_json::Error> for TraceError {
    fn from(e: serde_json::Error) -> Self {
        TraceError::Format { line: 0, message: e.to_string() }
    }
}
