//! Per-interval records and their CSV / JSON-lines serialization.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::controller::ResourceWeights;

/// Tag written at the top of every trace file.
pub const TRACE_SCHEMA: &str = "gradadapt-trace/1";

const OBJECTIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            other => Err(format!("unknown trace format `{other}`; expected csv or jsonl")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub t: usize,
    pub phase: usize,
    pub config: Vec<usize>,
    pub accuracy: f64,
    pub bandwidth_bytes: f64,
    /// Frame inferences charged to the policy, including the backward-pass
    /// surcharge and profiling work.
    pub gpu_frames: f64,
    pub objective: f64,
    pub acc_grad: Vec<f64>,
    /// Frame inferences spent beyond the analyzed frames themselves.
    pub extra_inferences: usize,
    pub backprops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema: String,
    pub policy: String,
    pub seed: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub weights: ResourceWeights,
    pub knobs: Vec<String>,
    /// Per knob, the value of every index.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<IntervalRecord>,
}

impl Trace {
    pub fn recompute_objective(&self, r: &IntervalRecord) -> f64 {
        r.accuracy - self.meta.lambda * (self.meta.weights.bandwidth * r.bandwidth_bytes + self.meta.weights.gpu * r.gpu_frames)
    }

    /// Checks the record invariants: t runs 1..=T and every stored objective
    /// matches the one recomputed from its parts.
    pub fn check(&self) -> Result<(), HarnessError> {
        for (i, r) in self.records.iter().enumerate() {
            if r.t != i + 1 {
                return Err(HarnessError::Trace(format!("record {i} has t = {}, expected {}", r.t, i + 1)));
            }
            if r.config.len() != self.meta.knobs.len() {
                return Err(HarnessError::Trace(format!("record t = {} has {} knob indices", r.t, r.config.len())));
            }
            let expected = self.recompute_objective(r);
            if (expected - r.objective).abs() > OBJECTIVE_TOLERANCE {
                return Err(HarnessError::Trace(format!(
                    "record t = {}: objective {} differs from recomputed {}",
                    r.t, r.objective, expected
                )));
            }
        }
        Ok(())
    }

    pub fn mean<F: Fn(&IntervalRecord) -> f64>(&self, f: F) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(f).sum::<f64>() / self.records.len() as f64
    }

    pub fn render(&self, format: TraceFormat) -> Result<String, HarnessError> {
        self.check()?;
        match format {
            TraceFormat::Csv => self.render_csv(),
            TraceFormat::Jsonl => self.render_jsonl(),
        }
    }

    pub fn write(&self, path: &Path, format: TraceFormat) -> Result<(), HarnessError> {
        let text = self.render(format)?;
        fs::write(path, text).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    fn render_csv(&self) -> Result<String, HarnessError> {
        let mut out = String::new();
        writeln!(out, "# {}", serde_json::to_string(&self.meta)?).expect("string write");
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = vec!["t".into(), "policy".into(), "phase".into()];
        header.extend(self.meta.knobs.iter().cloned());
        header.extend(
            [
                "accuracy",
                "bandwidth_bytes",
                "gpu_frames",
                "objective",
                "extra_inferences",
                "backprops",
                "acc_grad",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.t.to_string(), self.meta.policy.clone(), r.phase.to_string()];
            for (k, &i) in r.config.iter().enumerate() {
                row.push(self.meta.values[k][i].to_string());
            }
            row.push(r.accuracy.to_string());
            row.push(r.bandwidth_bytes.to_string());
            row.push(r.gpu_frames.to_string());
            row.push(r.objective.to_string());
            row.push(r.extra_inferences.to_string());
            row.push(r.backprops.to_string());
            row.push(r.acc_grad.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(";"));
            w.write_record(&row)?;
        }
        let body = w.into_inner().map_err(|e| HarnessError::Trace(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    fn render_jsonl(&self) -> Result<String, HarnessError> {
        let mut out = String::new();
        writeln!(out, "{}", serde_json::to_string(&self.meta)?).expect("string write");
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?).expect("string write");
        }
        Ok(out)
    }

    /// Parses a file written by [`Trace::write`] in either format.
    pub fn read(path: &Path) -> Result<Trace, HarnessError> {
        let io = |e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let file = fs::File::open(path).map_err(io)?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .transpose()
            .map_err(io)?
            .ok_or_else(|| HarnessError::Trace("empty trace file".into()))?;
        let (meta_json, csv_mode) = match first.strip_prefix("# ") {
            Some(rest) => (rest.to_string(), true),
            None => (first, false),
        };
        let meta: TraceMeta = serde_json::from_str(&meta_json)?;
        if meta.schema != TRACE_SCHEMA {
            return Err(HarnessError::Trace(format!("unsupported schema `{}`", meta.schema)));
        }
        let rest: Vec<String> = lines.collect::<Result<_, _>>().map_err(io)?;
        let records = if csv_mode {
            parse_csv_records(&meta, &rest.join("\n"))?
        } else {
            rest.iter()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l))
                .collect::<Result<_, _>>()?
        };
        Ok(Trace { meta, records })
    }
}

fn parse_csv_records(meta: &TraceMeta, body: &str) -> Result<Vec<IntervalRecord>, HarnessError> {
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let n = meta.knobs.len();
    let bad = |what: &str| HarnessError::Trace(format!("malformed trace row: {what}"));
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).ok_or_else(|| bad("too few columns"));
        let num = |i: usize| -> Result<f64, HarnessError> { field(i)?.parse().map_err(|_| bad("not a number")) };
        let int = |i: usize| -> Result<usize, HarnessError> { field(i)?.parse().map_err(|_| bad("not an integer")) };
        let mut config = Vec::with_capacity(n);
        for k in 0..n {
            let v = num(3 + k)?;
            let idx = meta.values[k]
                .iter()
                .position(|&x| x == v)
                .ok_or_else(|| bad("knob value not in the declared list"))?;
            config.push(idx);
        }
        let grads = field(3 + n + 6)?;
        let acc_grad = if grads.is_empty() {
            Vec::new()
        } else {
            grads
                .split(';')
                .map(|g| g.parse().map_err(|_| bad("bad gradient")))
                .collect::<Result<_, _>>()?
        };
        out.push(IntervalRecord {
            t: int(0)?,
            phase: int(2)?,
            config,
            accuracy: num(3 + n)?,
            bandwidth_bytes: num(4 + n)?,
            gpu_frames: num(5 + n)?,
            objective: num(6 + n)?,
            extra_inferences: int(7 + n)?,
            backprops: int(8 + n)?,
            acc_grad,
        });
    }
    Ok(out)
}
