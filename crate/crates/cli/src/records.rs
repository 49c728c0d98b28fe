//! Line-delimited JSON output. Every float is rounded to six significant
//! digits before it is written.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use apgcn::protocol::{Aggregate, RunResult};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::CliError;

pub const SIGNIFICANT_DIGITS: usize = 6;

pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

/// Grid-point value; integral values such as label counts print as integers.
pub fn column_value(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        Value::from(x as i64)
    } else {
        Value::from(x)
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n
                .as_f64()
                .map(round_sig)
                .and_then(serde_json::Number::from_f64)
            {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

pub struct RecordWriter {
    out: Box<dyn Write>,
    pub record_timing: bool,
}

impl RecordWriter {
    /// Writes to `path`, or to stdout when absent.
    pub fn open(path: Option<&Path>, record_timing: bool) -> Result<Self, CliError> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
            )),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Self { out, record_timing })
    }

    /// Writes `{"record": kind, ...body}` as one line.
    pub fn emit(&mut self, kind: &str, body: impl Serialize) -> Result<(), CliError> {
        let mut map = Map::new();
        map.insert("record".into(), Value::from(kind));
        match serde_json::to_value(body).map_err(|e| CliError::usage(e.to_string()))? {
            Value::Object(fields) => map.extend(fields),
            Value::Null => {}
            other => {
                map.insert("value".into(), other);
            }
        }
        let mut line = Value::Object(map);
        round_value(&mut line);
        writeln!(self.out, "{line}").map_err(|e| CliError::usage(format!("write failed: {e}")))
    }

    /// Run row, tagged with the grid point it belongs to when there is one.
    pub fn run(&mut self, r: &RunResult, point: Option<(&str, f64)>) -> Result<(), CliError> {
        let mut m = Map::new();
        if let Some((name, value)) = point {
            m.insert(name.into(), column_value(value));
        }
        if let Value::Object(fields) =
            serde_json::to_value(r).map_err(|e| CliError::usage(e.to_string()))?
        {
            m.extend(fields);
        }
        if !self.record_timing {
            m.remove("wall_time_ms_per_epoch");
        }
        self.emit("run", m)
    }

    pub fn failure(
        &mut self,
        split_seed: u64,
        init_seed: u64,
        err: &apgcn::Error,
        point: Option<(&str, f64)>,
    ) -> Result<(), CliError> {
        let mut m = Map::new();
        if let Some((name, value)) = point {
            m.insert(name.into(), column_value(value));
        }
        m.insert("split_seed".into(), split_seed.into());
        m.insert("init_seed".into(), init_seed.into());
        m.insert("numerical".into(), err.is_numerical().into());
        m.insert("error".into(), err.to_string().into());
        self.emit("failure", m)
    }

    /// One row per depth `k = 1..=T`, one column per grid point.
    pub fn k_density_table(
        &mut self,
        parameter: &str,
        columns: &[f64],
        aggregates: &[Option<&Aggregate>],
        max_steps: usize,
    ) -> Result<(), CliError> {
        for k in 1..=max_steps {
            let density: Vec<Value> = aggregates
                .iter()
                .map(|a| match a {
                    Some(a) => Value::from(a.k_density.get(k - 1).copied().unwrap_or(0.0)),
                    None => Value::Null,
                })
                .collect();
            self.emit(
                "k_density",
                json!({
                    "parameter": parameter,
                    "k": k,
                    "columns": columns.iter().map(|&c| column_value(c)).collect::<Vec<_>>(),
                    "density": density,
                }),
            )?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.out
            .flush()
            .map_err(|e| CliError::usage(format!("write failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_six_significant_digits() {
        assert_eq!(round_sig(0.123456789), 0.123457);
        assert_eq!(round_sig(76.123449), 76.1234);
        assert_eq!(round_sig(-1234567.0), -1234570.0);
        assert_eq!(round_sig(1e-9), 1e-9);
        assert_eq!(round_sig(0.0), 0.0);
    }

    #[test]
    fn nested_values_are_rounded() {
        let mut v = json!({"a": [1.0 / 3.0, {"b": 2.0f64.sqrt()}], "n": 7});
        round_value(&mut v);
        assert_eq!(v.to_string(), r#"{"a":[0.333333,{"b":1.41421}],"n":7}"#);
    }
}
