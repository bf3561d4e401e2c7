//! Metric reports and tabular CSV outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RigidTransform3D;

/// Format with nine significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.8e}")
}

fn round_sig9(v: f64) -> f64 {
    fmt_f64(v).parse().unwrap_or(v)
}

/// Identifies which run a metric belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub subject: String,
    pub method: String,
    pub regularizer: String,
    pub parameter: String,
}

impl MetricKey {
    pub fn new(
        subject: impl Into<String>,
        method: impl Into<String>,
        regularizer: impl Into<String>,
        parameter: impl Into<String>,
    ) -> Self {
        MetricKey {
            subject: subject.into(),
            method: method.into(),
            regularizer: regularizer.into(),
            parameter: parameter.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl MetricValue {
    fn values(&self) -> &[f64] {
        match self {
            MetricValue::Scalar(v) => std::slice::from_ref(v),
            MetricValue::Vector(v) => v,
        }
    }
}

/// Named metrics keyed by run, kept in deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    entries: BTreeMap<(MetricKey, String), MetricValue>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    fn insert(&mut self, key: MetricKey, name: &str, value: MetricValue) -> Result<()> {
        if value.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("metric '{name}'")));
        }
        let slot = (key, name.to_string());
        if self.entries.contains_key(&slot) {
            return Err(Error::InvalidArgument(format!(
                "metric '{name}' already recorded for {:?}",
                slot.0
            )));
        }
        self.entries.insert(slot, value);
        Ok(())
    }

    pub fn insert_scalar(&mut self, key: MetricKey, name: &str, value: f64) -> Result<()> {
        self.insert(key, name, MetricValue::Scalar(value))
    }

    pub fn insert_vector(&mut self, key: MetricKey, name: &str, values: Vec<f64>) -> Result<()> {
        self.insert(key, name, MetricValue::Vector(values))
    }

    pub fn get(&self, key: &MetricKey, name: &str) -> Option<&MetricValue> {
        self.entries.get(&(key.clone(), name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MetricKey, &str, &MetricValue)> {
        self.entries.iter().map(|((k, n), v)| (k, n.as_str(), v))
    }

    /// Merge `other` into `self`; duplicate entries are an error.
    pub fn extend(&mut self, other: MetricsReport) -> Result<()> {
        for ((k, n), v) in other.entries {
            self.insert(k, &n, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for ((_, name), v) in &self.entries {
            if v.values().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("metric '{name}'")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "subject",
    "method",
    "regularizer",
    "parameter",
    "metric",
    "index",
    "value",
];

/// A stamp line, when given, is written first as a `#` comment.
pub fn write_report(
    report: &MetricsReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
    stamp: Option<&str>,
) -> Result<()> {
    report.validate()?;
    let text = match format {
        ReportFormat::Csv => {
            let mut rows = Vec::new();
            for (k, name, v) in report.iter() {
                let base = [&k.subject, &k.method, &k.regularizer, &k.parameter, name];
                match v {
                    MetricValue::Scalar(x) => {
                        let mut r: Vec<String> = base.iter().map(|s| s.to_string()).collect();
                        r.push(String::new());
                        r.push(fmt_f64(*x));
                        rows.push(r);
                    }
                    MetricValue::Vector(xs) => {
                        for (i, x) in xs.iter().enumerate() {
                            let mut r: Vec<String> = base.iter().map(|s| s.to_string()).collect();
                            r.push(i.to_string());
                            r.push(fmt_f64(*x));
                            rows.push(r);
                        }
                    }
                }
            }
            table_to_string(&REPORT_COLUMNS, &rows, stamp)?
        }
        ReportFormat::Json => {
            #[derive(Serialize)]
            struct Entry<'a> {
                #[serde(flatten)]
                key: &'a MetricKey,
                value: MetricValue,
            }
            let mut by_metric: BTreeMap<&str, Vec<Entry>> = BTreeMap::new();
            for (k, name, v) in report.iter() {
                let value = match v {
                    MetricValue::Scalar(x) => MetricValue::Scalar(round_sig9(*x)),
                    MetricValue::Vector(xs) => MetricValue::Vector(xs.iter().map(|x| round_sig9(*x)).collect()),
                };
                by_metric.entry(name).or_default().push(Entry { key: k, value });
            }
            let mut root = serde_json::Map::new();
            if let Some(s) = stamp {
                root.insert("_stamp".into(), serde_json::Value::String(s.to_string()));
            }
            for (name, entries) in by_metric {
                root.insert(name.to_string(), serde_json::to_value(entries)?);
            }
            let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(root))?;
            s.push('\n');
            s
        }
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut scalars: BTreeMap<(MetricKey, String), f64> = BTreeMap::new();
    let mut vectors: BTreeMap<(MetricKey, String), Vec<(usize, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != REPORT_COLUMNS.len() {
            return Err(Error::InvalidArgument(format!(
                "report row has {} columns, expected {}",
                rec.len(),
                REPORT_COLUMNS.len()
            )));
        }
        let key = MetricKey::new(&rec[0], &rec[1], &rec[2], &rec[3]);
        let value: f64 = rec[6]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad value '{}'", &rec[6])))?;
        if rec[5].is_empty() {
            scalars.insert((key, rec[4].to_string()), value);
        } else {
            let idx: usize = rec[5]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad index '{}'", &rec[5])))?;
            vectors.entry((key, rec[4].to_string())).or_default().push((idx, value));
        }
    }
    let mut report = MetricsReport::new();
    for ((k, n), v) in scalars {
        report.insert_scalar(k, &n, v)?;
    }
    for ((k, n), mut items) in vectors {
        items.sort_by_key(|(i, _)| *i);
        report.insert_vector(k, &n, items.into_iter().map(|(_, v)| v).collect())?;
    }
    Ok(report)
}

fn table_to_string(header: &[&str], rows: &[Vec<String>], stamp: Option<&str>) -> Result<String> {
    let mut out = String::new();
    if let Some(s) = stamp {
        out.push_str("# ");
        out.push_str(s);
        out.push('\n');
    }
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(header)?;
    for r in rows {
        wtr.write_record(r)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    out.push_str(&String::from_utf8_lossy(&bytes));
    Ok(out)
}

/// Write a plain CSV table, optionally preceded by a `#` stamp line.
pub fn write_table(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<String>],
    stamp: Option<&str>,
) -> Result<()> {
    fs::write(path, table_to_string(header, rows, stamp)?)?;
    Ok(())
}

/// Rows of a CSV table as strings (comment lines skipped).
pub fn read_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub const TRANSFORM_COLUMNS: [&str; 8] = ["t", "slice", "rx", "ry", "rz", "tx", "ty", "tz"];

/// One row per (frame, slice).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformRow {
    pub t: usize,
    pub slice: usize,
    pub transform: RigidTransform3D,
}

pub fn write_transforms_csv(
    path: impl AsRef<Path>,
    rows: &[TransformRow],
    stamp: Option<&str>,
) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.t.to_string(), r.slice.to_string()];
            v.extend(r.transform.params().iter().map(|p| fmt_f64(*p)));
            v
        })
        .collect();
    write_table(path, &TRANSFORM_COLUMNS, &body, stamp)
}

/// Transform parameters are interpreted about `center`.
pub fn read_transforms_csv(path: impl AsRef<Path>, center: [f64; 3]) -> Result<Vec<TransformRow>> {
    let (header, rows) = read_table(path)?;
    if header != TRANSFORM_COLUMNS {
        return Err(Error::InvalidArgument(format!(
            "transform table header {header:?}, expected {TRANSFORM_COLUMNS:?}"
        )));
    }
    rows.iter()
        .map(|r| {
            let num = |i: usize| -> Result<f64> {
                r[i].parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number '{}'", r[i])))
            };
            let idx = |i: usize| -> Result<usize> {
                r[i].parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad index '{}'", r[i])))
            };
            let mut p = [0.0; 6];
            for (k, v) in p.iter_mut().enumerate() {
                *v = num(2 + k)?;
            }
            Ok(TransformRow {
                t: idx(0)?,
                slice: idx(1)?,
                transform: RigidTransform3D::from_params(p, center),
            })
        })
        .collect()
}
