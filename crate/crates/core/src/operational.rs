//! Operational energy from per-process energy-monitor logs.
//!
//! Monitors in the style of the Windows Energy Estimation Engine write one CSV
//! row per process per sampling interval (at most a minute). A long-running
//! process therefore shows up many times; its energy is the sum of the
//! `TotalEnergyConsumption` column over its rows.
//!
//! Canonical schema, energy in millijoules:
//!
//! ```text
//! ProcessName,AppId,TimeStamp,IntervalSeconds,TotalEnergyConsumption
//! ```
//!
//! `AppId` and `IntervalSeconds` are optional (the latter defaults to 60).
//! Vendor logs with other column names or units go through [`ColumnMapping`].

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset, NaiveDateTime, SecondsFormat};
use globset::{GlobBuilder, GlobMatcher};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantities::{carbon_from_energy, CarbonIntensityValue, CarbonQuantity, EnergyQuantity};

pub const MAX_INTERVAL_S: f64 = 60.0;
pub const CANONICAL_HEADER: [&str; 5] = [
    "ProcessName",
    "AppId",
    "TimeStamp",
    "IntervalSeconds",
    "TotalEnergyConsumption",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}: missing required column {column:?}")]
    MissingColumn { source_name: String, column: String },
    #[error("{source_name}: line {line}: {message}")]
    Row {
        source_name: String,
        line: u64,
        message: String,
    },
    #[error("{source_name}: malformed CSV: {message}")]
    Csv {
        source_name: String,
        message: String,
    },
    #[error("invalid process filter {pattern:?}: {message}")]
    Filter { pattern: String, message: String },
    #[error("no records match process filter {filter} (processes in log: {seen})")]
    NoMatch { filter: String, seen: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EnergyUnit {
    #[serde(rename = "uJ", alias = "µJ", alias = "microjoules")]
    Microjoules,
    #[default]
    #[serde(rename = "mJ", alias = "millijoules")]
    Millijoules,
    #[serde(rename = "J", alias = "joules")]
    Joules,
}

impl EnergyUnit {
    fn millijoules_per_unit(self) -> f64 {
        match self {
            EnergyUnit::Microjoules => 1e-3,
            EnergyUnit::Millijoules => 1.0,
            EnergyUnit::Joules => 1e3,
        }
    }
}

/// Maps vendor column names and energy units onto the canonical schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub process_name: String,
    pub app_id: String,
    pub timestamp: String,
    pub interval_seconds: String,
    pub energy: String,
    pub energy_unit: EnergyUnit,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            process_name: "ProcessName".into(),
            app_id: "AppId".into(),
            timestamp: "TimeStamp".into(),
            interval_seconds: "IntervalSeconds".into(),
            energy: "TotalEnergyConsumption".into(),
            energy_unit: EnergyUnit::Millijoules,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// Abort on the first bad row.
    #[default]
    Strict,
    /// Skip bad rows and report them in [`EnergyLog::skipped`].
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOptions {
    pub mode: ParseMode,
    pub columns: ColumnMapping,
}

impl ParseOptions {
    pub fn lenient() -> Self {
        Self {
            mode: ParseMode::Lenient,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRecord {
    pub process_name: String,
    pub app_id: Option<String>,
    pub timestamp: DateTime<FixedOffset>,
    pub interval_s: f64,
    pub energy_mj: u64,
}

impl EnergyRecord {
    /// Start of the interval this record covers.
    pub fn interval_start(&self) -> DateTime<FixedOffset> {
        self.timestamp - chrono::Duration::microseconds((self.interval_s * 1e6).round() as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowIssue {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyLog {
    records: Vec<EnergyRecord>,
    source_path: String,
    skipped: Vec<RowIssue>,
}

impl EnergyLog {
    /// Builds a log from records, sorting them by timestamp.
    pub fn from_records(source_path: impl Into<String>, mut records: Vec<EnergyRecord>) -> Self {
        records.sort_by_key(|r| r.timestamp);
        Self {
            records,
            source_path: source_path.into(),
            skipped: Vec::new(),
        }
    }

    pub fn records(&self) -> &[EnergyRecord] {
        &self.records
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    /// Rows dropped by a lenient parse.
    pub fn skipped(&self) -> &[RowIssue] {
        &self.skipped
    }

    pub fn process_names(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .map(|r| r.process_name.as_str())
            .collect()
    }

    /// Canonical CSV rendering (LF line endings, millijoules).
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CANONICAL_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.process_name.as_str(),
                r.app_id.as_deref().unwrap_or(""),
                &r.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
                &r.interval_s.to_string(),
                &r.energy_mj.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

pub fn parse_energy_log(path: &Path, opts: &ParseOptions) -> Result<EnergyLog, LogError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    parse_energy_log_str(&text, &path.display().to_string(), opts)
}

fn parse_timestamp(raw: &str) -> Result<DateTime<FixedOffset>, String> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Ok(ts);
    }
    // zone-less timestamps are taken as UTC
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(naive.and_utc().fixed_offset());
        }
    }
    Err(format!("unparseable timestamp {raw:?}"))
}

fn parse_energy(raw: &str, unit: EnergyUnit) -> Result<u64, String> {
    if raw.starts_with('-') {
        return Err("negative energy".into());
    }
    if unit == EnergyUnit::Millijoules {
        if let Ok(v) = raw.parse::<u64>() {
            return Ok(v);
        }
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok((v * unit.millijoules_per_unit()).round() as u64),
        Ok(v) if v < 0.0 => Err("negative energy".into()),
        _ => Err(format!("unparseable energy {raw:?}")),
    }
}

fn parse_interval(raw: Option<&str>) -> Result<f64, String> {
    let raw = match raw {
        None | Some("") => return Ok(MAX_INTERVAL_S),
        Some(r) => r,
    };
    let v: f64 = raw
        .parse()
        .map_err(|_| format!("unparseable interval {raw:?}"))?;
    if v > 0.0 && v <= MAX_INTERVAL_S {
        Ok(v)
    } else {
        Err(format!("interval {v} s outside (0, 60]"))
    }
}

struct ColumnIndex {
    process: usize,
    timestamp: usize,
    energy: usize,
    app_id: Option<usize>,
    interval: Option<usize>,
}

fn column_index(
    headers: &csv::StringRecord,
    m: &ColumnMapping,
    source_name: &str,
) -> Result<ColumnIndex, LogError> {
    let find = |name: &str| {
        headers.iter().position(|h| {
            h.trim_start_matches('\u{feff}')
                .trim()
                .eq_ignore_ascii_case(name)
        })
    };
    let required = |name: &str| {
        find(name).ok_or_else(|| LogError::MissingColumn {
            source_name: source_name.to_string(),
            column: name.to_string(),
        })
    };
    Ok(ColumnIndex {
        process: required(&m.process_name)?,
        timestamp: required(&m.timestamp)?,
        energy: required(&m.energy)?,
        app_id: find(&m.app_id),
        interval: find(&m.interval_seconds),
    })
}

fn parse_row(
    row: &csv::StringRecord,
    idx: &ColumnIndex,
    unit: EnergyUnit,
) -> Result<EnergyRecord, String> {
    let field = |i: usize, name: &str| {
        row.get(i)
            .map(str::trim)
            .ok_or_else(|| format!("missing field {name}"))
    };
    let process_name = field(idx.process, "process name")?;
    if process_name.is_empty() {
        return Err("empty process name".into());
    }
    let timestamp = parse_timestamp(field(idx.timestamp, "timestamp")?)?;
    let energy_mj = parse_energy(field(idx.energy, "energy")?, unit)?;
    let interval_s = parse_interval(idx.interval.and_then(|i| row.get(i)).map(str::trim))?;
    let app_id = idx
        .app_id
        .and_then(|i| row.get(i))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from);
    Ok(EnergyRecord {
        process_name: process_name.to_string(),
        app_id,
        timestamp,
        interval_s,
        energy_mj,
    })
}

pub fn parse_energy_log_str(
    text: &str,
    source_name: &str,
    opts: &ParseOptions,
) -> Result<EnergyLog, LogError> {
    // csv positions lag by one line on CRLF input
    let normalized;
    let text = if text.contains('\r') {
        normalized = text.replace("\r\n", "\n");
        normalized.as_str()
    } else {
        text
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| LogError::Csv {
        source_name: source_name.to_string(),
        message: e.to_string(),
    })?;
    let idx = column_index(headers, &opts.columns, source_name)?;

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for row in reader.records() {
        let (line, parsed) = match row {
            Ok(row) => {
                let line = row.position().map_or(0, |p| p.line());
                (line, parse_row(&row, &idx, opts.columns.energy_unit))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                (line, Err(e.to_string()))
            }
        };
        match parsed {
            Ok(record) => records.push(record),
            Err(message) => match opts.mode {
                ParseMode::Strict => {
                    return Err(LogError::Row {
                        source_name: source_name.to_string(),
                        line,
                        message: format!("{message} at line {line}"),
                    })
                }
                ParseMode::Lenient => skipped.push(RowIssue { line, message }),
            },
        }
    }
    let mut log = EnergyLog::from_records(source_name, records);
    log.skipped = skipped;
    Ok(log)
}

/// Selects records by process name: case-insensitive exact match, or a glob
/// when the pattern contains `*` or `?`. Several patterns act as a union.
#[derive(Debug, Clone)]
pub struct ProcessFilter {
    patterns: Vec<(String, Option<GlobMatcher>)>,
}

impl ProcessFilter {
    pub fn new(pattern: &str) -> Result<Self, LogError> {
        Self::any_of([pattern])
    }

    pub fn any_of<'a>(patterns: impl IntoIterator<Item = &'a str>) -> Result<Self, LogError> {
        let mut out = Vec::new();
        for p in patterns {
            if p.trim().is_empty() {
                return Err(LogError::Filter {
                    pattern: p.to_string(),
                    message: "pattern is empty".into(),
                });
            }
            let glob = if p.contains(['*', '?']) {
                let g = GlobBuilder::new(p)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| LogError::Filter {
                        pattern: p.to_string(),
                        message: e.to_string(),
                    })?;
                Some(g.compile_matcher())
            } else {
                None
            };
            out.push((p.to_string(), glob));
        }
        if out.is_empty() {
            return Err(LogError::Filter {
                pattern: String::new(),
                message: "no patterns".into(),
            });
        }
        Ok(Self { patterns: out })
    }

    pub fn matches(&self, process_name: &str) -> bool {
        self.patterns.iter().any(|(p, glob)| match glob {
            Some(g) => g.is_match(process_name),
            None => p.eq_ignore_ascii_case(process_name),
        })
    }

    pub fn describe(&self) -> String {
        self.patterns
            .iter()
            .map(|(p, _)| format!("{p:?}"))
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

fn matching_millijoules<'a>(
    records: impl Iterator<Item = &'a EnergyRecord>,
    f: &ProcessFilter,
) -> Option<u128> {
    let mut total = None;
    for r in records.filter(|r| f.matches(&r.process_name)) {
        *total.get_or_insert(0u128) += r.energy_mj as u128;
    }
    total
}

fn no_match(log: &EnergyLog, f: &ProcessFilter) -> LogError {
    let names: Vec<_> = log.process_names().into_iter().take(10).collect();
    LogError::NoMatch {
        filter: f.describe(),
        seen: if names.is_empty() {
            "none".into()
        } else {
            names.join(", ")
        },
    }
}

fn mj_to_energy(mj: u128) -> EnergyQuantity {
    EnergyQuantity::from_joules(mj as f64 / 1_000.0).expect("non-negative")
}

/// Total energy of the records matching `f`. Rows sharing a timestamp are
/// all counted (monitors emit one row per hardware component).
pub fn sum_process_energy(log: &EnergyLog, f: &ProcessFilter) -> Result<EnergyQuantity, LogError> {
    matching_millijoules(log.records.iter(), f)
        .map(mj_to_energy)
        .ok_or_else(|| no_match(log, f))
}

/// Like [`sum_process_energy`] but restricted to records whose interval
/// overlaps `[start, end]`.
pub fn sum_process_energy_in_window(
    log: &EnergyLog,
    f: &ProcessFilter,
    start: DateTime<FixedOffset>,
    end: DateTime<FixedOffset>,
) -> Result<EnergyQuantity, LogError> {
    let in_window = log
        .records
        .iter()
        .filter(|r| r.timestamp >= start && r.interval_start() <= end);
    matching_millijoules(in_window, f)
        .map(mj_to_energy)
        .ok_or_else(|| no_match(log, f))
}

pub fn operational_carbon(e: EnergyQuantity, ci: CarbonIntensityValue) -> CarbonQuantity {
    carbon_from_energy(e, ci)
}
