//! Token and Capacity-Unit bookkeeping for the text exchanged with the LLM.
//!
//! Token counts are estimated from whitespace-delimited words with the fixed
//! ratio of 1000 tokens per 750 words, or supplied directly when measured.
//! Consumption is charged per token at a direction-dependent rate in
//! CU-seconds (0.4 for prompt input, 1.2 for generated output by default).

use std::fmt;
use std::iter::Sum;
use std::ops::Add;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid include pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("invalid consumption rate {0}: must be a finite non-negative number")]
    Rate(f64),
    #[error("corpus {label:?} has no files but {words} words")]
    WordsWithoutFiles { label: String, words: u64 },
    #[error("unknown direction {0:?} (expected input or output)")]
    Direction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Input,
    Output,
}

impl FromStr for Direction {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "input" | "in" | "prompt" => Ok(Direction::Input),
            "output" | "out" | "completion" => Ok(Direction::Output),
            _ => Err(TokenError::Direction(s.to_string())),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Input => "input",
            Direction::Output => "output",
        })
    }
}

const MICROS: u64 = 1_000_000;

/// CU-seconds held as an integer count of micro-CU-seconds, so sums are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CuSeconds {
    micros: u128,
}

impl CuSeconds {
    pub const ZERO: Self = Self { micros: 0 };

    pub fn from_micros(micros: u128) -> Self {
        Self { micros }
    }

    pub fn micros(&self) -> u128 {
        self.micros
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.micros as f64 / MICROS as f64
    }

    /// Whole seconds, fractional part dropped.
    pub fn truncated_secs(&self) -> u128 {
        self.micros / MICROS as u128
    }
}

impl Add for CuSeconds {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            micros: self.micros + rhs.micros,
        }
    }
}

impl Sum for CuSeconds {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, Add::add)
    }
}

impl fmt::Display for CuSeconds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.micros / MICROS as u128;
        let frac = self.micros % MICROS as u128;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let s = format!("{frac:06}");
            write!(f, "{whole}.{}", s.trim_end_matches('0'))
        }
    }
}

impl Serialize for CuSeconds {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_secs_f64())
    }
}

/// CU-seconds charged per token, by direction.
///
/// Rates are kept with microsecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RateProxy", into = "RateProxy")]
pub struct ConsumptionRateModel {
    input_micros: u64,
    output_micros: u64,
}

#[derive(Serialize, Deserialize)]
struct RateProxy {
    input_rate: f64,
    output_rate: f64,
}

impl TryFrom<RateProxy> for ConsumptionRateModel {
    type Error = TokenError;

    fn try_from(p: RateProxy) -> Result<Self, Self::Error> {
        Self::new(p.input_rate, p.output_rate)
    }
}

impl From<ConsumptionRateModel> for RateProxy {
    fn from(m: ConsumptionRateModel) -> Self {
        RateProxy {
            input_rate: m.input_rate(),
            output_rate: m.output_rate(),
        }
    }
}

fn rate_to_micros(rate: f64) -> Result<u64, TokenError> {
    if !rate.is_finite() || rate < 0.0 || rate * MICROS as f64 > u64::MAX as f64 {
        return Err(TokenError::Rate(rate));
    }
    Ok((rate * MICROS as f64).round() as u64)
}

impl ConsumptionRateModel {
    pub fn new(input_rate: f64, output_rate: f64) -> Result<Self, TokenError> {
        Ok(Self {
            input_micros: rate_to_micros(input_rate)?,
            output_micros: rate_to_micros(output_rate)?,
        })
    }

    pub fn input_rate(&self) -> f64 {
        self.input_micros as f64 / MICROS as f64
    }

    pub fn output_rate(&self) -> f64 {
        self.output_micros as f64 / MICROS as f64
    }

    pub fn rate(&self, d: Direction) -> f64 {
        self.micros_per_token(d) as f64 / MICROS as f64
    }

    fn micros_per_token(&self, d: Direction) -> u64 {
        match d {
            Direction::Input => self.input_micros,
            Direction::Output => self.output_micros,
        }
    }
}

impl Default for ConsumptionRateModel {
    fn default() -> Self {
        Self {
            input_micros: 400_000,
            output_micros: 1_200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    /// Derived from the word count.
    Estimated,
    /// Supplied by the caller, e.g. from provider usage statistics.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub label: String,
    pub direction: Direction,
    pub file_count: u64,
    pub total_words: u64,
    pub total_tokens: u64,
    pub token_source: TokenSource,
}

impl CorpusStats {
    /// Stats whose token count is estimated from the word count.
    pub fn from_words(
        label: impl Into<String>,
        direction: Direction,
        file_count: u64,
        total_words: u64,
    ) -> Result<Self, TokenError> {
        let label = label.into();
        if file_count == 0 && total_words > 0 {
            return Err(TokenError::WordsWithoutFiles {
                label,
                words: total_words,
            });
        }
        Ok(Self {
            label,
            direction,
            file_count,
            total_words,
            total_tokens: words_to_tokens(total_words),
            token_source: TokenSource::Estimated,
        })
    }

    /// Stats with a directly supplied token count.
    pub fn measured(
        label: impl Into<String>,
        direction: Direction,
        file_count: u64,
        total_words: u64,
        total_tokens: u64,
    ) -> Result<Self, TokenError> {
        let mut stats = Self::from_words(label, direction, file_count, total_words)?;
        stats.total_tokens = total_tokens;
        stats.token_source = TokenSource::Measured;
        Ok(stats)
    }

    pub fn consumption(&self, m: &ConsumptionRateModel) -> CuSeconds {
        consumption_seconds(self.total_tokens, self.direction, m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    entries: Vec<CorpusStats>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stats: CorpusStats) {
        self.entries.push(stats);
    }

    pub fn entries(&self) -> &[CorpusStats] {
        &self.entries
    }

    pub fn concat(mut self, other: TokenLedger) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

impl FromIterator<CorpusStats> for TokenLedger {
    fn from_iter<I: IntoIterator<Item = CorpusStats>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LedgerTotals {
    pub tokens: u64,
    pub cu_seconds: CuSeconds,
}

/// round-half-up(words x 4/3).
pub fn words_to_tokens(words: u64) -> u64 {
    // 4w/3 never has fractional part exactly 1/2, so floor((8w + 3) / 6) is exact
    let w = words as u128;
    ((8 * w + 3) / 6) as u64
}

/// Number of maximal non-whitespace runs.
pub fn count_words(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub fn consumption_seconds(tokens: u64, d: Direction, m: &ConsumptionRateModel) -> CuSeconds {
    CuSeconds::from_micros(tokens as u128 * m.micros_per_token(d) as u128)
}

pub fn ledger_totals(ledger: &TokenLedger, m: &ConsumptionRateModel) -> LedgerTotals {
    LedgerTotals {
        tokens: ledger.entries.iter().map(|e| e.total_tokens).sum(),
        cu_seconds: ledger.entries.iter().map(|e| e.consumption(m)).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusScan {
    pub stats: CorpusStats,
    /// Matched files that could not be counted, sorted by path.
    pub skipped: Vec<SkippedFile>,
}

fn build_globs(patterns: &[&str]) -> Result<(GlobSet, GlobSet), TokenError> {
    let mut by_name = GlobSetBuilder::new();
    let mut by_path = GlobSetBuilder::new();
    for pattern in patterns {
        let glob = GlobBuilder::new(pattern)
            .literal_separator(true)
            .build()
            .map_err(|e| TokenError::Pattern {
                pattern: pattern.to_string(),
                message: e.to_string(),
            })?;
        // patterns without a separator match the file name anywhere in the tree
        if pattern.contains('/') {
            by_path.add(glob);
        } else {
            by_name.add(glob);
        }
    }
    let build = |b: GlobSetBuilder| {
        b.build().map_err(|e| TokenError::Pattern {
            pattern: patterns.join(","),
            message: e.to_string(),
        })
    };
    Ok((build(by_name)?, build(by_path)?))
}

enum FileCount {
    Words(u64),
    Skipped(SkippedFile),
}

/// Count files and words under `root` matching any of `include_globs`
/// (all regular files when the list is empty).
pub fn scan_corpus(
    root: &Path,
    include_globs: &[&str],
    direction: Direction,
) -> Result<CorpusScan, TokenError> {
    let io_err = |source| TokenError::Io {
        path: root.to_path_buf(),
        source,
    };
    std::fs::read_dir(root).map_err(io_err)?;
    let (by_name, by_path) = build_globs(include_globs)?;

    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            TokenError::Io {
                path,
                source: e.into(),
            }
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let rel_str = rel.to_string_lossy().replace('\\', "/");
        let matched = include_globs.is_empty()
            || by_name.is_match(entry.file_name())
            || by_path.is_match(&rel_str);
        if matched {
            files.push(entry.into_path());
        }
    }

    let counts: Vec<FileCount> = files
        .par_iter()
        .map(|path| match std::fs::read(path) {
            Err(e) => FileCount::Skipped(SkippedFile {
                path: path.clone(),
                reason: e.to_string(),
            }),
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) => FileCount::Words(count_words(&text)),
                Err(_) => FileCount::Skipped(SkippedFile {
                    path: path.clone(),
                    reason: "not valid UTF-8 text".into(),
                }),
            },
        })
        .collect();

    let mut file_count = 0u64;
    let mut words = 0u64;
    let mut skipped = Vec::new();
    for c in counts {
        match c {
            FileCount::Words(w) => {
                file_count += 1;
                words += w;
            }
            FileCount::Skipped(s) => skipped.push(s),
        }
    }
    skipped.sort_by(|a, b| a.path.cmp(&b.path));

    let label = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| root.display().to_string());
    Ok(CorpusScan {
        stats: CorpusStats::from_words(label, direction, file_count, words)?,
        skipped,
    })
}
