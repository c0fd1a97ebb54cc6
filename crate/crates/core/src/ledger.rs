//! Append-only JSON Lines ledger of footprint entries across sessions.
//!
//! Each append is a single `write` on an `O_APPEND` descriptor held under an
//! advisory lock, so concurrent invocations never interleave lines.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embodied::{stable_sum, EmbodiedSession, InferenceProfile, ServerPowerModel};
use crate::quantities::{carbon_from_energy, CarbonIntensityValue, CarbonQuantity, EnergyQuantity};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot serialize ledger entry: {0}")]
    Encode(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Embodied,
    Operational,
}

/// The slice of a report one entry contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFragment {
    pub energy_j: EnergyQuantity,
    pub carbon_intensity_g_per_kwh: CarbonIntensityValue,
    pub carbon_g: CarbonQuantity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server: Option<ServerPowerModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<InferenceProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub timestamp: DateTime<Utc>,
    pub kind: EntryKind,
    pub label: String,
    pub fragment: ReportFragment,
}

impl LedgerEntry {
    pub fn embodied(session: &EmbodiedSession) -> Self {
        Self {
            timestamp: session.timestamp,
            kind: EntryKind::Embodied,
            label: session.label.clone(),
            fragment: ReportFragment {
                energy_j: session.energy,
                carbon_intensity_g_per_kwh: session.carbon_intensity,
                carbon_g: session.carbon,
                server: Some(session.server),
                profile: Some(session.profile),
            },
        }
    }

    pub fn operational(
        label: impl Into<String>,
        timestamp: DateTime<Utc>,
        energy: EnergyQuantity,
        ci: CarbonIntensityValue,
    ) -> Self {
        Self {
            timestamp,
            kind: EntryKind::Operational,
            label: label.into(),
            fragment: ReportFragment {
                energy_j: energy,
                carbon_intensity_g_per_kwh: ci,
                carbon_g: carbon_from_energy(energy, ci),
                server: None,
                profile: None,
            },
        }
    }

    /// The embodied session this entry records, when it carries one.
    pub fn session(&self) -> Option<EmbodiedSession> {
        let f = &self.fragment;
        match (self.kind, f.server, f.profile) {
            (EntryKind::Embodied, Some(server), Some(profile)) => Some(EmbodiedSession {
                timestamp: self.timestamp,
                label: self.label.clone(),
                server,
                profile,
                carbon_intensity: f.carbon_intensity_g_per_kwh,
                energy: f.energy_j,
                carbon: f.carbon_g,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptLine {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LedgerContents {
    pub entries: Vec<LedgerEntry>,
    pub corrupt: Vec<CorruptLine>,
}

fn parse_contents(text: &str) -> LedgerContents {
    let mut out = LedgerContents::default();
    for (i, line) in text.split('\n').enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LedgerEntry>(line) {
            Ok(e) => out.entries.push(e),
            Err(e) => out.corrupt.push(CorruptLine {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    out
}

struct Locked<'a>(&'a File);

impl<'a> Locked<'a> {
    fn new(file: &'a File) -> io::Result<Self> {
        // SAFETY: flock on a descriptor we own for the guard's lifetime.
        if unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) } != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(Self(file))
    }
}

impl Drop for Locked<'_> {
    fn drop(&mut self) {
        // SAFETY: see `Locked::new`.
        unsafe { libc::flock(self.0.as_raw_fd(), libc::LOCK_UN) };
    }
}

/// Appends one entry and returns the number of readable entries afterwards.
///
/// A truncated final line is left in place; the new entry starts on a fresh
/// line after it.
pub fn append_ledger(path: &Path, entry: &LedgerEntry) -> Result<usize, LedgerError> {
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    let file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(io_err(path))?;
    let _lock = Locked::new(&file).map_err(io_err(path))?;
    let mut file = &file;
    let mut existing = String::new();
    file.seek(SeekFrom::Start(0)).map_err(io_err(path))?;
    file.read_to_string(&mut existing).map_err(io_err(path))?;
    if !existing.is_empty() && !existing.ends_with('\n') {
        line.insert(0, '\n');
    }
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))?;
    Ok(parse_contents(&existing).entries.len() + 1)
}

pub fn read_ledger(path: &Path) -> Result<LedgerContents, LedgerError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_contents(&text))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerTotals {
    pub embodied_energy: EnergyQuantity,
    pub embodied_carbon: CarbonQuantity,
    pub operational_energy: EnergyQuantity,
    pub operational_carbon: CarbonQuantity,
}

impl LedgerTotals {
    pub fn total_carbon(&self) -> CarbonQuantity {
        self.embodied_carbon + self.operational_carbon
    }
}

pub fn accumulate_ledger(entries: &[LedgerEntry]) -> LedgerTotals {
    let sum = |kind: EntryKind, f: fn(&ReportFragment) -> f64| {
        stable_sum(
            entries
                .iter()
                .filter(|e| e.kind == kind)
                .map(|e| f(&e.fragment))
                .collect(),
        )
    };
    let energy =
        |kind| EnergyQuantity::from_joules(sum(kind, |f| f.energy_j.joules())).expect("sum");
    let carbon = |kind| CarbonQuantity::from_grams(sum(kind, |f| f.carbon_g.grams())).expect("sum");
    LedgerTotals {
        embodied_energy: energy(EntryKind::Embodied),
        embodied_carbon: carbon(EntryKind::Embodied),
        operational_energy: energy(EntryKind::Operational),
        operational_carbon: carbon(EntryKind::Operational),
    }
}
