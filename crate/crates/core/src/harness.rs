//! Run a command under measurement and record the sustainability metrics of
//! the code it exercises: correctness, wall-clock runtime, peak resident
//! memory, FLOPs and operational energy.
//!
//! FLOPs are never counted here; callers supply them. Energy is not sampled
//! either: it is joined afterwards from an energy-monitor log covering the
//! run's time window (see [`join_energy`]).

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operational::{sum_process_energy_in_window, EnergyLog, LogError, ProcessFilter};
use crate::quantities::EnergyQuantity;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("command is empty")]
    EmptyCommand,
    #[error("working directory {0} does not exist")]
    Workdir(PathBuf),
    #[error("failed to launch {program:?}: {source}")]
    Launch {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed waiting for child: {0}")]
    Wait(#[source] std::io::Error),
    #[error("passed count {passed} exceeds total {total}")]
    PassedExceedsTotal { passed: u64, total: u64 },
    #[error("total test count must be positive")]
    ZeroTotal,
    #[error("no metric selected")]
    NothingSelected,
    #[error("timeout must be positive")]
    Timeout,
    #[error("cannot read test report {path}: {source}")]
    ReportIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognised test report {path}: expected `passed,total` or JUnit XML")]
    ReportFormat { path: PathBuf },
}

/// A metric value or an explicit marker that it was not measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "value", rename_all = "snake_case")]
pub enum Measured<T> {
    #[default]
    NotMeasured,
    Measured(T),
}

impl<T> Measured<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Measured::Measured(v) => Some(v),
            Measured::NotMeasured => None,
        }
    }

    pub fn is_measured(&self) -> bool {
        matches!(self, Measured::Measured(_))
    }
}

/// Passed and total test counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correctness {
    passed: u64,
    total: u64,
}

impl Correctness {
    pub fn new(passed: u64, total: u64) -> Result<Self, HarnessError> {
        pass_rate(passed, total)?;
        Ok(Self { passed, total })
    }

    pub fn passed(&self) -> u64 {
        self.passed
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Exact pass fraction, reduced.
    pub fn rate(&self) -> Ratio<u64> {
        Ratio::new(self.passed, self.total)
    }
}

pub fn pass_rate(passed: u64, total: u64) -> Result<Ratio<u64>, HarnessError> {
    if total == 0 {
        return Err(HarnessError::ZeroTotal);
    }
    if passed > total {
        return Err(HarnessError::PassedExceedsTotal { passed, total });
    }
    Ok(Ratio::new(passed, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub correctness: bool,
    pub runtime: bool,
    pub memory: bool,
    pub flops: bool,
    pub energy: bool,
}

impl MetricSelection {
    pub fn all() -> Self {
        Self {
            correctness: true,
            runtime: true,
            memory: true,
            flops: true,
            energy: true,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.correctness || self.runtime || self.memory || self.flops || self.energy {
            Ok(())
        } else {
            Err(HarnessError::NothingSelected)
        }
    }
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SustainabilityMetrics {
    pub correctness: Measured<Correctness>,
    pub runtime_s: Measured<f64>,
    pub peak_memory_bytes: Measured<u64>,
    pub flops: Measured<u64>,
    pub energy: Measured<EnergyQuantity>,
    pub selection: MetricSelection,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl SustainabilityMetrics {
    /// Metrics with nothing measured yet.
    pub fn empty(selection: MetricSelection) -> Self {
        Self {
            correctness: Measured::NotMeasured,
            runtime_s: Measured::NotMeasured,
            peak_memory_bytes: Measured::NotMeasured,
            flops: Measured::NotMeasured,
            energy: Measured::NotMeasured,
            selection,
            exit_code: None,
            timed_out: false,
            started_at: None,
            finished_at: None,
            notes: Vec::new(),
        }
    }

    /// Replace exit-status correctness with counts from a test report.
    pub fn with_correctness(mut self, c: Correctness) -> Self {
        if self.selection.correctness {
            self.correctness = Measured::Measured(c);
        }
        self
    }

    pub fn with_flops(mut self, flops: u64) -> Self {
        if self.selection.flops {
            self.flops = Measured::Measured(flops);
        }
        self
    }
}

/// Set the energy metric. Replacing an earlier value leaves a note.
pub fn attach_energy(mut m: SustainabilityMetrics, e: EnergyQuantity) -> SustainabilityMetrics {
    if let Measured::Measured(old) = m.energy {
        m.notes.push(format!(
            "energy replaced: {} J -> {} J",
            old.joules(),
            e.joules()
        ));
    }
    m.energy = Measured::Measured(e);
    m
}

/// Attach the energy of the filtered process over the run's time window.
pub fn join_energy(
    m: SustainabilityMetrics,
    log: &EnergyLog,
    filter: &ProcessFilter,
) -> Result<SustainabilityMetrics, LogError> {
    let energy = match (m.started_at, m.finished_at) {
        (Some(start), Some(end)) => {
            sum_process_energy_in_window(log, filter, start.fixed_offset(), end.fixed_offset())?
        }
        _ => crate::operational::sum_process_energy(log, filter)?,
    };
    let mut m = attach_energy(m, energy);
    m.notes.push(format!(
        "energy from {} filtered by {}",
        log.source_path(),
        filter.describe()
    ));
    Ok(m)
}

/// Read pass/total counts from a `passed,total` file or JUnit XML.
pub fn read_test_report(path: &Path) -> Result<Correctness, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ReportIo {
        path: path.to_path_buf(),
        source,
    })?;
    let format_err = || HarnessError::ReportFormat {
        path: path.to_path_buf(),
    };
    let pair = Regex::new(r"^\s*(\d+)\s*[,/ ]\s*(\d+)\s*$").expect("valid regex");
    if let Some(c) = pair.captures(&text) {
        let n = |i: usize| c[i].parse::<u64>().map_err(|_| format_err());
        return Correctness::new(n(1)?, n(2)?);
    }
    let (passed, total) = parse_junit(&text).ok_or_else(format_err)?;
    Correctness::new(passed, total)
}

fn parse_junit(xml: &str) -> Option<(u64, u64)> {
    let tag = Regex::new(r"<(testsuites|testsuite)\b([^>]*)>").expect("valid regex");
    let attr = |attrs: &str, name: &str| -> u64 {
        Regex::new(&format!(r#"\b{name}\s*=\s*["'](\d+)["']"#))
            .expect("valid regex")
            .captures(attrs)
            .and_then(|c| c[1].parse().ok())
            .unwrap_or(0)
    };
    let counts = |attrs: &str| {
        let tests = attr(attrs, "tests");
        let skipped = attr(attrs, "skipped");
        let bad = attr(attrs, "failures") + attr(attrs, "errors");
        let total = tests.saturating_sub(skipped);
        (total.saturating_sub(bad), total)
    };
    let tags: Vec<_> = tag.captures_iter(xml).collect();
    if tags.is_empty() {
        return None;
    }
    // an aggregating root element carries the totals already
    if let Some(root) = tags
        .iter()
        .find(|c| &c[1] == "testsuites" && c[2].contains("tests"))
    {
        return Some(counts(&root[2]));
    }
    Some(
        tags.iter()
            .filter(|c| &c[1] == "testsuite")
            .map(|c| counts(&c[2]))
            .fold((0, 0), |(p, t), (dp, dt)| (p + dp, t + dt)),
    )
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub timeout: Duration,
    pub selection: MetricSelection,
    pub sample_interval: Duration,
    /// Pass the child's stdout/stderr through instead of discarding them.
    pub inherit_output: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(3600),
            selection: MetricSelection::all(),
            sample_interval: Duration::from_millis(50),
            inherit_output: false,
        }
    }
}

struct Reaped {
    status: libc::c_int,
    max_rss_bytes: u64,
}

fn rusage_max_rss_bytes(ru: &libc::rusage) -> u64 {
    let v = ru.ru_maxrss.max(0) as u64;
    if cfg!(target_os = "macos") {
        v
    } else {
        v * 1024
    }
}

fn wait_child(pid: libc::pid_t, block: bool) -> Result<Option<Reaped>, HarnessError> {
    let mut status: libc::c_int = 0;
    // SAFETY: zeroed rusage is a valid value; wait4 writes into both out-params.
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    let flags = if block { 0 } else { libc::WNOHANG };
    loop {
        // SAFETY: pid is our direct child; pointers are to live locals.
        let r = unsafe { libc::wait4(pid, &mut status, flags, &mut ru) };
        if r == pid {
            return Ok(Some(Reaped {
                status,
                max_rss_bytes: rusage_max_rss_bytes(&ru),
            }));
        }
        if r == 0 {
            return Ok(None);
        }
        let err = std::io::Error::last_os_error();
        if err.kind() != std::io::ErrorKind::Interrupted {
            return Err(HarnessError::Wait(err));
        }
    }
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: plain syscall; ESRCH when the group is already gone is fine.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

#[cfg(target_os = "linux")]
mod proc_tree {
    //! Resident memory of a process and all its descendants, from /proc.

    use std::collections::HashMap;

    struct Stat {
        ppid: i32,
        rss_pages: u64,
    }

    fn read_stat(pid: i32) -> Option<Stat> {
        let text = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
        // comm may contain spaces and parens; fields resume after the last ')'
        let rest = &text[text.rfind(')')? + 2..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        // rest starts at field 3 (state); ppid is field 4, rss field 24
        Some(Stat {
            ppid: fields.get(1)?.parse().ok()?,
            rss_pages: fields.get(21)?.parse().ok()?,
        })
    }

    pub fn tree_rss_bytes(root: i32) -> u64 {
        let Ok(dir) = std::fs::read_dir("/proc") else {
            return 0;
        };
        let mut stats: HashMap<i32, Stat> = HashMap::new();
        for entry in dir.flatten() {
            if let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse().ok()) {
                if let Some(s) = read_stat(pid) {
                    stats.insert(pid, s);
                }
            }
        }
        let mut children: HashMap<i32, Vec<i32>> = HashMap::new();
        for (pid, s) in &stats {
            children.entry(s.ppid).or_default().push(*pid);
        }
        let mut total_pages = 0;
        let mut stack = vec![root];
        while let Some(pid) = stack.pop() {
            if let Some(s) = stats.get(&pid) {
                total_pages += s.rss_pages;
            }
            if let Some(kids) = children.get(&pid) {
                stack.extend(kids);
            }
        }
        // SAFETY: sysconf has no memory-safety preconditions.
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as u64;
        total_pages * page
    }

    /// Processes in process group `pgid` that are not zombies.
    pub fn live_group_members(pgid: i32) -> Vec<i32> {
        let Ok(dir) = std::fs::read_dir("/proc") else {
            return Vec::new();
        };
        dir.flatten()
            .filter_map(|e| e.file_name().to_str()?.parse::<i32>().ok())
            .filter(|pid| {
                let Ok(text) = std::fs::read_to_string(format!("/proc/{pid}/stat")) else {
                    return false;
                };
                let Some(close) = text.rfind(')') else {
                    return false;
                };
                let fields: Vec<&str> = text[close + 2..].split_whitespace().collect();
                // state is field 3, pgrp field 5
                fields.first() != Some(&"Z")
                    && fields.get(2).and_then(|g| g.parse::<i32>().ok()) == Some(pgid)
            })
            .collect()
    }
}

#[cfg(target_os = "linux")]
pub use proc_tree::live_group_members;

#[cfg(target_os = "linux")]
fn tree_rss_bytes(pid: i32) -> u64 {
    proc_tree::tree_rss_bytes(pid)
}

#[cfg(not(target_os = "linux"))]
fn tree_rss_bytes(_pid: i32) -> u64 {
    0
}

/// Spawn `command` in `workdir`, wait for it (or kill it at the timeout) and
/// return the selected metrics. The child runs in its own process group,
/// which is killed before returning so no descendant outlives the call.
pub fn run_measured(
    command: &[String],
    workdir: &Path,
    opts: &RunOptions,
) -> Result<SustainabilityMetrics, HarnessError> {
    use std::os::unix::process::CommandExt;

    opts.selection.validate()?;
    let (program, args) = command.split_first().ok_or(HarnessError::EmptyCommand)?;
    if !workdir.is_dir() {
        return Err(HarnessError::Workdir(workdir.to_path_buf()));
    }
    if opts.timeout.is_zero() {
        return Err(HarnessError::Timeout);
    }

    let output = || {
        if opts.inherit_output {
            Stdio::inherit()
        } else {
            Stdio::null()
        }
    };
    let started_at = Utc::now();
    let start = Instant::now();
    let child = Command::new(program)
        .args(args)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(output())
        .stderr(output())
        .process_group(0)
        .spawn()
        .map_err(|source| HarnessError::Launch {
            program: program.clone(),
            source,
        })?;
    let pid = child.id() as libc::pid_t;

    let stop = Arc::new(AtomicBool::new(false));
    let peak = Arc::new(AtomicU64::new(0));
    let sampler = opts.selection.memory.then(|| {
        let (stop, peak, every) = (stop.clone(), peak.clone(), opts.sample_interval);
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                peak.fetch_max(tree_rss_bytes(pid), Ordering::Relaxed);
                std::thread::sleep(every);
            }
        })
    });

    let mut timed_out = false;
    let reaped = loop {
        if let Some(r) = wait_child(pid, false)? {
            break r;
        }
        if start.elapsed() >= opts.timeout {
            timed_out = true;
            kill_group(pid);
            break wait_child(pid, true)?.expect("blocking wait returns the child");
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let runtime = start.elapsed();
    let finished_at = Utc::now();
    // leftover background descendants share the group
    kill_group(pid);
    stop.store(true, Ordering::Relaxed);
    if let Some(handle) = sampler {
        let _ = handle.join();
    }
    drop(child);

    let exit_code = libc::WIFEXITED(reaped.status).then(|| libc::WEXITSTATUS(reaped.status));
    let sel = opts.selection;
    let mut m = SustainabilityMetrics::empty(sel);
    m.exit_code = exit_code;
    m.timed_out = timed_out;
    m.started_at = Some(started_at);
    m.finished_at = Some(finished_at);
    if sel.correctness {
        let passed = u64::from(!timed_out && exit_code == Some(0));
        m.correctness = Measured::Measured(Correctness { passed, total: 1 });
    }
    if sel.runtime {
        m.runtime_s = Measured::Measured(runtime.as_secs_f64());
    }
    if sel.memory {
        let sampled = peak.load(Ordering::Relaxed);
        m.peak_memory_bytes = Measured::Measured(sampled.max(reaped.max_rss_bytes));
    }
    if timed_out {
        m.notes.push(format!(
            "timed out after {:.3} s; metrics are partial",
            runtime.as_secs_f64()
        ));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn run(cmd: &[String], opts: &RunOptions) -> SustainabilityMetrics {
        run_measured(cmd, Path::new("."), opts).unwrap()
    }

    /// Non-zombie processes whose command line contains `marker`.
    fn live_with_marker(marker: &str) -> Vec<String> {
        std::fs::read_dir("/proc")
            .unwrap()
            .flatten()
            .filter_map(|e| {
                let dir = e.path();
                let cmd = std::fs::read(dir.join("cmdline")).ok()?;
                let cmd = String::from_utf8_lossy(&cmd).replace('\0', " ");
                let stat = std::fs::read_to_string(dir.join("stat")).ok()?;
                let state = stat[stat.rfind(')')? + 2..].chars().next()?;
                (cmd.contains(marker) && state != 'Z').then_some(cmd)
            })
            .collect()
    }

    #[test]
    fn pass_rate_examples() {
        assert_eq!(pass_rate(25, 50).unwrap(), Ratio::new(1, 2));
        assert_eq!(pass_rate(149, 149).unwrap(), Ratio::from_integer(1));
        assert_eq!(pass_rate(0, 1).unwrap(), Ratio::from_integer(0));
        assert!(matches!(
            pass_rate(3, 2),
            Err(HarnessError::PassedExceedsTotal {
                passed: 3,
                total: 2
            })
        ));
        assert!(matches!(pass_rate(0, 0), Err(HarnessError::ZeroTotal)));
    }

    #[test]
    fn sleep_runtime_and_success() {
        let m = run(&sh("sleep 0.2"), &RunOptions::default());
        let t = *m.runtime_s.value().unwrap();
        assert!((0.2..=5.2).contains(&t), "{t}");
        assert_eq!(
            m.correctness,
            Measured::Measured(Correctness::new(1, 1).unwrap())
        );
        assert_eq!(m.exit_code, Some(0));
        assert!(m.peak_memory_bytes.is_measured());
        assert!(!m.flops.is_measured() && !m.energy.is_measured());
    }

    #[test]
    fn nonzero_exit_fails() {
        let m = run(&sh("exit 3"), &RunOptions::default());
        assert_eq!(
            m.correctness,
            Measured::Measured(Correctness::new(0, 1).unwrap())
        );
        assert_eq!(m.exit_code, Some(3));
    }

    #[test]
    fn disabled_metrics_are_not_measured() {
        let opts = RunOptions {
            selection: MetricSelection {
                correctness: false,
                runtime: true,
                memory: false,
                flops: false,
                energy: false,
            },
            ..RunOptions::default()
        };
        let m = run(&sh("true"), &opts)
            .with_flops(10)
            .with_correctness(Correctness::new(1, 1).unwrap());
        assert!(m.runtime_s.is_measured());
        assert_eq!(m.correctness, Measured::NotMeasured);
        assert_eq!(m.peak_memory_bytes, Measured::NotMeasured);
        assert_eq!(m.flops, Measured::NotMeasured);
        let none = RunOptions {
            selection: MetricSelection {
                correctness: false,
                runtime: false,
                memory: false,
                flops: false,
                energy: false,
            },
            ..RunOptions::default()
        };
        assert!(matches!(
            run_measured(&sh("true"), Path::new("."), &none),
            Err(HarnessError::NothingSelected)
        ));
    }

    #[test]
    fn launch_errors() {
        assert!(matches!(
            run_measured(&[], Path::new("."), &RunOptions::default()),
            Err(HarnessError::EmptyCommand)
        ));
        assert!(matches!(
            run_measured(
                &["/no/such/binary".into()],
                Path::new("."),
                &RunOptions::default()
            ),
            Err(HarnessError::Launch { .. })
        ));
        assert!(matches!(
            run_measured(
                &sh("true"),
                Path::new("/no/such/dir"),
                &RunOptions::default()
            ),
            Err(HarnessError::Workdir(_))
        ));
    }

    #[test]
    fn timeout_kills_the_tree() {
        let opts = RunOptions {
            timeout: Duration::from_millis(300),
            ..RunOptions::default()
        };
        let marker = format!("30.{}", std::process::id());
        let m = run(&sh(&format!("sleep {marker} & sleep 30; wait")), &opts);
        assert!(m.timed_out);
        let live = live_with_marker(&format!("sleep {marker}"));
        assert!(live.is_empty(), "{live:?}");
        assert_eq!(m.correctness.value().unwrap().passed(), 0);
        assert!(*m.runtime_s.value().unwrap() < 5.0);
        assert!(m.notes.iter().any(|n| n.contains("timed out")));
    }

    #[test]
    fn energy_attachment() {
        let m = SustainabilityMetrics::empty(MetricSelection::all());
        let e = EnergyQuantity::from_kilojoules(0.446).unwrap();
        let m = attach_energy(m, e);
        assert_eq!(m.energy, Measured::Measured(e));
        assert!(m.notes.is_empty());
        let m = attach_energy(m, EnergyQuantity::ZERO);
        assert_eq!(m.energy, Measured::Measured(EnergyQuantity::ZERO));
        assert_eq!(m.notes.len(), 1);
        assert_ne!(m.energy, Measured::NotMeasured);
    }

    #[test]
    fn test_reports() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r");
        std::fs::write(&p, "25,50\n").unwrap();
        assert_eq!(
            read_test_report(&p).unwrap(),
            Correctness::new(25, 50).unwrap()
        );
        std::fs::write(
            &p,
            r#"<?xml version="1.0"?>
<testsuites>
  <testsuite name="a" tests="30" failures="5" errors="1" skipped="4"></testsuite>
  <testsuite name="b" tests="20" failures="0" errors="0"></testsuite>
</testsuites>"#,
        )
        .unwrap();
        assert_eq!(
            read_test_report(&p).unwrap(),
            Correctness::new(40, 46).unwrap()
        );
        std::fs::write(&p, r#"<testsuites tests="50" failures="25"><testsuite tests="50" failures="25"/></testsuites>"#)
            .unwrap();
        assert_eq!(
            read_test_report(&p).unwrap(),
            Correctness::new(25, 50).unwrap()
        );
        std::fs::write(&p, "garbage").unwrap();
        assert!(matches!(
            read_test_report(&p),
            Err(HarnessError::ReportFormat { .. })
        ));
        std::fs::write(&p, "5,4").unwrap();
        assert!(matches!(
            read_test_report(&p),
            Err(HarnessError::PassedExceedsTotal { .. })
        ));
    }

    #[test]
    fn metrics_serialize_states() {
        let m = SustainabilityMetrics::empty(MetricSelection::all()).with_flops(0);
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(
            v["flops"],
            serde_json::json!({"state": "measured", "value": 0})
        );
        assert_eq!(v["energy"], serde_json::json!({"state": "not_measured"}));
        let back: SustainabilityMetrics = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
