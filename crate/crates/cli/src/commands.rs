use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use chrono::{DateTime, FixedOffset, Utc};
use serde_json::{json, Value};

use carbon_ledger::config::{ConfigFile, EnvVars, IntensitySource, Overrides, Settings};
use carbon_ledger::embodied::{server_power, EmbodiedSession, InferenceProfile};
use carbon_ledger::harness::{
    join_energy, read_test_report, run_measured, Correctness, Measured, MetricSelection,
    RunOptions, SustainabilityMetrics,
};
use carbon_ledger::intensity::{parse_intensity_value, GridZone};
use carbon_ledger::ledger::{
    accumulate_ledger, append_ledger, read_ledger, EntryKind, LedgerEntry,
};
use carbon_ledger::operational::{
    parse_energy_log, sum_process_energy, sum_process_energy_in_window, EnergyLog, ParseMode,
    ParseOptions, ProcessFilter,
};
use carbon_ledger::quantities::{round_significant, CarbonIntensityValue, EnergyQuantity};
use carbon_ledger::replication::replicate_paper;
use carbon_ledger::report::{build_report_with, render_report_with, DigestBuilder};
use carbon_ledger::tokens::{scan_corpus, CorpusScan, Direction};

use crate::exit::{self, EmptyResult, UsageError};
use crate::{Cli, Command, IntensityFlags, LedgerAction, LedgerFlags, Metric, OutFormat};

struct Ctx {
    file: Option<ConfigFile>,
    env: EnvVars,
}

impl Ctx {
    fn settings(&self, o: &Overrides) -> Result<Settings> {
        Ok(Settings::resolve(self.file.as_ref(), &self.env, o)?)
    }
}

/// Shortest decimal form after rounding to 12 significant digits.
fn num(v: f64) -> f64 {
    round_significant(v, 12)
}

fn emit(format: OutFormat, rows: &[(&str, Value)]) {
    match format {
        OutFormat::Json => {
            let map: serde_json::Map<String, Value> = rows
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&Value::Object(map)).expect("plain data")
            );
        }
        OutFormat::Text => {
            let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            let mut out = String::new();
            for (k, v) in rows {
                let v = match v {
                    Value::String(s) => s.clone(),
                    Value::Null => "-".into(),
                    other => other.to_string(),
                };
                let _ = writeln!(out, "{k:<width$}  {v}");
            }
            print!("{out}");
        }
    }
}

/// The intensity to apply and a short description of where it came from.
fn resolve_ci(
    settings: &Settings,
    flags: &IntensityFlags,
) -> Result<(CarbonIntensityValue, String)> {
    if let Some(raw) = &flags.ci {
        let ci = parse_intensity_value(raw).map_err(|e| UsageError(format!("--ci: {e}")))?;
        return Ok((ci, "explicit".into()));
    }
    let ci = settings
        .resolver()?
        .resolve(&GridZone::new(&settings.zone))?;
    let source = match &settings.intensity {
        IntensitySource::Remote(rc) => format!("{} via {}", settings.zone, rc.base_url),
        IntensitySource::Tables(_) => settings.zone.clone(),
    };
    Ok((ci, source))
}

fn ledger_path(settings: &Settings) -> Result<PathBuf> {
    settings.ledger_path.clone().ok_or_else(|| {
        UsageError("no ledger file: pass --ledger or set ledger_path in the config".into()).into()
    })
}

fn maybe_append(settings: &Settings, flags: &LedgerFlags, entry: LedgerEntry) -> Result<()> {
    if flags.append {
        let path = ledger_path(settings)?;
        let n = append_ledger(&path, &entry)?;
        eprintln!("appended to {} ({n} entries)", path.display());
    }
    Ok(())
}

fn scan(dir: &Path, include: &[String], direction: Direction) -> Result<CorpusScan> {
    let globs: Vec<&str> = include.iter().map(String::as_str).collect();
    let result = scan_corpus(dir, &globs, direction)?;
    for s in &result.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.reason);
    }
    if result.stats.file_count == 0 {
        return Err(EmptyResult(format!("no files matched under {}", dir.display())).into());
    }
    Ok(result)
}

fn process_filter(patterns: &[String]) -> Result<ProcessFilter> {
    Ok(ProcessFilter::any_of(patterns.iter().map(String::as_str))?)
}

fn load_log(path: &Path, settings: &Settings, lenient: bool) -> Result<EnergyLog> {
    let opts = ParseOptions {
        mode: if lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        },
        columns: settings.columns.clone(),
    };
    let log = parse_energy_log(path, &opts)?;
    for issue in log.skipped() {
        eprintln!(
            "{}: skipped line {}: {}",
            path.display(),
            issue.line,
            issue.message
        );
    }
    Ok(log)
}

pub fn run(cli: Cli) -> Result<u8> {
    let cwd = std::env::current_dir().context("cannot determine working directory")?;
    let ctx = Ctx {
        file: ConfigFile::discover(cli.config.as_deref(), &cwd)?,
        env: EnvVars::from_process(),
    };
    match cli.command {
        Command::Scan {
            root,
            include,
            direction,
            label,
            rates,
            format,
        } => {
            let mut o = Overrides::default();
            rates.apply(&mut o);
            let settings = ctx.settings(&o)?;
            let mut result = scan(&root, &include, direction)?;
            if let Some(l) = label {
                result.stats.label = l;
            }
            let s = &result.stats;
            emit(
                format,
                &[
                    ("corpus", json!(s.label)),
                    ("direction", json!(s.direction.to_string())),
                    ("files", json!(s.file_count)),
                    ("words", json!(s.total_words)),
                    ("tokens", json!(s.total_tokens)),
                    (
                        "cu_seconds",
                        json!(s.consumption(&settings.rates).to_string()),
                    ),
                    ("skipped", json!(result.skipped.len())),
                ],
            );
            Ok(exit::OK)
        }

        Command::EstimateEmbodied {
            tokens,
            scan: dirs,
            include,
            model,
            intensity,
            ledger,
            format,
        } => {
            if tokens.is_empty() && dirs.is_empty() {
                return Err(UsageError("give --tokens or --scan".into()).into());
            }
            let mut o = Overrides::default();
            model.apply(&mut o);
            intensity.apply(&mut o);
            o.ledger_path = ledger.ledger.clone();
            let settings = ctx.settings(&o)?;
            let mut n: u64 = tokens.iter().sum();
            for d in &dirs {
                n += scan(d, &include, Direction::Input)?.stats.total_tokens;
            }
            let (ci, ci_source) = resolve_ci(&settings, &intensity)?;
            let profile = InferenceProfile::new(settings.token_latency_s, n)?;
            let session = EmbodiedSession::estimate(
                ledger.label.clone().unwrap_or_else(|| "embodied".into()),
                ledger.timestamp.unwrap_or_else(Utc::now),
                settings.server,
                profile,
                ci,
            );
            emit(
                format,
                &[
                    ("preset", json!(settings.preset_name)),
                    (
                        "server_power_w",
                        json!(num(server_power(&settings.server).watts())),
                    ),
                    ("token_latency_s", json!(settings.token_latency_s)),
                    ("tokens", json!(n)),
                    ("energy_j", json!(num(session.energy.joules()))),
                    ("energy_kwh", json!(num(session.energy.kwh()))),
                    ("intensity", json!(ci_source)),
                    ("carbon_intensity_g_per_kwh", json!(num(ci.g_per_kwh()))),
                    ("carbon_kg", json!(num(session.carbon.kg()))),
                ],
            );
            maybe_append(&settings, &ledger, LedgerEntry::embodied(&session))?;
            Ok(exit::OK)
        }

        Command::IngestEnergy {
            log,
            process,
            lenient,
            from,
            to,
            canonical_out,
            intensity,
            ledger,
            format,
        } => {
            let mut o = Overrides::default();
            intensity.apply(&mut o);
            o.ledger_path = ledger.ledger.clone();
            let settings = ctx.settings(&o)?;
            let parsed = load_log(&log, &settings, lenient)?;
            if let Some(out) = &canonical_out {
                std::fs::write(out, parsed.to_csv())
                    .with_context(|| format!("cannot write {}", out.display()))?;
            }
            let filter = process_filter(&process)?;
            let (energy, matched) = match (from, to) {
                (Some(a), Some(b)) => (
                    sum_process_energy_in_window(&parsed, &filter, a, b)?,
                    count_matches(&parsed, &filter, Some((a, b))),
                ),
                _ => (
                    sum_process_energy(&parsed, &filter)?,
                    count_matches(&parsed, &filter, None),
                ),
            };
            let (ci, ci_source) = resolve_ci(&settings, &intensity)?;
            let entry = LedgerEntry::operational(
                ledger
                    .label
                    .clone()
                    .unwrap_or_else(|| log.display().to_string()),
                ledger.timestamp.unwrap_or_else(Utc::now),
                energy,
                ci,
            );
            emit(
                format,
                &[
                    ("log", json!(log.display().to_string())),
                    ("process", json!(filter.describe())),
                    ("records", json!(matched)),
                    ("skipped_rows", json!(parsed.skipped().len())),
                    ("energy_j", json!(num(energy.joules()))),
                    ("energy_kj", json!(num(energy.kilojoules()))),
                    ("energy_kwh", json!(num(energy.kwh()))),
                    ("intensity", json!(ci_source)),
                    ("carbon_intensity_g_per_kwh", json!(num(ci.g_per_kwh()))),
                    ("carbon_g", json!(num(entry.fragment.carbon_g.grams()))),
                ],
            );
            maybe_append(&settings, &ledger, entry)?;
            Ok(exit::OK)
        }

        Command::Measure {
            timeout_s,
            workdir,
            passed,
            total,
            test_report,
            flops,
            energy_log,
            process,
            metrics,
            show_output,
            format,
            command,
        } => {
            if !(timeout_s.is_finite() && timeout_s > 0.0) {
                return Err(
                    UsageError(format!("--timeout-s must be positive, got {timeout_s}")).into(),
                );
            }
            let selection = if metrics.is_empty() {
                MetricSelection::all()
            } else {
                MetricSelection {
                    correctness: metrics.contains(&Metric::Correctness),
                    runtime: metrics.contains(&Metric::Runtime),
                    memory: metrics.contains(&Metric::Memory),
                    flops: metrics.contains(&Metric::Flops),
                    energy: metrics.contains(&Metric::Energy),
                }
            };
            let override_correctness = match (passed, total, &test_report) {
                (Some(p), Some(t), _) => Some(Correctness::new(p, t)?),
                (_, _, Some(path)) => Some(read_test_report(path)?),
                _ => None,
            };
            let opts = RunOptions {
                timeout: Duration::from_secs_f64(timeout_s),
                selection,
                inherit_output: show_output,
                ..RunOptions::default()
            };
            let dir = workdir.unwrap_or_else(|| PathBuf::from("."));
            let mut m = run_measured(&command, &dir, &opts)?;
            if selection.correctness {
                if let Some(c) = override_correctness {
                    m = m.with_correctness(c);
                }
            }
            if selection.flops {
                if let Some(f) = flops {
                    m = m.with_flops(f);
                }
            }
            if selection.energy {
                if let Some(path) = &energy_log {
                    let settings = ctx.settings(&Overrides::default())?;
                    let log = load_log(path, &settings, false)?;
                    m = join_energy(m, &log, &process_filter(&process)?)?;
                }
            }
            emit_metrics(format, &m);
            Ok(exit::OK)
        }

        Command::Intensity {
            zone_id,
            list,
            intensity,
            format,
        } => {
            let mut o = Overrides::default();
            intensity.apply(&mut o);
            if zone_id.is_some() {
                o.zone = zone_id;
            }
            let settings = ctx.settings(&o)?;
            if list {
                let resolver = settings.resolver()?;
                let zones = resolver.known_zones();
                if zones.is_empty() {
                    return Err(EmptyResult("the selected provider lists no zones".into()).into());
                }
                let rows: Vec<(&str, Value)> = zones
                    .iter()
                    .map(|z| {
                        let v = resolver
                            .resolve(&GridZone::new(z.as_str()))
                            .map(|c| num(c.g_per_kwh()));
                        (z.as_str(), v.map_or(Value::Null, |v| json!(v)))
                    })
                    .collect();
                emit(format, &rows);
                return Ok(exit::OK);
            }
            let (ci, source) = resolve_ci(&settings, &intensity)?;
            emit(
                format,
                &[
                    ("zone", json!(source)),
                    ("carbon_intensity_g_per_kwh", json!(num(ci.g_per_kwh()))),
                    ("carbon_intensity_kg_per_kwh", json!(num(ci.kg_per_kwh()))),
                ],
            );
            Ok(exit::OK)
        }

        Command::Report {
            embodied_kwh,
            embodied_tokens,
            operational_kwh,
            energy_log,
            process,
            lenient,
            from_ledger,
            ledger,
            note,
            model,
            intensity,
            format,
            rounding,
            output,
        } => {
            let mut o = Overrides::default();
            model.apply(&mut o);
            intensity.apply(&mut o);
            o.ledger_path = ledger;
            o.display_rounding = rounding.map(Into::into);
            let settings = ctx.settings(&o)?;
            let (ci, ci_source) = resolve_ci(&settings, &intensity)?;
            let mut digest = DigestBuilder::new().text("intensity_source", &ci_source);
            let mut notes = Vec::new();

            let (emb, op) = if from_ledger {
                let path = ledger_path(&settings)?;
                let contents = read_ledger(&path)?;
                for c in &contents.corrupt {
                    eprintln!(
                        "{}: line {} unreadable: {}",
                        path.display(),
                        c.line,
                        c.message
                    );
                    notes.push(format!("ledger line {} unreadable and ignored", c.line));
                }
                if contents.entries.is_empty() {
                    return Err(
                        EmptyResult(format!("ledger {} has no entries", path.display())).into(),
                    );
                }
                let totals = accumulate_ledger(&contents.entries);
                let bytes = std::fs::read(&path)
                    .with_context(|| format!("cannot read {}", path.display()))?;
                digest = digest.bytes("ledger", &bytes);
                notes.push(format!(
                    "{} ledger entries; carbon recomputed at {} g/kWh",
                    contents.entries.len(),
                    num(ci.g_per_kwh())
                ));
                (totals.embodied_energy, totals.operational_energy)
            } else {
                let emb = match (embodied_kwh, embodied_tokens) {
                    (Some(kwh), _) => {
                        digest = digest.number("embodied_kwh", kwh);
                        EnergyQuantity::from_kwh(kwh)
                            .map_err(|e| UsageError(format!("--embodied-kwh: {e}")))?
                    }
                    (None, Some(n)) => {
                        let p = InferenceProfile::new(settings.token_latency_s, n)?;
                        digest = digest
                            .number("embodied_tokens", n as f64)
                            .number("p_cpu_w", settings.server.p_cpu().watts())
                            .number("p_mem_w_per_gb", settings.server.p_mem_per_gb())
                            .number("memory_gb", settings.server.memory_gb())
                            .number("token_latency_s", settings.token_latency_s);
                        carbon_ledger::embodied::embodied_energy(&settings.server, &p)
                    }
                    (None, None) => {
                        notes.push("no embodied input; counted as zero".into());
                        EnergyQuantity::ZERO
                    }
                };
                let op = if let Some(kwh) = operational_kwh {
                    digest = digest.number("operational_kwh", kwh);
                    EnergyQuantity::from_kwh(kwh)
                        .map_err(|e| UsageError(format!("--operational-kwh: {e}")))?
                } else if !energy_log.is_empty() {
                    let filter = process_filter(&process)?;
                    digest = digest.text("process", &filter.describe());
                    let mut total = EnergyQuantity::ZERO;
                    for path in &energy_log {
                        let bytes = std::fs::read(path)
                            .with_context(|| format!("cannot read {}", path.display()))?;
                        digest = digest.bytes("energy_log", &bytes);
                        total = total
                            + sum_process_energy(&load_log(path, &settings, lenient)?, &filter)?;
                    }
                    total
                } else {
                    notes.push("no operational input; counted as zero".into());
                    EnergyQuantity::ZERO
                };
                (emb, op)
            };
            for n in &note {
                digest = digest.text("note", n);
            }
            notes.extend(note);
            let mut report = build_report_with(emb, op, ci, digest);
            report.notes = notes;
            let text = render_report_with(&report, format, settings.display_rounding);
            match output {
                Some(path) => std::fs::write(&path, text)
                    .with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(exit::OK)
        }

        Command::ReplicatePaper => {
            let r = replicate_paper();
            print!("{}", r.render());
            Ok(if r.passed() { exit::OK } else { exit::INPUT })
        }

        Command::Ledger { action } => {
            let (path, format, totals) = match action {
                LedgerAction::Show { ledger, format } => (ledger, format, false),
                LedgerAction::Totals { ledger, format } => (ledger, format, true),
            };
            let o = Overrides {
                ledger_path: path,
                ..Overrides::default()
            };
            let settings = ctx.settings(&o)?;
            let path = ledger_path(&settings)?;
            let contents = read_ledger(&path)?;
            for c in &contents.corrupt {
                eprintln!(
                    "{}: line {} unreadable: {}",
                    path.display(),
                    c.line,
                    c.message
                );
            }
            if contents.entries.is_empty() {
                return Err(
                    EmptyResult(format!("ledger {} has no entries", path.display())).into(),
                );
            }
            if totals {
                let t = accumulate_ledger(&contents.entries);
                emit(
                    format,
                    &[
                        ("entries", json!(contents.entries.len())),
                        ("embodied_energy_kwh", json!(num(t.embodied_energy.kwh()))),
                        ("embodied_carbon_kg", json!(num(t.embodied_carbon.kg()))),
                        (
                            "operational_energy_kwh",
                            json!(num(t.operational_energy.kwh())),
                        ),
                        (
                            "operational_carbon_kg",
                            json!(num(t.operational_carbon.kg())),
                        ),
                        ("total_carbon_kg", json!(num(t.total_carbon().kg()))),
                    ],
                );
            } else {
                match format {
                    OutFormat::Json => {
                        let v = serde_json::to_value(&contents.entries)?;
                        println!("{}", serde_json::to_string_pretty(&v)?);
                    }
                    OutFormat::Text => {
                        for e in &contents.entries {
                            let kind = match e.kind {
                                EntryKind::Embodied => "embodied",
                                EntryKind::Operational => "operational",
                            };
                            println!(
                                "{}  {kind:<11}  {:>14} kWh  {:>14} kgCO2e  {}",
                                e.timestamp
                                    .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                                num(e.fragment.energy_j.kwh()),
                                num(e.fragment.carbon_g.kg()),
                                e.label
                            );
                        }
                    }
                }
            }
            Ok(exit::OK)
        }
    }
}

fn count_matches(
    log: &EnergyLog,
    f: &ProcessFilter,
    window: Option<(DateTime<FixedOffset>, DateTime<FixedOffset>)>,
) -> usize {
    log.records()
        .iter()
        .filter(|r| f.matches(&r.process_name))
        .filter(|r| window.is_none_or(|(a, b)| r.timestamp >= a && r.interval_start() <= b))
        .count()
}

fn emit_metrics(format: OutFormat, m: &SustainabilityMetrics) {
    fn show<T>(v: &Measured<T>, f: impl Fn(&T) -> Value) -> Value {
        match v {
            Measured::Measured(x) => f(x),
            Measured::NotMeasured => json!("not measured"),
        }
    }
    let mut rows = vec![
        (
            "correctness",
            show(&m.correctness, |c| {
                json!(format!("{}/{}", c.passed(), c.total()))
            }),
        ),
        (
            "pass_rate",
            show(&m.correctness, |c| {
                json!(num(*c.rate().numer() as f64 / *c.rate().denom() as f64))
            }),
        ),
        ("runtime_s", show(&m.runtime_s, |r| json!(num(*r)))),
        (
            "peak_memory_bytes",
            show(&m.peak_memory_bytes, |b| json!(b)),
        ),
        ("flops", show(&m.flops, |f| json!(f))),
        ("energy_j", show(&m.energy, |e| json!(num(e.joules())))),
        ("exit_code", m.exit_code.map_or(Value::Null, |c| json!(c))),
        ("timed_out", json!(m.timed_out)),
    ];
    if format == OutFormat::Json {
        rows.push(("notes", json!(m.notes)));
        emit(format, &rows);
    } else {
        emit(format, &rows);
        for n in &m.notes {
            println!("note: {n}");
        }
    }
}
