//! `carbon-ledger`: estimate the embodied and operational carbon of
//! LLM-assisted code.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, FixedOffset, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use carbon_ledger::config::Overrides;
use carbon_ledger::quantities::DisplayRounding;
use carbon_ledger::report::ReportFormat;
use carbon_ledger::tokens::Direction;

#[derive(Debug, Parser)]
#[command(name = "carbon-ledger", version, about, propagate_version = true)]
struct Cli {
    /// JSON config file [default: ./carbon-ledger.json when present]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum OutFormat {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Rounding {
    Truncate,
    HalfUp,
}

impl From<Rounding> for DisplayRounding {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Truncate => DisplayRounding::Truncate,
            Rounding::HalfUp => DisplayRounding::HalfUp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Correctness,
    Runtime,
    Memory,
    Flops,
    Energy,
}

#[derive(Debug, Clone, Default, Args)]
struct ModelFlags {
    /// Named server/latency parameter set
    #[arg(long)]
    preset: Option<String>,
    /// CPU power draw in watts
    #[arg(long, value_name = "W")]
    p_cpu_w: Option<f64>,
    /// Memory power draw per GB in watts
    #[arg(long, value_name = "W")]
    p_mem_w_per_gb: Option<f64>,
    /// Memory in use, GB
    #[arg(long, value_name = "GB")]
    memory_gb: Option<f64>,
    /// Seconds per processed token
    #[arg(long, value_name = "S")]
    token_latency_s: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
struct RateFlags {
    /// CU-seconds per input token
    #[arg(long, value_name = "S")]
    input_rate: Option<f64>,
    /// CU-seconds per output token
    #[arg(long, value_name = "S")]
    output_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
struct IntensityFlags {
    /// Grid zone to look up [env: CARBON_LEDGER_CI_ZONE]
    #[arg(long)]
    zone: Option<String>,
    /// Zone table CSV (zone_id,g_per_kwh); repeatable, earlier files win
    #[arg(long = "intensity-table", value_name = "FILE")]
    intensity_tables: Vec<PathBuf>,
    /// Remote intensity endpoint base URL [env: CARBON_LEDGER_CI_URL]
    #[arg(long, value_name = "URL")]
    ci_url: Option<String>,
    /// Use this intensity directly, e.g. `172` or `0.172 kg/kWh`
    #[arg(long, value_name = "VALUE", conflicts_with_all = ["zone", "ci_url"])]
    ci: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
struct LedgerFlags {
    /// Append the result to the ledger
    #[arg(long)]
    append: bool,
    /// Ledger file (JSON Lines)
    #[arg(long, value_name = "FILE")]
    ledger: Option<PathBuf>,
    /// Label stored with the ledger entry
    #[arg(long)]
    label: Option<String>,
    /// Timestamp stored with the ledger entry [default: now]
    #[arg(long, value_name = "RFC3339")]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count words, tokens and CU-seconds in a directory of prompt or output files
    Scan {
        root: PathBuf,
        /// Glob of files to include; matches file names, or relative paths when it contains '/'
        #[arg(long, value_name = "GLOB")]
        include: Vec<String>,
        #[arg(long, default_value = "input")]
        direction: Direction,
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        rates: RateFlags,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
    },
    /// Estimate inference energy and carbon for a token count
    EstimateEmbodied {
        /// Tokens processed; repeatable, summed
        #[arg(long, value_name = "N")]
        tokens: Vec<u64>,
        /// Directory whose estimated tokens are added; repeatable
        #[arg(long, value_name = "DIR")]
        scan: Vec<PathBuf>,
        /// Include glob for --scan directories
        #[arg(long, value_name = "GLOB")]
        include: Vec<String>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        intensity: IntensityFlags,
        #[command(flatten)]
        ledger: LedgerFlags,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
    },
    /// Sum a process's energy from an energy-monitor CSV log
    IngestEnergy {
        log: PathBuf,
        /// Process name, or glob with * or ?; repeatable, matches any
        #[arg(long, required = true)]
        process: Vec<String>,
        /// Skip malformed rows instead of failing
        #[arg(long)]
        lenient: bool,
        /// Only records overlapping this window
        #[arg(long, value_name = "RFC3339", requires = "to")]
        from: Option<DateTime<FixedOffset>>,
        #[arg(long, value_name = "RFC3339", requires = "from")]
        to: Option<DateTime<FixedOffset>>,
        /// Also write the parsed log in canonical CSV form
        #[arg(long, value_name = "FILE")]
        canonical_out: Option<PathBuf>,
        #[command(flatten)]
        intensity: IntensityFlags,
        #[command(flatten)]
        ledger: LedgerFlags,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
    },
    /// Run a command and record correctness, runtime, peak memory, FLOPs and energy
    Measure {
        /// Kill the command after this many seconds
        #[arg(long, default_value_t = 3600.0, value_name = "S")]
        timeout_s: f64,
        #[arg(long, value_name = "DIR")]
        workdir: Option<PathBuf>,
        /// Passed test count (with --total) instead of exit-status correctness
        #[arg(long, requires = "total", conflicts_with = "test_report")]
        passed: Option<u64>,
        #[arg(long, requires = "passed")]
        total: Option<u64>,
        /// `passed,total` file or JUnit XML report
        #[arg(long, value_name = "FILE")]
        test_report: Option<PathBuf>,
        /// Externally counted floating-point operations
        #[arg(long)]
        flops: Option<u64>,
        /// Energy log to join over the run's time window
        #[arg(long, value_name = "FILE", requires = "process")]
        energy_log: Option<PathBuf>,
        #[arg(long, requires = "energy_log")]
        process: Vec<String>,
        /// Metrics to record [default: all]
        #[arg(long, value_enum, value_delimiter = ',')]
        metrics: Vec<Metric>,
        /// Pass the command's output through
        #[arg(long)]
        show_output: bool,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
        #[arg(last = true, required = true, value_name = "COMMAND")]
        command: Vec<String>,
    },
    /// Look up a grid carbon intensity
    Intensity {
        #[arg(value_name = "ZONE")]
        zone_id: Option<String>,
        /// List known zones
        #[arg(long, conflicts_with_all = ["zone_id", "zone"])]
        list: bool,
        #[command(flatten)]
        intensity: IntensityFlags,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
    },
    /// Combine embodied and operational energy into a footprint report
    Report {
        #[arg(long, value_name = "KWH", conflicts_with = "embodied_tokens")]
        embodied_kwh: Option<f64>,
        /// Compute embodied energy from this token count
        #[arg(long, value_name = "N")]
        embodied_tokens: Option<u64>,
        #[arg(long, value_name = "KWH", conflicts_with = "energy_log")]
        operational_kwh: Option<f64>,
        /// Energy log(s) for operational energy; repeatable
        #[arg(long, value_name = "FILE", requires = "process")]
        energy_log: Vec<PathBuf>,
        #[arg(long)]
        process: Vec<String>,
        #[arg(long)]
        lenient: bool,
        /// Take both energies from the ledger totals
        #[arg(
            long,
            conflicts_with_all = ["embodied_kwh", "embodied_tokens", "operational_kwh", "energy_log"]
        )]
        from_ledger: bool,
        #[arg(long, value_name = "FILE")]
        ledger: Option<PathBuf>,
        /// Free-text note carried into the report; repeatable
        #[arg(long)]
        note: Vec<String>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        intensity: IntensityFlags,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long, value_enum)]
        rounding: Option<Rounding>,
        /// Write the report here instead of stdout
        #[arg(long, short, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Recompute the case-study figures and compare with the published values
    ReplicatePaper,
    /// Inspect the session ledger
    Ledger {
        #[command(subcommand)]
        action: LedgerAction,
    },
}

#[derive(Debug, Subcommand)]
enum LedgerAction {
    /// List entries
    Show {
        #[arg(long, value_name = "FILE")]
        ledger: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
    },
    /// Sum entries by kind
    Totals {
        #[arg(long, value_name = "FILE")]
        ledger: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: OutFormat,
    },
}

impl ModelFlags {
    fn apply(&self, o: &mut Overrides) {
        o.preset = self.preset.clone();
        o.p_cpu_w = self.p_cpu_w;
        o.p_mem_w_per_gb = self.p_mem_w_per_gb;
        o.memory_gb = self.memory_gb;
        o.token_latency_s = self.token_latency_s;
    }
}

impl RateFlags {
    fn apply(&self, o: &mut Overrides) {
        o.input_rate = self.input_rate;
        o.output_rate = self.output_rate;
    }
}

impl IntensityFlags {
    fn apply(&self, o: &mut Overrides) {
        o.zone = self.zone.clone();
        o.intensity_tables = self.intensity_tables.clone();
        o.remote_url = self.ci_url.clone();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
