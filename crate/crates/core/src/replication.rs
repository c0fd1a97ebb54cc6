//! Reproduces the published case-study figures from their stated inputs.
//!
//! Every figure becomes one check line:
//!
//! * `PASS` reproduced at the published display precision (token estimates
//!   within one token),
//! * `WARN` a documented discrepancy within 5% of the recomputed value,
//! * `INFO` a published figure that no stated input explains; shown, not
//!   judged,
//! * `FAIL` anything else.

use std::fmt::{self, Write as _};

use num_rational::Ratio;

use crate::embodied::{embodied_energy, server_power, INTEL_BLOG_2023};
use crate::harness::pass_rate;
use crate::intensity::{lookup_intensity, GridZone, IntensityProvider};
use crate::operational::{parse_energy_log_str, sum_process_energy, ParseOptions, ProcessFilter};
use crate::quantities::{format_fixed, CarbonIntensityValue, DisplayRounding, EnergyQuantity};
use crate::report::{build_report, render_report, summary_rows, FootprintReport, ReportFormat};
use crate::tokens::{consumption_seconds, words_to_tokens, ConsumptionRateModel, Direction};

pub const FRONTEND_LOG_CSV: &str = include_str!("../fixtures/frontend_e3.csv");
pub const BACKEND_LOG_CSV: &str = include_str!("../fixtures/backend_e3.csv");
pub const FRONTEND_PROCESS: &str = "node.exe";
pub const BACKEND_PROCESS: &str = "java.exe";
pub const CASE_STUDY_ZONE: &str = "DE-CASE-STUDY";

/// Published relative tolerance for a `WARN`.
pub const WARN_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckStatus {
    Pass,
    Warn,
    Info,
    Fail,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pass => "PASS",
            Self::Warn => "WARN",
            Self::Info => "INFO",
            Self::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub status: CheckStatus,
    pub id: String,
    pub message: String,
}

/// One column of the file-operations table.
#[derive(Debug, Clone, Copy)]
pub struct FileOpsColumn {
    pub name: &'static str,
    pub direction: Direction,
    pub files: u64,
    pub words_per_file: u64,
    pub tokens_per_file: u64,
    pub cr_per_file: u64,
    pub cr: u64,
    pub tokens: u64,
}

pub const FILE_OPS: [FileOpsColumn; 4] = [
    FileOpsColumn {
        name: "input-frontend",
        direction: Direction::Input,
        files: 192,
        words_per_file: 177,
        tokens_per_file: 235,
        cr_per_file: 94,
        cr: 18073,
        tokens: 45184,
    },
    FileOpsColumn {
        name: "output-frontend",
        direction: Direction::Output,
        files: 149,
        words_per_file: 80,
        tokens_per_file: 107,
        cr_per_file: 128,
        cr: 19072,
        tokens: 8533,
    },
    FileOpsColumn {
        name: "input-backend",
        direction: Direction::Input,
        files: 208,
        words_per_file: 300,
        tokens_per_file: 400,
        cr_per_file: 160,
        cr: 33280,
        tokens: 120000,
    },
    FileOpsColumn {
        name: "output-backend",
        direction: Direction::Output,
        files: 50,
        words_per_file: 150,
        tokens_per_file: 200,
        cr_per_file: 240,
        cr: 12000,
        tokens: 30000,
    },
];

pub const STATED_TOKEN_COUNT: u64 = 203_717;
pub const PUBLISHED_EMBODIED_KWH: &str = "9.203";
pub const PUBLISHED_OPERATIONAL_KWH: &str = "1.131";
pub const PUBLISHED_FRONTEND_KJ: &str = "0.446";
pub const PUBLISHED_FRONTEND_KWH: &str = "0.0001";
pub const PUBLISHED_BACKEND_KJ: &str = "4190.5";
pub const PUBLISHED_BACKEND_KWH: &str = "1.1314";
pub const PUBLISHED_CI_G_PER_KWH: f64 = 172.0;

/// Published summary rows, in table order.
pub const PUBLISHED_SUMMARY: [&str; 6] = ["9.203", "1.131", "0.172", "1.582", "0.194", "1.777"];

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub checks: Vec<Check>,
    /// Summary recomputed from the published energies.
    pub published_inputs: FootprintReport,
    /// Summary recomputed from the stated method inputs alone.
    pub from_method: FootprintReport,
}

impl Replication {
    pub fn count(&self, status: CheckStatus) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }

    pub fn passed(&self) -> bool {
        self.count(CheckStatus::Fail) == 0
    }

    pub fn render(&self) -> String {
        let width = self.checks.iter().map(|c| c.id.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{}  {:<width$}  {}", c.status, c.id, c.message);
        }
        out.push_str("\nsummary recomputed from published energies:\n");
        out.push_str(&render_report(&self.published_inputs, ReportFormat::Table));
        let _ = writeln!(
            out,
            "\nchecks: {} pass, {} warn, {} info, {} fail",
            self.count(CheckStatus::Pass),
            self.count(CheckStatus::Warn),
            self.count(CheckStatus::Info),
            self.count(CheckStatus::Fail),
        );
        out
    }
}

fn decimals_of(published: &str) -> usize {
    published.split_once('.').map_or(0, |(_, d)| d.len())
}

/// The rendering of `value` at the published precision that equals
/// `published`, under truncation or half-up rounding.
fn matching_display(value: f64, published: &str) -> Option<String> {
    let d = decimals_of(published);
    [DisplayRounding::Truncate, DisplayRounding::HalfUp]
        .iter()
        .map(|&m| format_fixed(value, d, m))
        .find(|s| s == published)
}

pub fn displays_as(value: f64, published: &str) -> bool {
    matching_display(value, published).is_some()
}

fn relative_delta(computed: f64, published: f64) -> f64 {
    (computed - published) / published
}

struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, status: CheckStatus, id: impl Into<String>, message: impl Into<String>) {
        self.0.push(Check {
            status,
            id: id.into(),
            message: message.into(),
        });
    }

    fn display(&mut self, id: &str, what: &str, value: f64, unit: &str, published: &str) {
        if let Some(shown) = matching_display(value, published) {
            self.push(
                CheckStatus::Pass,
                id,
                format!("{what} {shown} {unit}; published {published} {unit}"),
            );
        } else {
            let shown = format_fixed(
                value,
                decimals_of(published).max(3),
                DisplayRounding::HalfUp,
            );
            let p: f64 = published.parse().expect("published literal");
            let delta = relative_delta(value, p);
            let status = if delta.abs() <= WARN_TOLERANCE {
                CheckStatus::Warn
            } else {
                CheckStatus::Fail
            };
            self.push(
                status,
                id,
                format!(
                    "{what} {shown} {unit}; published {published} {unit} (recomputed {:+.2}%)",
                    delta * 100.0
                ),
            );
        }
    }

    fn equal<T: PartialEq + fmt::Display>(
        &mut self,
        id: &str,
        what: &str,
        computed: T,
        published: T,
    ) {
        let status = if computed == published {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        self.push(
            status,
            id,
            format!("{what} {computed}; published {published}"),
        );
    }
}

fn file_ops_checks(c: &mut Checks, rates: &ConsumptionRateModel) {
    for col in FILE_OPS {
        let id = |what: &str| format!("file-ops.{}.{what}", col.name);
        let est = words_to_tokens(col.words_per_file);
        let status = if est.abs_diff(col.tokens_per_file) <= 1 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        c.push(
            status,
            id("tokens-per-file"),
            format!(
                "{} words -> {est} tokens at 1000 tokens/750 words; published {} (tolerance 1)",
                col.words_per_file, col.tokens_per_file
            ),
        );

        let per_file = consumption_seconds(col.tokens_per_file, col.direction, rates);
        c.equal(
            &id("cr-per-file"),
            &format!(
                "{} tokens x {} s -> {per_file} s, truncated",
                col.tokens_per_file,
                rates.rate(col.direction)
            ),
            per_file.truncated_secs(),
            col.cr_per_file as u128,
        );

        let by_tokens = consumption_seconds(col.tokens, col.direction, rates).truncated_secs();
        let by_files = col.files * col.cr_per_file;
        if by_tokens == col.cr as u128 {
            c.push(
                CheckStatus::Pass,
                id("cr"),
                format!(
                    "{} tokens x {} s -> {by_tokens} s, truncated; published {}",
                    col.tokens,
                    rates.rate(col.direction),
                    col.cr
                ),
            );
        } else if by_files == col.cr {
            c.push(
                CheckStatus::Pass,
                id("cr"),
                format!(
                    "{} files x {} s -> {by_files} s; published {}",
                    col.files, col.cr_per_file, col.cr
                ),
            );
            c.push(
                CheckStatus::Info,
                id("cr-vs-tokens"),
                format!(
                    "published token total gives {} tokens x {} s = {by_tokens} s, not {}",
                    col.tokens,
                    rates.rate(col.direction),
                    col.cr
                ),
            );
        } else {
            c.push(
                CheckStatus::Fail,
                id("cr"),
                format!("neither {by_tokens} (tokens x rate) nor {by_files} (files x CR/file) equals published {}", col.cr),
            );
        }

        let by_files = col.files * col.tokens_per_file;
        if by_files != col.tokens {
            c.push(
                CheckStatus::Info,
                id("tokens"),
                format!(
                    "{} files x {} tokens = {by_files}; published total {} is used as stated",
                    col.files, col.tokens_per_file, col.tokens
                ),
            );
        }
    }
    let n: u64 = FILE_OPS.iter().map(|c| c.tokens).sum();
    c.equal(
        "file-ops.token-count",
        "sum of token totals",
        n,
        STATED_TOKEN_COUNT,
    );
    c.equal(
        "file-ops.words-to-tokens",
        "750 words ->",
        words_to_tokens(750),
        1000,
    );
}

fn rate_checks(c: &mut Checks, rates: &ConsumptionRateModel) {
    c.equal(
        "rates.input",
        "input rate (s/token)",
        rates.input_rate(),
        0.4,
    );
    c.equal(
        "rates.output",
        "output rate (s/token)",
        rates.output_rate(),
        1.2,
    );
    c.equal(
        "rates.input-235",
        "235 input tokens ->",
        consumption_seconds(235, Direction::Input, rates).to_string(),
        "94".to_string(),
    );
    c.equal(
        "rates.output-200",
        "200 output tokens ->",
        consumption_seconds(200, Direction::Output, rates).to_string(),
        "240".to_string(),
    );
}

fn correctness_checks(c: &mut Checks) {
    let rate = |p, t| pass_rate(p, t).expect("non-zero total");
    c.equal(
        "correctness.backend",
        "25 of 50 tests pass ->",
        rate(25, 50),
        Ratio::new(1, 2),
    );
    c.equal(
        "correctness.frontend",
        "149 of 149 tests pass ->",
        rate(149, 149),
        Ratio::from_integer(1),
    );
}

fn fixture_energy(csv: &str, name: &str, process: &str) -> EnergyQuantity {
    let log =
        parse_energy_log_str(csv, name, &ParseOptions::default()).expect("embedded fixture parses");
    let filter = ProcessFilter::new(process).expect("literal filter");
    sum_process_energy(&log, &filter).expect("embedded fixture has the process")
}

pub fn frontend_energy() -> EnergyQuantity {
    fixture_energy(FRONTEND_LOG_CSV, "frontend_e3.csv", FRONTEND_PROCESS)
}

pub fn backend_energy() -> EnergyQuantity {
    fixture_energy(BACKEND_LOG_CSV, "backend_e3.csv", BACKEND_PROCESS)
}

/// Embodied energy of the stated session: preset server, preset latency,
/// stated token count.
pub fn method_embodied_energy() -> EnergyQuantity {
    embodied_energy(
        &INTEL_BLOG_2023.server(),
        &INTEL_BLOG_2023.profile(STATED_TOKEN_COUNT),
    )
}

fn case_study_ci() -> CarbonIntensityValue {
    lookup_intensity(
        &GridZone::new(CASE_STUDY_ZONE),
        &IntensityProvider::BuiltinTable,
    )
    .expect("builtin zone")
}

fn delta_note(what: &str, computed: f64, published: &str) -> String {
    let p: f64 = published.parse().expect("published literal");
    format!(
        "WARN {what}: recomputed {} kWh vs published {published} kWh ({:+.2}%)",
        format_fixed(computed, 4, DisplayRounding::HalfUp),
        relative_delta(computed, p) * 100.0
    )
}

/// The summary report computed end to end from the stated method, carrying
/// the published-value deltas as notes.
pub fn method_report() -> FootprintReport {
    let emb = method_embodied_energy();
    let op = backend_energy() + frontend_energy();
    build_report(emb, op, case_study_ci())
        .with_note(delta_note(
            "embodied energy",
            emb.kwh(),
            PUBLISHED_EMBODIED_KWH,
        ))
        .with_note(delta_note(
            "backend operational energy",
            backend_energy().kwh(),
            PUBLISHED_BACKEND_KWH,
        ))
}

pub fn replicate_paper() -> Replication {
    let mut c = Checks(Vec::new());
    let rates = ConsumptionRateModel::default();
    file_ops_checks(&mut c, &rates);
    rate_checks(&mut c, &rates);

    let server = INTEL_BLOG_2023.server();
    c.equal(
        "embodied.server-power",
        "350 W + 0.1 W/GB x 60 GB =",
        server_power(&server).watts(),
        356.0,
    );
    let emb = method_embodied_energy();
    c.display(
        "embodied.energy",
        &format!("356 W x 0.47 s x {STATED_TOKEN_COUNT} tokens ="),
        emb.kwh(),
        "kWh",
        PUBLISHED_EMBODIED_KWH,
    );

    let fe = frontend_energy();
    let be = backend_energy();
    c.display(
        "operational.frontend-kj",
        "frontend log sum",
        fe.kilojoules(),
        "kJ",
        PUBLISHED_FRONTEND_KJ,
    );
    c.display(
        "operational.frontend-kwh",
        "frontend log sum",
        fe.kwh(),
        "kWh",
        PUBLISHED_FRONTEND_KWH,
    );
    c.display(
        "operational.backend-kj",
        "backend log sum",
        be.kilojoules(),
        "kJ",
        PUBLISHED_BACKEND_KJ,
    );
    c.display(
        "operational.backend-kwh",
        "backend log sum",
        be.kwh(),
        "kWh",
        PUBLISHED_BACKEND_KWH,
    );
    let published_op: f64 = PUBLISHED_BACKEND_KWH.parse::<f64>().unwrap()
        + PUBLISHED_FRONTEND_KWH.parse::<f64>().unwrap();
    c.display(
        "operational.total",
        "published backend + frontend",
        published_op,
        "kWh",
        PUBLISHED_OPERATIONAL_KWH,
    );

    let ci = case_study_ci();
    c.equal(
        "intensity.case-study",
        &format!("zone {CASE_STUDY_ZONE} (g/kWh)"),
        ci.g_per_kwh(),
        PUBLISHED_CI_G_PER_KWH,
    );

    let published_inputs = build_report(
        EnergyQuantity::from_kwh(PUBLISHED_EMBODIED_KWH.parse().unwrap()).unwrap(),
        EnergyQuantity::from_kwh(PUBLISHED_OPERATIONAL_KWH.parse().unwrap()).unwrap(),
        ci,
    );
    let labels = [
        "energy-embodied",
        "energy-operational",
        "intensity",
        "carbon-embodied",
        "carbon-operational",
        "carbon-total",
    ];
    for ((label, value, unit), (id, published)) in
        summary_rows(&published_inputs, DisplayRounding::Truncate)
            .into_iter()
            .zip(labels.iter().zip(PUBLISHED_SUMMARY))
    {
        let status = if value == published {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        c.push(
            status,
            format!("summary.{id}"),
            format!("{label} {value} {unit}; published {published} {unit}"),
        );
    }
    let ratio =
        published_inputs.embodied_carbon.grams() / published_inputs.operational_carbon.grams();
    let status = if ratio.round() == 8.0 {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    c.push(
        status,
        "summary.embodied-to-operational",
        format!("embodied/operational carbon = {ratio:.2}; published about eight times"),
    );

    let m = method_report();
    c.push(
        CheckStatus::Info,
        "summary.from-method",
        format!(
            "stated method end to end: embodied {} kWh, operational {} kWh, total {} kgCO2e",
            format_fixed(m.embodied_energy.kwh(), 3, DisplayRounding::HalfUp),
            format_fixed(m.operational_energy.kwh(), 3, DisplayRounding::HalfUp),
            format_fixed(m.total_carbon.kg(), 3, DisplayRounding::HalfUp),
        ),
    );

    correctness_checks(&mut c);

    Replication {
        checks: c.0,
        published_inputs,
        from_method: m,
    }
}
