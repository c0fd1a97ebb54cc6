//! The combined footprint report: embodied plus operational carbon.
//!
//! Carbon values are derived from unrounded energies; rounding only happens
//! in [`render_report`]. The JSON form keeps 12 significant digits so that
//! render, parse and render again gives identical bytes.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::quantities::{
    add_carbon, carbon_from_energy, format_fixed, round_significant, CarbonIntensityValue,
    CarbonQuantity, DisplayRounding, EnergyQuantity, QuantityError,
};

const JSON_SIGNIFICANT: usize = 12;
const REL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid report JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid report value: {0}")]
    Quantity(#[from] QuantityError),
    #[error("report invariant violated: {0}")]
    Invariant(String),
    #[error("unknown report format {0:?} (expected json, csv, table or markdown)")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintReport {
    pub embodied_energy: EnergyQuantity,
    pub operational_energy: EnergyQuantity,
    pub carbon_intensity: CarbonIntensityValue,
    pub embodied_carbon: CarbonQuantity,
    pub operational_carbon: CarbonQuantity,
    pub total_carbon: CarbonQuantity,
    pub inputs_digest: String,
    pub notes: Vec<String>,
}

/// SHA-256 over a canonical `name=value` listing of report inputs.
#[derive(Debug, Clone, Default)]
pub struct DigestBuilder {
    hasher: Sha256,
}

impl DigestBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(mut self, name: &str, kind: &str, payload: &[u8]) -> Self {
        self.hasher.update(name.as_bytes());
        self.hasher.update([0]);
        self.hasher.update(kind.as_bytes());
        self.hasher.update((payload.len() as u64).to_le_bytes());
        self.hasher.update(payload);
        self
    }

    pub fn number(self, name: &str, value: f64) -> Self {
        self.entry(name, "f64", &value.to_bits().to_le_bytes())
    }

    pub fn text(self, name: &str, value: &str) -> Self {
        self.entry(name, "str", value.as_bytes())
    }

    pub fn bytes(self, name: &str, value: &[u8]) -> Self {
        self.entry(name, "bytes", value)
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

pub fn build_report(
    emb: EnergyQuantity,
    op: EnergyQuantity,
    ci: CarbonIntensityValue,
) -> FootprintReport {
    build_report_with(emb, op, ci, DigestBuilder::new())
}

/// Like [`build_report`], folding extra input descriptors (file contents,
/// flags) into the digest.
pub fn build_report_with(
    emb: EnergyQuantity,
    op: EnergyQuantity,
    ci: CarbonIntensityValue,
    extra_inputs: DigestBuilder,
) -> FootprintReport {
    let embodied_carbon = carbon_from_energy(emb, ci);
    let operational_carbon = carbon_from_energy(op, ci);
    let inputs_digest = extra_inputs
        .number("embodied_energy_j", emb.joules())
        .number("operational_energy_j", op.joules())
        .number("carbon_intensity_g_per_kwh", ci.g_per_kwh())
        .finish();
    FootprintReport {
        embodied_energy: emb,
        operational_energy: op,
        carbon_intensity: ci,
        embodied_carbon,
        operational_carbon,
        total_carbon: add_carbon(operational_carbon, embodied_carbon),
        inputs_digest,
        notes: Vec::new(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOLERANCE * a.abs().max(b.abs())
}

impl FootprintReport {
    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn check_invariants(&self) -> Result<(), ReportError> {
        let emb = carbon_from_energy(self.embodied_energy, self.carbon_intensity);
        let op = carbon_from_energy(self.operational_energy, self.carbon_intensity);
        let checks = [
            ("embodied carbon", emb.grams(), self.embodied_carbon.grams()),
            (
                "operational carbon",
                op.grams(),
                self.operational_carbon.grams(),
            ),
            (
                "total carbon",
                self.embodied_carbon.grams() + self.operational_carbon.grams(),
                self.total_carbon.grams(),
            ),
        ];
        for (name, expected, actual) in checks {
            if !close(expected, actual) {
                return Err(ReportError::Invariant(format!(
                    "{name}: expected {expected} g, found {actual} g"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let j: ReportJson = serde_json::from_str(text)?;
        let report = Self {
            embodied_energy: EnergyQuantity::from_kwh(j.embodied_energy_kwh)?,
            operational_energy: EnergyQuantity::from_kwh(j.operational_energy_kwh)?,
            carbon_intensity: CarbonIntensityValue::from_g_per_kwh(j.carbon_intensity_g_per_kwh)?,
            embodied_carbon: CarbonQuantity::from_kg(j.embodied_carbon_kg)?,
            operational_carbon: CarbonQuantity::from_kg(j.operational_carbon_kg)?,
            total_carbon: CarbonQuantity::from_kg(j.total_carbon_kg)?,
            inputs_digest: j.inputs_digest,
            notes: j.notes,
        };
        report.check_invariants()?;
        Ok(report)
    }
}

/// Wire form; field names are fixed.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportJson {
    embodied_energy_kwh: f64,
    operational_energy_kwh: f64,
    carbon_intensity_g_per_kwh: f64,
    embodied_carbon_kg: f64,
    operational_carbon_kg: f64,
    total_carbon_kg: f64,
    inputs_digest: String,
    notes: Vec<String>,
}

impl From<&FootprintReport> for ReportJson {
    fn from(r: &FootprintReport) -> Self {
        let sig = |v: f64| round_significant(v, JSON_SIGNIFICANT);
        Self {
            embodied_energy_kwh: sig(r.embodied_energy.kwh()),
            operational_energy_kwh: sig(r.operational_energy.kwh()),
            carbon_intensity_g_per_kwh: sig(r.carbon_intensity.g_per_kwh()),
            embodied_carbon_kg: sig(r.embodied_carbon.kg()),
            operational_carbon_kg: sig(r.operational_carbon.kg()),
            total_carbon_kg: sig(r.total_carbon.kg()),
            inputs_digest: r.inputs_digest.clone(),
            notes: r.notes.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    #[default]
    Table,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "table" => Ok(Self::Table),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(ReportError::Format(s.to_string())),
        }
    }
}

/// Display decimals for kWh and kg values.
pub const DISPLAY_DECIMALS: usize = 3;

/// (label, value, unit) rows in summary-table order.
pub fn summary_rows(
    r: &FootprintReport,
    rounding: DisplayRounding,
) -> Vec<(&'static str, String, &'static str)> {
    let f = |v: f64| format_fixed(v, DISPLAY_DECIMALS, rounding);
    vec![
        ("Embodied Energy", f(r.embodied_energy.kwh()), "kWh"),
        ("Operational Energy", f(r.operational_energy.kwh()), "kWh"),
        (
            "Carbon Intensity",
            f(r.carbon_intensity.kg_per_kwh()),
            "kgCO2e/kWh",
        ),
        (
            "Embodied Carbon Emissions",
            f(r.embodied_carbon.kg()),
            "kgCO2e",
        ),
        (
            "Operational Carbon Emissions",
            f(r.operational_carbon.kg()),
            "kgCO2e",
        ),
        (
            "Total Carbon Emissions (LLMaaS)",
            f(r.total_carbon.kg()),
            "kgCO2e",
        ),
    ]
}

pub fn render_report(r: &FootprintReport, format: ReportFormat) -> String {
    render_report_with(r, format, DisplayRounding::default())
}

pub fn render_report_with(
    r: &FootprintReport,
    format: ReportFormat,
    rounding: DisplayRounding,
) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&ReportJson::from(r)).expect("plain data");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let j = ReportJson::from(r);
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record([
                "embodied_energy_kwh",
                "operational_energy_kwh",
                "carbon_intensity_g_per_kwh",
                "embodied_carbon_kg",
                "operational_carbon_kg",
                "total_carbon_kg",
                "inputs_digest",
                "notes",
            ])
            .expect("in-memory write");
            w.write_record([
                j.embodied_energy_kwh.to_string(),
                j.operational_energy_kwh.to_string(),
                j.carbon_intensity_g_per_kwh.to_string(),
                j.embodied_carbon_kg.to_string(),
                j.operational_carbon_kg.to_string(),
                j.total_carbon_kg.to_string(),
                j.inputs_digest,
                j.notes.join("; "),
            ])
            .expect("in-memory write");
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        }
        ReportFormat::Table => {
            let rows = summary_rows(r, rounding);
            let width = rows.iter().map(|(l, ..)| l.len()).max().unwrap_or(0);
            let vwidth = rows.iter().map(|(_, v, _)| v.len()).max().unwrap_or(0);
            let mut out = String::new();
            let _ = writeln!(out, "{:<width$}  Value", "Metric");
            let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(vwidth + 11));
            for (label, value, unit) in rows {
                let _ = writeln!(out, "{label:<width$}  {value:>vwidth$} {unit}");
            }
            for note in &r.notes {
                let _ = writeln!(out, "note: {note}");
            }
            let _ = writeln!(out, "inputs: {}", r.inputs_digest);
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| Metric | Value |\n|---|---:|\n");
            for (label, value, unit) in summary_rows(r, rounding) {
                let _ = writeln!(out, "| {label} | {value} {unit} |");
            }
            if !r.notes.is_empty() {
                out.push('\n');
                for note in &r.notes {
                    let _ = writeln!(out, "- {note}");
                }
            }
            let _ = writeln!(out, "\nInputs digest: `{}`", r.inputs_digest);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kwh(v: f64) -> EnergyQuantity {
        EnergyQuantity::from_kwh(v).unwrap()
    }

    fn ci(v: f64) -> CarbonIntensityValue {
        CarbonIntensityValue::from_g_per_kwh(v).unwrap()
    }

    #[test]
    fn table5_report() {
        let r = build_report(kwh(9.203), kwh(1.131), ci(172.0));
        r.check_invariants().unwrap();
        let table = render_report(&r, ReportFormat::Table);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[2].starts_with("Embodied Energy") && lines[2].ends_with("9.203 kWh"));
        assert!(lines[3].ends_with("1.131 kWh"));
        assert!(lines[4].ends_with("0.172 kgCO2e/kWh"));
        assert!(lines[5].ends_with("1.582 kgCO2e"));
        assert!(lines[6].ends_with("0.194 kgCO2e"));
        assert!(
            lines[7].starts_with("Total Carbon Emissions") && lines[7].ends_with("1.777 kgCO2e")
        );
    }

    #[test]
    fn formula_pipeline_totals() {
        let r = build_report(kwh(9.468), kwh(1.164), ci(172.0));
        let rows = summary_rows(&r, DisplayRounding::HalfUp);
        assert_eq!(rows[5].1, "1.829");
    }

    #[test]
    fn zero_report() {
        let r = build_report(EnergyQuantity::ZERO, EnergyQuantity::ZERO, ci(300.0));
        let v: serde_json::Value =
            serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        for k in [
            "embodied_energy_kwh",
            "operational_energy_kwh",
            "embodied_carbon_kg",
            "operational_carbon_kg",
            "total_carbon_kg",
        ] {
            assert_eq!(v[k].as_f64(), Some(0.0), "{k}");
        }
    }

    #[test]
    fn json_field_names_and_roundtrip() {
        let r = build_report(kwh(9.203), kwh(1.131), ci(172.0)).with_note("n1");
        let json = render_report(&r, ReportFormat::Json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 8);
        assert_eq!(v["total_carbon_kg"].as_f64(), Some(1.777448));
        let back = FootprintReport::from_json(&json).unwrap();
        assert_eq!(render_report(&back, ReportFormat::Json), json);
        assert_eq!(back.notes, ["n1"]);
    }

    #[test]
    fn json_rejects_inconsistent_totals() {
        let json = render_report(
            &build_report(kwh(1.0), kwh(1.0), ci(100.0)),
            ReportFormat::Json,
        )
        .replace("\"total_carbon_kg\": 0.2", "\"total_carbon_kg\": 0.3");
        assert!(matches!(
            FootprintReport::from_json(&json),
            Err(ReportError::Invariant(_))
        ));
    }

    #[test]
    fn digest_is_input_sensitive() {
        let a = build_report(kwh(1.0), kwh(2.0), ci(3.0));
        let b = build_report(kwh(1.0), kwh(2.0), ci(3.0));
        let c = build_report(kwh(2.0), kwh(1.0), ci(3.0));
        assert_eq!(a.inputs_digest, b.inputs_digest);
        assert_ne!(a.inputs_digest, c.inputs_digest);
        let d = build_report_with(
            kwh(1.0),
            kwh(2.0),
            ci(3.0),
            DigestBuilder::new().text("zone", "DE"),
        );
        assert_ne!(a.inputs_digest, d.inputs_digest);
        assert_eq!(a.inputs_digest.len(), 64);
    }

    #[test]
    fn renderings_are_deterministic() {
        let r = build_report(kwh(9.203), kwh(1.131), ci(172.0)).with_note("x, \"quoted\"");
        for f in [
            ReportFormat::Json,
            ReportFormat::Csv,
            ReportFormat::Table,
            ReportFormat::Markdown,
        ] {
            assert_eq!(render_report(&r, f), render_report(&r, f));
        }
        let md = render_report(&r, ReportFormat::Markdown);
        assert!(md.contains("| Total Carbon Emissions (LLMaaS) | 1.777 kgCO2e |"));
        let csv = render_report(&r, ReportFormat::Csv);
        assert!(csv.starts_with("embodied_energy_kwh,"));
        assert!(csv.contains("\"x, \"\"quoted\"\"\""));
        assert_eq!(
            "md".parse::<ReportFormat>().unwrap(),
            ReportFormat::Markdown
        );
        assert!("pdf".parse::<ReportFormat>().is_err());
    }
}
