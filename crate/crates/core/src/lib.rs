//! Carbon accounting for LLM-assisted software development.
//!
//! The footprint of generated code splits into two parts:
//!
//! * **embodied** carbon, the energy spent by the LLM inference that produced
//!   the code (`server power x token latency x token count`), and
//! * **operational** carbon, the energy spent running the produced code,
//!   taken from per-process energy-monitor logs.
//!
//! Both are converted to CO2eq through a grid carbon intensity and combined
//! into a [`report::FootprintReport`].

pub mod config;
pub mod embodied;
pub mod harness;
pub mod intensity;
pub mod ledger;
pub mod operational;
pub mod quantities;
pub mod replication;
pub mod report;
pub mod tokens;

pub use embodied::{InferenceProfile, ServerPowerModel};
pub use operational::{EnergyLog, EnergyRecord, ProcessFilter};
pub use quantities::{
    add_carbon, carbon_from_energy, CarbonIntensityValue, CarbonQuantity, DisplayRounding,
    EnergyQuantity, PowerQuantity,
};
pub use report::{build_report, render_report, FootprintReport, ReportFormat};
pub use tokens::{ConsumptionRateModel, CorpusStats, Direction, TokenLedger};
