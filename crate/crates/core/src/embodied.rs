//! Embodied inference energy: the energy a serving machine spends producing
//! the tokens of a code-generation session.
//!
//! The server draws `P = P_cpu + P_mem_per_GB * memory_GB` watts; each token
//! occupies it for the token latency, so a session of `N` tokens costs
//! `P * latency * N` joules.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantities::{
    carbon_from_energy, CarbonIntensityValue, CarbonQuantity, EnergyQuantity, PowerQuantity,
    QuantityError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbodiedError {
    #[error("{field} must be a finite non-negative number, got {value}")]
    Parameter { field: &'static str, value: f64 },
    #[error("token latency must be positive, got {0}")]
    Latency(f64),
    #[error("unknown preset {name:?} (known: {known})")]
    UnknownPreset { name: String, known: String },
    #[error(transparent)]
    Quantity(#[from] QuantityError),
}

fn non_negative(field: &'static str, value: f64) -> Result<f64, EmbodiedError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(EmbodiedError::Parameter { field, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ServerPowerProxy", into = "ServerPowerProxy")]
pub struct ServerPowerModel {
    p_cpu: PowerQuantity,
    p_mem_per_gb: f64,
    memory_gb: f64,
}

#[derive(Serialize, Deserialize)]
struct ServerPowerProxy {
    p_cpu_w: f64,
    p_mem_w_per_gb: f64,
    memory_gb: f64,
}

impl TryFrom<ServerPowerProxy> for ServerPowerModel {
    type Error = EmbodiedError;

    fn try_from(p: ServerPowerProxy) -> Result<Self, Self::Error> {
        Self::new(p.p_cpu_w, p.p_mem_w_per_gb, p.memory_gb)
    }
}

impl From<ServerPowerModel> for ServerPowerProxy {
    fn from(m: ServerPowerModel) -> Self {
        ServerPowerProxy {
            p_cpu_w: m.p_cpu.watts(),
            p_mem_w_per_gb: m.p_mem_per_gb,
            memory_gb: m.memory_gb,
        }
    }
}

impl ServerPowerModel {
    pub fn new(p_cpu_w: f64, p_mem_w_per_gb: f64, memory_gb: f64) -> Result<Self, EmbodiedError> {
        Ok(Self {
            p_cpu: PowerQuantity::from_watts(non_negative("p_cpu_w", p_cpu_w)?)?,
            p_mem_per_gb: non_negative("p_mem_w_per_gb", p_mem_w_per_gb)?,
            memory_gb: non_negative("memory_gb", memory_gb)?,
        })
    }

    pub fn p_cpu(&self) -> PowerQuantity {
        self.p_cpu
    }

    pub fn p_mem_per_gb(&self) -> f64 {
        self.p_mem_per_gb
    }

    pub fn memory_gb(&self) -> f64 {
        self.memory_gb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InferenceProfileProxy", into = "InferenceProfileProxy")]
pub struct InferenceProfile {
    token_latency_s: f64,
    token_count: u64,
}

#[derive(Serialize, Deserialize)]
struct InferenceProfileProxy {
    token_latency_s: f64,
    token_count: u64,
}

impl TryFrom<InferenceProfileProxy> for InferenceProfile {
    type Error = EmbodiedError;

    fn try_from(p: InferenceProfileProxy) -> Result<Self, Self::Error> {
        Self::new(p.token_latency_s, p.token_count)
    }
}

impl From<InferenceProfile> for InferenceProfileProxy {
    fn from(p: InferenceProfile) -> Self {
        InferenceProfileProxy {
            token_latency_s: p.token_latency_s,
            token_count: p.token_count,
        }
    }
}

impl InferenceProfile {
    pub fn new(token_latency_s: f64, token_count: u64) -> Result<Self, EmbodiedError> {
        if !(token_latency_s.is_finite() && token_latency_s > 0.0) {
            return Err(EmbodiedError::Latency(token_latency_s));
        }
        Ok(Self {
            token_latency_s,
            token_count,
        })
    }

    pub fn token_latency_s(&self) -> f64 {
        self.token_latency_s
    }

    pub fn token_count(&self) -> u64 {
        self.token_count
    }

    pub fn with_token_count(self, token_count: u64) -> Self {
        Self {
            token_count,
            ..self
        }
    }
}

/// A named parameter set for the server model plus token latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub p_cpu_w: f64,
    pub p_mem_w_per_gb: f64,
    pub memory_gb: f64,
    pub token_latency_s: f64,
}

impl Preset {
    pub fn server(&self) -> ServerPowerModel {
        ServerPowerModel::new(self.p_cpu_w, self.p_mem_w_per_gb, self.memory_gb)
            .expect("builtin preset is valid")
    }

    pub fn profile(&self, token_count: u64) -> InferenceProfile {
        InferenceProfile::new(self.token_latency_s, token_count).expect("builtin preset is valid")
    }
}

/// Rough estimate for a Xeon-class inference server: 350 W CPU plus
/// 0.1 W/GB over 60 GB, 0.47 s per token.
pub const INTEL_BLOG_2023: Preset = Preset {
    name: "intel-blog-2023",
    p_cpu_w: 350.0,
    p_mem_w_per_gb: 0.1,
    memory_gb: 60.0,
    token_latency_s: 0.47,
};

pub const PRESETS: &[Preset] = &[INTEL_BLOG_2023];

pub fn preset(name: &str) -> Result<Preset, EmbodiedError> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| EmbodiedError::UnknownPreset {
            name: name.to_string(),
            known: PRESETS
                .iter()
                .map(|p| p.name)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

pub fn server_power(m: &ServerPowerModel) -> PowerQuantity {
    PowerQuantity::from_watts(m.p_cpu.watts() + m.p_mem_per_gb * m.memory_gb)
        .expect("sum of non-negative terms")
}

pub fn embodied_energy(m: &ServerPowerModel, p: &InferenceProfile) -> EnergyQuantity {
    let joules = server_power(m).watts() * p.token_latency_s * p.token_count as f64;
    EnergyQuantity::from_joules(joules).expect("product of non-negative terms")
}

pub fn embodied_carbon(e: EnergyQuantity, ci: CarbonIntensityValue) -> CarbonQuantity {
    carbon_from_energy(e, ci)
}

/// One inference session contributing to dynamic embodied carbon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodiedSession {
    pub timestamp: DateTime<Utc>,
    pub label: String,
    pub server: ServerPowerModel,
    pub profile: InferenceProfile,
    pub carbon_intensity: CarbonIntensityValue,
    pub energy: EnergyQuantity,
    pub carbon: CarbonQuantity,
}

impl EmbodiedSession {
    pub fn estimate(
        label: impl Into<String>,
        timestamp: DateTime<Utc>,
        server: ServerPowerModel,
        profile: InferenceProfile,
        carbon_intensity: CarbonIntensityValue,
    ) -> Self {
        let energy = embodied_energy(&server, &profile);
        Self {
            timestamp,
            label: label.into(),
            server,
            profile,
            carbon_intensity,
            energy,
            carbon: embodied_carbon(energy, carbon_intensity),
        }
    }

    /// Whether the stored energy and carbon match the stored parameters.
    pub fn is_consistent(&self) -> bool {
        let energy = embodied_energy(&self.server, &self.profile);
        let carbon = embodied_carbon(energy, self.carbon_intensity);
        close(energy.joules(), self.energy.joules()) && close(carbon.grams(), self.carbon.grams())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Order-independent sum: values are sorted before adding.
pub(crate) fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Dynamic embodied carbon: plain component-wise sum over sessions.
pub fn accumulate_dynamic(sessions: &[EmbodiedSession]) -> (EnergyQuantity, CarbonQuantity) {
    let joules = stable_sum(sessions.iter().map(|s| s.energy.joules()).collect());
    let grams = stable_sum(sessions.iter().map(|s| s.carbon.grams()).collect());
    (
        EnergyQuantity::from_joules(joules).expect("non-negative sum"),
        CarbonQuantity::from_grams(grams).expect("non-negative sum"),
    )
}
