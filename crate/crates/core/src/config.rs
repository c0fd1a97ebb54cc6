//! Configuration: a JSON file, environment variables and command-line
//! overrides, merged as flags > environment > file > builtin defaults.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embodied::{preset, EmbodiedError, ServerPowerModel, INTEL_BLOG_2023};
use crate::intensity::{IntensityError, IntensityResolver, RemoteConfig};
use crate::operational::ColumnMapping;
use crate::quantities::DisplayRounding;
use crate::tokens::{ConsumptionRateModel, TokenError};

pub const DEFAULT_CONFIG_FILE: &str = "carbon-ledger.json";
pub const DEFAULT_ZONE: &str = "DE-CASE-STUDY";
pub const ENV_CI_URL: &str = "CARBON_LEDGER_CI_URL";
pub const ENV_CI_ZONE: &str = "CARBON_LEDGER_CI_ZONE";
pub const ENV_CI_TOKEN: &str = "CARBON_LEDGER_CI_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Embodied(#[from] EmbodiedError),
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error(transparent)]
    Rates(#[from] TokenError),
    #[error("token latency must be positive, got {0}")]
    Latency(f64),
}

/// A user-defined parameter set, selectable like a builtin preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetConfig {
    pub server: ServerPowerModel,
    pub token_latency_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityConfig {
    pub zone: Option<String>,
    pub tables: Vec<PathBuf>,
    pub remote_url: Option<String>,
    pub auth_token: Option<String>,
    pub retries: Option<u32>,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub presets: BTreeMap<String, PresetConfig>,
    pub server: Option<ServerPowerModel>,
    pub token_latency_s: Option<f64>,
    pub rates: Option<ConsumptionRateModel>,
    pub intensity: IntensityConfig,
    pub energy_log: Option<ColumnMapping>,
    pub ledger_path: Option<PathBuf>,
    pub display_rounding: Option<DisplayRounding>,
}

impl ConfigFile {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for t in &mut cfg.intensity.tables {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        if let Some(l) = cfg.ledger_path.as_mut().filter(|l| l.is_relative()) {
            *l = base.join(&*l);
        }
        Ok(cfg)
    }

    /// Loads `path` if given, otherwise the default file in `dir` when it
    /// exists.
    pub fn discover(path: Option<&Path>, dir: &Path) -> Result<Option<Self>, ConfigError> {
        match path {
            Some(p) => Self::load(p).map(Some),
            None => {
                let p = dir.join(DEFAULT_CONFIG_FILE);
                if p.is_file() {
                    Self::load(&p).map(Some)
                } else {
                    Ok(None)
                }
            }
        }
    }
}

/// Values taken from command-line flags; `None` means "not given".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub p_cpu_w: Option<f64>,
    pub p_mem_w_per_gb: Option<f64>,
    pub memory_gb: Option<f64>,
    pub token_latency_s: Option<f64>,
    pub input_rate: Option<f64>,
    pub output_rate: Option<f64>,
    pub zone: Option<String>,
    pub intensity_tables: Vec<PathBuf>,
    pub remote_url: Option<String>,
    pub ledger_path: Option<PathBuf>,
    pub display_rounding: Option<DisplayRounding>,
}

/// The subset of the environment the tool reads.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvVars {
    pub ci_url: Option<String>,
    pub ci_zone: Option<String>,
    pub ci_token: Option<String>,
}

impl EnvVars {
    pub fn from_process() -> Self {
        Self::from_map(&std::env::vars().collect())
    }

    pub fn from_map(vars: &HashMap<String, String>) -> Self {
        let get = |k: &str| vars.get(k).filter(|v| !v.is_empty()).cloned();
        Self {
            ci_url: get(ENV_CI_URL),
            ci_zone: get(ENV_CI_ZONE),
            ci_token: get(ENV_CI_TOKEN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntensitySource {
    Tables(Vec<PathBuf>),
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub preset_name: String,
    pub server: ServerPowerModel,
    pub token_latency_s: f64,
    pub rates: ConsumptionRateModel,
    pub zone: String,
    pub intensity: IntensitySource,
    pub columns: ColumnMapping,
    pub ledger_path: Option<PathBuf>,
    pub display_rounding: DisplayRounding,
}

impl Default for Settings {
    fn default() -> Self {
        Self::resolve(None, &EnvVars::default(), &Overrides::default()).expect("builtin defaults")
    }
}

impl Settings {
    pub fn resolve(
        file: Option<&ConfigFile>,
        env: &EnvVars,
        flags: &Overrides,
    ) -> Result<Self, ConfigError> {
        let empty = ConfigFile::default();
        let file = file.unwrap_or(&empty);

        let preset_name = flags
            .preset
            .clone()
            .or_else(|| file.preset.clone())
            .unwrap_or_else(|| INTEL_BLOG_2023.name.to_string());
        let (base_server, base_latency) = match file.presets.get(&preset_name) {
            Some(p) => (p.server, p.token_latency_s),
            None => {
                let p = preset(&preset_name)?;
                (p.server(), p.token_latency_s)
            }
        };
        // An explicit server block replaces the preset's; single flags then
        // override individual parameters.
        let server = file.server.unwrap_or(base_server);
        let server = ServerPowerModel::new(
            flags.p_cpu_w.unwrap_or(server.p_cpu().watts()),
            flags.p_mem_w_per_gb.unwrap_or(server.p_mem_per_gb()),
            flags.memory_gb.unwrap_or(server.memory_gb()),
        )?;
        let token_latency_s = flags
            .token_latency_s
            .or(file.token_latency_s)
            .unwrap_or(base_latency);
        if !(token_latency_s.is_finite() && token_latency_s > 0.0) {
            return Err(ConfigError::Latency(token_latency_s));
        }

        let base_rates = file.rates.unwrap_or_default();
        let rates = match (flags.input_rate, flags.output_rate) {
            (None, None) => base_rates,
            (i, o) => ConsumptionRateModel::new(
                i.unwrap_or(base_rates.input_rate()),
                o.unwrap_or(base_rates.output_rate()),
            )?,
        };

        let zone = flags
            .zone
            .clone()
            .or_else(|| env.ci_zone.clone())
            .or_else(|| file.intensity.zone.clone())
            .unwrap_or_else(|| DEFAULT_ZONE.to_string());

        let ic = &file.intensity;
        let remote_url = flags
            .remote_url
            .clone()
            .or_else(|| env.ci_url.clone())
            .or_else(|| ic.remote_url.clone());
        let intensity = match remote_url {
            Some(url) => {
                let mut rc = RemoteConfig::new(url);
                rc.auth_token = env.ci_token.clone().or_else(|| ic.auth_token.clone());
                if let Some(r) = ic.retries {
                    rc.retries = r;
                }
                if let Some(t) = ic.timeout_ms {
                    rc.timeout_ms = t;
                }
                IntensitySource::Remote(rc)
            }
            None if !flags.intensity_tables.is_empty() => {
                IntensitySource::Tables(flags.intensity_tables.clone())
            }
            None => IntensitySource::Tables(ic.tables.clone()),
        };

        Ok(Self {
            preset_name,
            server,
            token_latency_s,
            rates,
            zone,
            intensity,
            columns: file.energy_log.clone().unwrap_or_default(),
            ledger_path: flags
                .ledger_path
                .clone()
                .or_else(|| file.ledger_path.clone()),
            display_rounding: flags
                .display_rounding
                .or(file.display_rounding)
                .unwrap_or_default(),
        })
    }

    pub fn resolver(&self) -> Result<IntensityResolver, ConfigError> {
        Ok(match &self.intensity {
            IntensitySource::Remote(rc) => IntensityResolver::remote(rc.clone()),
            IntensitySource::Tables(files) => IntensityResolver::with_files(files)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> EnvVars {
        EnvVars::from_map(
            &pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    #[test]
    fn builtin_defaults() {
        let s = Settings::default();
        assert_eq!(s.preset_name, "intel-blog-2023");
        assert_eq!(s.server, INTEL_BLOG_2023.server());
        assert_eq!(s.token_latency_s, 0.47);
        assert_eq!(s.rates, ConsumptionRateModel::default());
        assert_eq!(s.zone, DEFAULT_ZONE);
        assert_eq!(s.intensity, IntensitySource::Tables(vec![]));
        assert_eq!(s.display_rounding, DisplayRounding::Truncate);
    }

    #[test]
    fn precedence_flags_env_file_default() {
        let file: ConfigFile = serde_json::from_str(
            r#"{"intensity": {"zone": "EU-DC", "remote_url": "http://file.example"},
                "token_latency_s": 0.5}"#,
        )
        .unwrap();
        let none = Overrides::default();

        let s = Settings::resolve(Some(&file), &EnvVars::default(), &none).unwrap();
        assert_eq!(s.zone, "EU-DC");
        assert_eq!(s.token_latency_s, 0.5);
        assert!(
            matches!(&s.intensity, IntensitySource::Remote(r) if r.base_url == "http://file.example")
        );

        let e = env(&[
            (ENV_CI_ZONE, "EAST-ASIA-DC"),
            (ENV_CI_URL, "http://env.example"),
        ]);
        let s = Settings::resolve(Some(&file), &e, &none).unwrap();
        assert_eq!(s.zone, "EAST-ASIA-DC");
        assert!(
            matches!(&s.intensity, IntensitySource::Remote(r) if r.base_url == "http://env.example")
        );

        let flags = Overrides {
            zone: Some("DE-CASE-STUDY".into()),
            remote_url: Some("http://flag.example".into()),
            token_latency_s: Some(0.1),
            ..Default::default()
        };
        let s = Settings::resolve(Some(&file), &e, &flags).unwrap();
        assert_eq!(s.zone, "DE-CASE-STUDY");
        assert_eq!(s.token_latency_s, 0.1);
        assert!(
            matches!(&s.intensity, IntensitySource::Remote(r) if r.base_url == "http://flag.example")
        );
    }

    #[test]
    fn custom_preset_and_partial_overrides() {
        let file: ConfigFile = serde_json::from_str(
            r#"{"preset": "lab",
                "presets": {"lab": {"server": {"p_cpu_w": 300, "p_mem_w_per_gb": 0.2, "memory_gb": 100},
                                    "token_latency_s": 0.2}},
                "rates": {"input_rate": 0.5, "output_rate": 1.5}}"#,
        )
        .unwrap();
        let flags = Overrides {
            memory_gb: Some(50.0),
            output_rate: Some(2.0),
            ..Default::default()
        };
        let s = Settings::resolve(Some(&file), &EnvVars::default(), &flags).unwrap();
        assert_eq!(s.server, ServerPowerModel::new(300.0, 0.2, 50.0).unwrap());
        assert_eq!(s.token_latency_s, 0.2);
        assert_eq!(s.rates, ConsumptionRateModel::new(0.5, 2.0).unwrap());
    }

    #[test]
    fn bad_values_rejected() {
        let flags = Overrides {
            preset: Some("nope".into()),
            ..Default::default()
        };
        assert!(matches!(
            Settings::resolve(None, &EnvVars::default(), &flags),
            Err(ConfigError::Embodied(EmbodiedError::UnknownPreset { .. }))
        ));
        let flags = Overrides {
            token_latency_s: Some(0.0),
            ..Default::default()
        };
        assert!(Settings::resolve(None, &EnvVars::default(), &flags).is_err());
        let flags = Overrides {
            input_rate: Some(-1.0),
            ..Default::default()
        };
        assert!(Settings::resolve(None, &EnvVars::default(), &flags).is_err());
        assert!(serde_json::from_str::<ConfigFile>(r#"{"zone": "x"}"#).is_err());
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(DEFAULT_CONFIG_FILE);
        std::fs::write(
            &p,
            r#"{"intensity": {"tables": ["zones.csv"]}, "ledger_path": "ledger.jsonl"}"#,
        )
        .unwrap();
        let cfg = ConfigFile::discover(None, dir.path()).unwrap().unwrap();
        assert_eq!(cfg.intensity.tables, vec![dir.path().join("zones.csv")]);
        assert_eq!(cfg.ledger_path, Some(dir.path().join("ledger.jsonl")));
        let empty = tempfile::tempdir().unwrap();
        assert!(ConfigFile::discover(None, empty.path()).unwrap().is_none());
        assert!(ConfigFile::discover(Some(&empty.path().join("x.json")), empty.path()).is_err());
    }
}
