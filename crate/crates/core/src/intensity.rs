//! Grid carbon intensity lookup.
//!
//! Three sources, tried in a fixed order: user CSV tables (first listed wins),
//! then the builtin table. A remote electricity-maps-style endpoint is only
//! consulted when it is selected explicitly, and then exclusively.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantities::CarbonIntensityValue;

#[derive(Debug, Error)]
pub enum IntensityError {
    #[error("unknown grid zone {zone:?} (known zones: {known})")]
    UnknownZone { zone: String, known: String },
    #[error("intensity provider request to {url} failed after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("malformed intensity data: {0}")]
    Format(String),
    #[error("{path}:{line}: {message}")]
    Table {
        path: String,
        line: u64,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridZone {
    pub zone_id: String,
    pub description: String,
}

impl GridZone {
    pub fn new(zone_id: impl Into<String>) -> Self {
        Self {
            zone_id: zone_id.into(),
            description: String::new(),
        }
    }

    fn key(&self) -> String {
        self.zone_id.trim().to_ascii_uppercase()
    }
}

/// Zones whose intensity comes from published figures. Nothing else ships.
pub const BUILTIN_ZONES: &[(&str, f64, &str)] = &[
    (
        "EU-DC",
        127.0,
        "Europe-based data center, 91% carbon-free energy",
    ),
    (
        "EAST-ASIA-DC",
        360.0,
        "East Asia-based data center, 28% carbon-free energy",
    ),
    (
        "DE-CASE-STUDY",
        172.0,
        "German grid figure used in the software-testing case study (capture hour unknown)",
    ),
];

#[derive(Debug, Clone, PartialEq)]
struct TableEntry {
    zone: GridZone,
    value: CarbonIntensityValue,
}

/// Zone table keyed case-insensitively.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntensityTable {
    entries: BTreeMap<String, TableEntry>,
}

impl IntensityTable {
    pub fn builtin() -> Self {
        let mut t = Self::default();
        for (id, g, desc) in BUILTIN_ZONES {
            t.insert(
                GridZone {
                    zone_id: id.to_string(),
                    description: desc.to_string(),
                },
                CarbonIntensityValue::from_g_per_kwh(*g).expect("builtin values are valid"),
            );
        }
        t
    }

    pub fn insert(&mut self, zone: GridZone, value: CarbonIntensityValue) {
        self.entries.insert(zone.key(), TableEntry { zone, value });
    }

    pub fn get(&self, zone: &GridZone) -> Option<CarbonIntensityValue> {
        self.entries.get(&zone.key()).map(|e| e.value)
    }

    pub fn zones(&self) -> impl Iterator<Item = (&GridZone, CarbonIntensityValue)> {
        self.entries.values().map(|e| (&e.zone, e.value))
    }

    /// Parses `zone_id,g_per_kwh,description` rows. The header row is optional;
    /// values may carry a `g/kWh` or `kg/kWh` suffix.
    pub fn from_csv_str(text: &str, source: &str) -> Result<Self, IntensityError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut table = Self::default();
        for row in reader.records() {
            let row = row.map_err(|e| IntensityError::Table {
                path: source.to_string(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let err = |message: String| IntensityError::Table {
                path: source.to_string(),
                line,
                message,
            };
            let zone_id = row.get(0).unwrap_or_default();
            if zone_id.is_empty() || (line == 1 && zone_id.eq_ignore_ascii_case("zone_id")) {
                continue;
            }
            let raw = row
                .get(1)
                .ok_or_else(|| err(format!("zone {zone_id:?} has no intensity value")))?;
            let value = parse_intensity_value(raw).map_err(|e| err(e.to_string()))?;
            table.insert(
                GridZone {
                    zone_id: zone_id.to_string(),
                    description: row.get(2).unwrap_or_default().to_string(),
                },
                value,
            );
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, IntensityError> {
        let text = std::fs::read_to_string(path).map_err(|source| IntensityError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_str(&text, &path.display().to_string())
    }
}

/// Accepts `172`, `172 g/kWh`, `0.172 kg/kWh` or `0.172kg`.
pub fn parse_intensity_value(raw: &str) -> Result<CarbonIntensityValue, IntensityError> {
    let s = raw.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| IntensityError::Format(format!("not a number: {raw:?}")))?;
    let unit = unit.trim().to_ascii_lowercase().replace(' ', "");
    let result = match unit.as_str() {
        "" | "g" | "g/kwh" | "gco2/kwh" | "gco2eq/kwh" | "gco2e/kwh" => {
            CarbonIntensityValue::from_g_per_kwh(value)
        }
        "kg" | "kg/kwh" | "kgco2/kwh" | "kgco2eq/kwh" | "kgco2e/kwh" => {
            CarbonIntensityValue::from_kg_per_kwh(value)
        }
        other => {
            return Err(IntensityError::Format(format!(
                "unknown intensity unit {other:?}"
            )))
        }
    };
    result.map_err(|e| IntensityError::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_retries() -> u32 {
    2
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            auth_token: None,
            retries: default_retries(),
            timeout_ms: default_timeout_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntensityProvider {
    BuiltinTable,
    FileTable(PathBuf),
    RemoteEndpoint(RemoteConfig),
}

#[derive(Deserialize)]
struct RemotePayload {
    #[serde(rename = "carbonIntensity")]
    carbon_intensity: Option<f64>,
}

fn parse_remote_body(body: &str) -> Result<CarbonIntensityValue, IntensityError> {
    let payload: RemotePayload = serde_json::from_str(body)
        .map_err(|e| IntensityError::Format(format!("invalid JSON body: {e}")))?;
    let value = payload
        .carbon_intensity
        .ok_or_else(|| IntensityError::Format("response has no carbonIntensity".into()))?;
    CarbonIntensityValue::from_g_per_kwh(value)
        .map_err(|e| IntensityError::Format(format!("carbonIntensity: {e}")))
}

/// Single-request client with retries for 5xx and transport failures.
fn fetch_with(
    config: &RemoteConfig,
    zone_id: &str,
) -> Result<CarbonIntensityValue, IntensityError> {
    let base = config.base_url.trim_end_matches('/');
    if !(base.starts_with("http://") || base.starts_with("https://")) {
        return Err(IntensityError::Format(format!(
            "intensity endpoint must be an absolute http(s) URL, got {:?}",
            config.base_url
        )));
    }
    let url = format!("{base}/carbon-intensity");
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();

    let attempts = config.retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        if attempt > 1 {
            std::thread::sleep(Duration::from_millis(50 * u64::from(attempt - 1)));
        }
        let mut req = agent.get(&url).query("zone", zone_id);
        if let Some(token) = &config.auth_token {
            req = req.header("auth-token", token);
        }
        match req.call() {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if (200..300).contains(&status) {
                    let body = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| IntensityError::Format(format!("unreadable body: {e}")))?;
                    return parse_remote_body(&body);
                }
                last = format!("HTTP {status}");
                if status < 500 {
                    return Err(IntensityError::Transport {
                        url,
                        attempts: attempt,
                        message: last,
                    });
                }
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(IntensityError::Transport {
        url,
        attempts,
        message: last,
    })
}

/// `GET {base}/carbon-intensity?zone={zone_id}`, reading `carbonIntensity` in g/kWh.
pub fn fetch_remote_intensity(
    base: &str,
    zone_id: &str,
) -> Result<CarbonIntensityValue, IntensityError> {
    fetch_with(&RemoteConfig::new(base), zone_id)
}

/// Remote provider with an in-memory cache keyed by zone and UTC hour.
#[derive(Debug)]
pub struct RemoteClient {
    config: RemoteConfig,
    cache: Mutex<HashMap<(String, DateTime<Utc>), CarbonIntensityValue>>,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            config,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn fetch(&self, zone: &GridZone) -> Result<CarbonIntensityValue, IntensityError> {
        self.fetch_at(zone, Utc::now())
    }

    pub fn fetch_at(
        &self,
        zone: &GridZone,
        now: DateTime<Utc>,
    ) -> Result<CarbonIntensityValue, IntensityError> {
        let hour = now
            .with_minute(0)
            .and_then(|t| t.with_second(0))
            .and_then(|t| t.with_nanosecond(0))
            .expect("valid hour truncation");
        let key = (zone.key(), hour);
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let value = fetch_with(&self.config, zone.zone_id.trim())?;
        self.cache.lock().expect("cache lock").insert(key, value);
        Ok(value)
    }
}

/// Ordered resolution over user tables, the builtin table and an optional
/// remote endpoint.
#[derive(Debug)]
pub struct IntensityResolver {
    tables: Vec<IntensityTable>,
    remote: Option<RemoteClient>,
}

impl Default for IntensityResolver {
    fn default() -> Self {
        Self {
            tables: vec![IntensityTable::builtin()],
            remote: None,
        }
    }
}

impl IntensityResolver {
    /// Builtin table shadowed by `files` (earlier files win).
    pub fn with_files(files: &[PathBuf]) -> Result<Self, IntensityError> {
        let mut tables = files
            .iter()
            .map(|p| IntensityTable::load(p))
            .collect::<Result<Vec<_>, _>>()?;
        tables.push(IntensityTable::builtin());
        Ok(Self {
            tables,
            remote: None,
        })
    }

    pub fn with_tables(mut tables: Vec<IntensityTable>) -> Self {
        tables.push(IntensityTable::builtin());
        Self {
            tables,
            remote: None,
        }
    }

    pub fn remote(config: RemoteConfig) -> Self {
        Self {
            tables: Vec::new(),
            remote: Some(RemoteClient::new(config)),
        }
    }

    pub fn known_zones(&self) -> Vec<String> {
        let mut zones: Vec<String> = self
            .tables
            .iter()
            .flat_map(|t| t.zones().map(|(z, _)| z.zone_id.clone()))
            .collect();
        zones.sort_by_key(|z| z.to_ascii_uppercase());
        zones.dedup_by_key(|z| z.to_ascii_uppercase());
        zones
    }

    pub fn resolve(&self, zone: &GridZone) -> Result<CarbonIntensityValue, IntensityError> {
        if let Some(remote) = &self.remote {
            return remote.fetch(zone);
        }
        self.tables
            .iter()
            .find_map(|t| t.get(zone))
            .ok_or_else(|| IntensityError::UnknownZone {
                zone: zone.zone_id.clone(),
                known: self.known_zones().join(", "),
            })
    }
}

pub fn lookup_intensity(
    zone: &GridZone,
    provider: &IntensityProvider,
) -> Result<CarbonIntensityValue, IntensityError> {
    let resolver = match provider {
        IntensityProvider::BuiltinTable => IntensityResolver::default(),
        IntensityProvider::FileTable(path) => {
            IntensityResolver::with_files(std::slice::from_ref(path))?
        }
        IntensityProvider::RemoteEndpoint(config) => IntensityResolver::remote(config.clone()),
    };
    resolver.resolve(zone)
}


#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::Ordering;

    fn g(zone: &str) -> Result<f64, IntensityError> {
        lookup_intensity(&GridZone::new(zone), &IntensityProvider::BuiltinTable)
            .map(|v| v.g_per_kwh())
    }

    #[test]
    fn builtin_zones() {
        assert_eq!(g("EU-DC").unwrap(), 127.0);
        assert_eq!(g("EAST-ASIA-DC").unwrap(), 360.0);
        assert_eq!(g("DE-CASE-STUDY").unwrap(), 172.0);
        assert_eq!(g("de-case-study").unwrap(), 172.0);
        let err = g("XX").unwrap_err();
        assert!(matches!(err, IntensityError::UnknownZone { .. }));
        assert!(err.to_string().contains("EU-DC"));
        assert_eq!(IntensityTable::builtin().zones().count(), 3);
    }

    #[test]
    fn value_units() {
        assert_eq!(parse_intensity_value("172").unwrap().g_per_kwh(), 172.0);
        assert_eq!(
            parse_intensity_value("172 g/kWh").unwrap().g_per_kwh(),
            172.0
        );
        assert_eq!(
            parse_intensity_value("0.172 kg/kWh").unwrap().g_per_kwh(),
            172.0
        );
        assert_eq!(parse_intensity_value("0.172kg").unwrap().g_per_kwh(), 172.0);
        assert!(parse_intensity_value("-3").is_err());
        assert!(parse_intensity_value("3 lb/kWh").is_err());
        assert!(parse_intensity_value("abc").is_err());
    }

    #[test]
    fn file_table_shadows_builtin() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zones.csv");
        std::fs::write(
            &path,
            "zone_id,g_per_kwh,description\n# override\neu-dc,99,local\nDE,0.38 kg/kWh,national\n",
        )
        .unwrap();
        let p = IntensityProvider::FileTable(path.clone());
        let get = |z: &str| lookup_intensity(&GridZone::new(z), &p).unwrap().g_per_kwh();
        assert_eq!(get("EU-DC"), 99.0);
        assert_eq!(get("de"), 380.0);
        assert_eq!(get("EAST-ASIA-DC"), 360.0);
        // deterministic
        assert_eq!(get("DE").to_bits(), get("DE").to_bits());

        std::fs::write(&path, "BAD,oops\n").unwrap();
        assert!(matches!(
            lookup_intensity(&GridZone::new("BAD"), &p),
            Err(IntensityError::Table { line: 1, .. })
        ));
    }

    #[test]
    fn remote_ok() {
        let s = stub::serve(
            200,
            r#"{"zone":"DE","carbonIntensity":172,"unit":"gCO2eq/kWh"}"#,
        );
        assert_eq!(
            fetch_remote_intensity(&s.base, "DE").unwrap().g_per_kwh(),
            172.0
        );
        let req = s.last_request.lock().unwrap().clone();
        assert!(req.starts_with("GET /carbon-intensity?zone=DE "), "{req}");
    }

    #[test]
    fn remote_negative_is_format_error() {
        let s = stub::serve(200, r#"{"carbonIntensity":-1}"#);
        assert!(matches!(
            fetch_remote_intensity(&s.base, "DE"),
            Err(IntensityError::Format(_))
        ));
        let s = stub::serve(200, r#"{"zone":"DE"}"#);
        assert!(matches!(
            fetch_remote_intensity(&s.base, "DE"),
            Err(IntensityError::Format(_))
        ));
    }

    #[test]
    fn remote_503_retries() {
        let s = stub::serve(503, "{}");
        let mut cfg = RemoteConfig::new(&s.base);
        cfg.retries = 2;
        let err = lookup_intensity(
            &GridZone::new("DE"),
            &IntensityProvider::RemoteEndpoint(cfg),
        )
        .unwrap_err();
        assert!(
            matches!(err, IntensityError::Transport { attempts: 3, .. }),
            "{err}"
        );
        assert_eq!(s.hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn remote_cache_per_hour() {
        let s = stub::serve(200, r#"{"carbonIntensity":200.5}"#);
        let mut cfg = RemoteConfig::new(&s.base);
        cfg.auth_token = Some("secret".into());
        let client = RemoteClient::new(cfg);
        let t = DateTime::parse_from_rfc3339("2024-05-01T10:15:00Z")
            .unwrap()
            .to_utc();
        let zone = GridZone::new("de");
        assert_eq!(client.fetch_at(&zone, t).unwrap().g_per_kwh(), 200.5);
        client
            .fetch_at(&GridZone::new("DE"), t + chrono::Duration::minutes(30))
            .unwrap();
        assert_eq!(s.hits.load(Ordering::SeqCst), 1);
        assert!(s
            .last_request
            .lock()
            .unwrap()
            .to_ascii_lowercase()
            .contains("auth-token: secret"));
        client
            .fetch_at(&zone, t + chrono::Duration::hours(1))
            .unwrap();
        assert_eq!(s.hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn relative_base_rejected() {
        assert!(matches!(
            fetch_remote_intensity("localhost:9", "DE"),
            Err(IntensityError::Format(_))
        ));
    }
}
