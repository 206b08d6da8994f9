//! Config loading, provenance stamps and output writers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use snitch_core::config::{ScenarioConfig, SuiteSpec};
use snitch_core::scenario::{TraceRow, TraceSink};

use crate::error::{HarnessError, Result};

pub const TRACE_HEADER: &str =
    "step,time_s,node,v_g_true,v_g_meas,q_g_true,q_g_meas,q_setpoint_received,twin_pred,residual,tau,local_alarm,verdict";

/// Seed and config hash stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn of<T: Serialize>(master_seed: u64, config: &T) -> Self {
        Provenance { master_seed, config_hash: config_hash(config) }
    }

    pub fn comment_line(&self) -> String {
        format!("# master_seed={} config_hash={}\n", self.master_seed, self.config_hash)
    }
}

/// Hex SHA-256 of the compact JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs always serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Resolved config wrapped with its provenance. Loading accepts either this
/// form or a bare config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Echo<T> {
    pub master_seed: u64,
    pub config_hash: String,
    pub config: T,
}

fn parse_maybe_echo<T: DeserializeOwned + Serialize>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let is_echo = value.as_object().is_some_and(|o| o.contains_key("config_hash") && o.contains_key("config"));
    if is_echo {
        let echo: Echo<T> = serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
        if config_hash(&echo.config) != echo.config_hash {
            return Err(HarnessError::Config("config_hash does not match the echoed config".into()));
        }
        Ok(echo.config)
    } else {
        serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| HarnessError::ReadConfig { path: path.to_path_buf(), source })
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    Ok(parse_maybe_echo::<ScenarioConfig>(text)?.resolve()?)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    parse_scenario(&read(path)?)
}

pub fn parse_suite(text: &str) -> Result<SuiteSpec> {
    Ok(parse_maybe_echo::<SuiteSpec>(text)?.resolve()?)
}

pub fn load_suite(path: &Path) -> Result<SuiteSpec> {
    parse_suite(&read(path)?)
}

pub fn echo<T: Serialize + Clone>(master_seed: u64, config: &T) -> Echo<T> {
    Echo { master_seed, config_hash: config_hash(config), config: config.clone() }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Write { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| HarnessError::Write { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| HarnessError::Other(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// CSV body with the provenance comment as its first line.
pub fn csv_bytes<R: Serialize>(provenance: &Provenance, rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(provenance.comment_line().into_bytes());
    for row in rows {
        w.serialize(row).map_err(|e| HarnessError::Other(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Other(e.to_string()))
}

#[derive(Serialize)]
struct TraceCsvRow<'a> {
    step: u64,
    time_s: f64,
    node: &'a str,
    v_g_true: f64,
    v_g_meas: f64,
    q_g_true: f64,
    q_g_meas: f64,
    q_setpoint_received: f64,
    twin_pred: f64,
    residual: f64,
    tau: f64,
    local_alarm: u8,
    verdict: &'a str,
}

/// In-memory trace; rows written before a failure are kept.
pub struct CsvTrace {
    writer: csv::Writer<Vec<u8>>,
    error: Option<String>,
}

impl CsvTrace {
    pub fn new(provenance: &Provenance) -> Self {
        let mut buf = provenance.comment_line().into_bytes();
        buf.extend_from_slice(TRACE_HEADER.as_bytes());
        buf.push(b'\n');
        let writer = csv::WriterBuilder::new().has_headers(false).from_writer(buf);
        CsvTrace { writer, error: None }
    }

    pub fn finish(self) -> Result<Vec<u8>> {
        if let Some(e) = self.error {
            return Err(HarnessError::Other(e));
        }
        self.writer.into_inner().map_err(|e| HarnessError::Other(e.to_string()))
    }
}

impl TraceSink for CsvTrace {
    fn row(&mut self, r: &TraceRow<'_>) {
        if self.error.is_some() {
            return;
        }
        let row = TraceCsvRow {
            step: r.step,
            time_s: r.time_s,
            node: r.node,
            v_g_true: r.v_g_true,
            v_g_meas: r.v_g_meas,
            q_g_true: r.q_g_true,
            q_g_meas: r.q_g_meas,
            q_setpoint_received: r.q_setpoint_received,
            twin_pred: r.twin_pred,
            residual: r.residual,
            tau: r.tau,
            local_alarm: u8::from(r.local_alarm),
            verdict: r.verdict,
        };
        if let Err(e) = self.writer.serialize(row) {
            self.error = Some(e.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = parse_scenario(r#"{"scenario_id": "s1", "attack": {"kind": "none"}}"#).unwrap();
        assert_eq!(cfg.nodes.len(), 4);
        assert_eq!(cfg.n_steps(), 10_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_scenario(r#"{"scenario_id": "s1", "bogus": 1}"#).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = parse_scenario(r#"{"nodes": [{"id": "a", "plant": {"kq": 1}}]}"#).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invariant_errors_name_the_field() {
        let text = r#"{"nodes": [{"id": "a", "plant": {"q_min": 0.6, "q_max": 0.5}}]}"#;
        let err = parse_scenario(text).unwrap_err();
        assert!(err.to_string().contains("q_min"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse_scenario(r#"{"scenario_id": "s1", "master_seed": 18446744073709551615}"#).unwrap();
        let text = serde_json::to_string_pretty(&echo(cfg.master_seed, &cfg)).unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), cfg);
        let tampered = text.replace("\"s1\"", "\"s2\"");
        assert!(parse_scenario(&tampered).is_err());
    }

    #[test]
    fn trace_starts_with_provenance_and_header() {
        let p = Provenance { master_seed: 3, config_hash: "ab".into() };
        let mut t = CsvTrace::new(&p);
        t.row(&TraceRow {
            step: 1,
            time_s: 1e-4,
            node: "bus1",
            v_g_true: 1.0,
            v_g_meas: 1.0,
            q_g_true: 0.2,
            q_g_meas: 0.2,
            q_setpoint_received: 0.2,
            twin_pred: 0.2,
            residual: 0.0,
            tau: 1.0,
            local_alarm: false,
            verdict: "none",
        });
        let text = String::from_utf8(t.finish().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# master_seed=3 config_hash=ab");
        assert_eq!(lines[1], TRACE_HEADER);
        assert_eq!(lines[2].split(',').count(), 13);
        assert!(lines[2].ends_with(",0,none"));
    }
}
