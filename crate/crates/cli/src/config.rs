//! Scenario configuration files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stgp_core::sim::ScenarioConfig;

use crate::error::CliError;

/// Major version written into every JSON output and accepted on input.
pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: String,
    pub scenario: ScenarioConfig,
}

impl ConfigFile {
    pub fn new(scenario: ScenarioConfig) -> Self {
        ConfigFile { schema_version: SCHEMA_VERSION.to_string(), scenario }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self, CliError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Invalid(format!("{}: {e}", origin.display())))?;
        check_version(&value, origin)?;
        let cfg: ConfigFile =
            serde_json::from_value(value).map_err(|e| CliError::Invalid(format!("{}: {e}", origin.display())))?;
        cfg.scenario.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}

/// Rejects documents whose `schema_version` major differs from ours.
pub fn check_version(doc: &serde_json::Value, origin: &Path) -> Result<(), CliError> {
    let found = doc
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CliError::Invalid(format!("{}: missing schema_version", origin.display())))?;
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(SCHEMA_MAJOR) {
        return Err(CliError::Version { path: origin.to_path_buf(), found: found.to_string(), expected: SCHEMA_MAJOR });
    }
    Ok(())
}

/// The bundled bending scenario.
pub fn bending() -> ConfigFile {
    ConfigFile::from_json(BENDING_JSON, Path::new("bending.json")).expect("bundled config is valid")
}

pub const BENDING_JSON: &str = include_str!("../configs/bending.json");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity() {
        let cfg = bending();
        let back = ConfigFile::from_json(&cfg.to_json(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn rejects_other_majors_and_unknown_fields() {
        let mut doc: serde_json::Value = serde_json::from_str(BENDING_JSON).unwrap();
        doc["schema_version"] = "2.0".into();
        let err = ConfigFile::from_json(&doc.to_string(), Path::new("x")).unwrap_err();
        assert!(matches!(err, CliError::Version { .. }));
        assert_eq!(err.exit_code(), 2);
        doc["schema_version"] = "1.3".into();
        assert!(ConfigFile::from_json(&doc.to_string(), Path::new("x")).is_ok());
        doc["scenario"]["colour"] = "red".into();
        assert!(matches!(ConfigFile::from_json(&doc.to_string(), Path::new("x")), Err(CliError::Invalid(_))));
    }

    #[test]
    fn rejects_invalid_scenarios() {
        let mut cfg = bending();
        cfg.scenario.length = -1.0;
        assert_eq!(ConfigFile::from_json(&cfg.to_json(), Path::new("x")).unwrap_err().exit_code(), 2);
    }
}
