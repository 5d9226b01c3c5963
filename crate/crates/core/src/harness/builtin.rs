//! Scenario files shipped in `scenarios/`, embedded at build time.

use super::scenario::{ConfigError, Scenario};

macro_rules! shipped {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/", $name, ".toml")))),*]
    };
}

pub const BUILTIN: &[(&str, &str)] = shipped![
    "attack-unpatched",
    "attack-broadcast",
    "attack-forward",
    "fault-free-forward",
    "fault-free-broadcast",
    "step-ratio",
    "wan-attack",
    "naive-stale-read",
    "state-transfer",
    "state-transfer-legacy",
    "view-change",
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

pub fn builtin(name: &str) -> Result<Scenario, ConfigError> {
    let (_, text) = BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ConfigError::Unknown(name.to_string()))?;
    Scenario::from_toml(text, &format!("scenarios/{name}.toml"))
}

/// A shipped name, or else a path to a scenario file.
pub fn load(name_or_path: &str) -> Result<Scenario, ConfigError> {
    if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
        return builtin(name_or_path);
    }
    let path = std::path::Path::new(name_or_path);
    if path.exists() {
        Scenario::from_file(path)
    } else {
        Err(ConfigError::Unknown(name_or_path.to_string()))
    }
}
