//! Run configuration files: flat TOML tables of `RunConfig` keys.

use std::fs;
use std::path::Path;

use vgt_core::config::RunConfig;

use crate::error::{io_err, HarnessError, Result};

/// Parses and validates a configuration. Missing keys take the desk
/// defaults; unknown keys are an error.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| HarnessError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = RunConfig::full();
        let text = config_to_toml(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert!(parse_config("d = 64\nbogus = 1\n").is_err());
        assert!(parse_config("l_v = 9\n").is_err());
        assert_eq!(parse_config("").unwrap(), RunConfig::desk());
    }
}
