//! `key = value` configuration files.
//!
//! One UTF-8 line per assignment; `#` starts a comment; unknown keys are
//! rejected. `ch.preset = a|b` loads a whole channel-model preset and later
//! `ch.*` lines override single fields, so preset lines should come first.
//!
//! Keys:
//!   sys.bs_antennas, sys.ris_elements, sys.groups, sys.users,
//!   sys.user_antennas, sys.tau1, sys.tau2, sys.p_u_dbm, sys.noise_dbm,
//!   sys.z0
//!   ch.preset, ch.geometry_seed, ch.it_clusters, ch.shared_clusters,
//!   ch.private_clusters, ch.subpaths, ch.rician_k_los, ch.rician_k_nlos,
//!   ch.angle_spread, ch.p_los
//!   train.batch_size, train.learning_rate, train.max_epochs,
//!   train.patience, train.min_delta, train.seed, train.p_u_lo_dbm,
//!   train.p_u_hi_dbm
//!   model.d_model, model.d_ff, model.n_heads, model.n_intra_layers,
//!   model.n_inter_layers, model.n_ffc, model.d_fc, model.d_group, model.xi

use crate::channel::ChannelModelConfig;
use crate::models::ModelHyper;
use crate::physics::{dbm_to_watts, SystemConfig};
use crate::train::TrainConfig;

#[derive(Debug, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Full workbench configuration with desk-scale defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkbenchConfig {
    pub system: SystemConfig,
    pub channel: ChannelModelConfig,
    pub train: TrainConfig,
    pub hyper: ModelHyper,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        WorkbenchConfig {
            system: SystemConfig::desk_scale(),
            channel: ChannelModelConfig::default(),
            train: TrainConfig::desk_scale(0),
            hyper: ModelHyper::desk_scale(),
        }
    }
}

/// Raw assignments in file order.
pub fn parse_assignments(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError { line: line_no, message: "empty key or value".into() });
        }
        out.push((line_no, key, value));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError {
        line,
        message: format!("cannot parse '{value}' for key {key}"),
    })
}

/// Parses a workbench config, rejecting unknown keys.
pub fn parse_config(text: &str) -> Result<WorkbenchConfig, ConfigError> {
    let mut cfg = WorkbenchConfig::default();
    for (line, key, value) in parse_assignments(text)? {
        apply_key(&mut cfg, line, &key, &value)?;
    }
    cfg.system
        .validate()
        .map_err(|m| ConfigError { line: 0, message: m })?;
    cfg.channel
        .validate()
        .map_err(|m| ConfigError { line: 0, message: m })?;
    cfg.train
        .validate()
        .map_err(|m| ConfigError { line: 0, message: m })?;
    cfg.hyper
        .validate(&cfg.system)
        .map_err(|m| ConfigError { line: 0, message: m })?;
    Ok(cfg)
}

fn apply_key(
    cfg: &mut WorkbenchConfig,
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    match key {
        "sys.bs_antennas" => cfg.system.bs_antennas = parse_num(line, key, value)?,
        "sys.ris_elements" => cfg.system.ris_elements = parse_num(line, key, value)?,
        "sys.groups" => cfg.system.groups = parse_num(line, key, value)?,
        "sys.users" => cfg.system.users = parse_num(line, key, value)?,
        "sys.user_antennas" => cfg.system.user_antennas = parse_num(line, key, value)?,
        "sys.tau1" => cfg.system.tau1 = parse_num(line, key, value)?,
        "sys.tau2" => cfg.system.tau2 = parse_num(line, key, value)?,
        "sys.p_u_dbm" => cfg.system.p_u = dbm_to_watts(parse_num(line, key, value)?),
        "sys.noise_dbm" => cfg.system.noise_power = dbm_to_watts(parse_num(line, key, value)?),
        "sys.z0" => cfg.system.z0 = parse_num(line, key, value)?,
        "ch.preset" => {
            cfg.channel = match value {
                "a" | "A" => ChannelModelConfig::preset_a(),
                "b" | "B" => ChannelModelConfig::preset_b(),
                other => {
                    return Err(ConfigError {
                        line,
                        message: format!("unknown channel preset '{other}' (expected a|b)"),
                    })
                }
            }
        }
        "ch.geometry_seed" => cfg.channel.geometry_seed = parse_num(line, key, value)?,
        "ch.it_clusters" => cfg.channel.it_clusters = parse_num(line, key, value)?,
        "ch.shared_clusters" => cfg.channel.shared_clusters = parse_num(line, key, value)?,
        "ch.private_clusters" => cfg.channel.private_clusters = parse_num(line, key, value)?,
        "ch.subpaths" => cfg.channel.subpaths = parse_num(line, key, value)?,
        "ch.rician_k_los" => cfg.channel.rician_k_los = parse_num(line, key, value)?,
        "ch.rician_k_nlos" => cfg.channel.rician_k_nlos = parse_num(line, key, value)?,
        "ch.angle_spread" => cfg.channel.angle_spread = parse_num(line, key, value)?,
        "ch.p_los" => cfg.channel.p_los = parse_num(line, key, value)?,
        "train.batch_size" => cfg.train.batch_size = parse_num(line, key, value)?,
        "train.learning_rate" => cfg.train.learning_rate = parse_num(line, key, value)?,
        "train.max_epochs" => cfg.train.max_epochs = parse_num(line, key, value)?,
        "train.patience" => cfg.train.patience = parse_num(line, key, value)?,
        "train.min_delta" => cfg.train.min_delta = parse_num(line, key, value)?,
        "train.seed" => cfg.train.seed = parse_num(line, key, value)?,
        "train.p_u_lo_dbm" => cfg.train.p_u_lo_dbm = parse_num(line, key, value)?,
        "train.p_u_hi_dbm" => cfg.train.p_u_hi_dbm = parse_num(line, key, value)?,
        "model.d_model" => cfg.hyper.d_model = parse_num(line, key, value)?,
        "model.d_ff" => cfg.hyper.d_ff = parse_num(line, key, value)?,
        "model.n_heads" => cfg.hyper.n_heads = parse_num(line, key, value)?,
        "model.n_intra_layers" => cfg.hyper.n_intra_layers = parse_num(line, key, value)?,
        "model.n_inter_layers" => cfg.hyper.n_inter_layers = parse_num(line, key, value)?,
        "model.n_ffc" => cfg.hyper.n_ffc = parse_num(line, key, value)?,
        "model.d_fc" => cfg.hyper.d_fc = parse_num(line, key, value)?,
        "model.d_group" => cfg.hyper.d_group = parse_num(line, key, value)?,
        "model.xi" => cfg.hyper.xi = parse_num(line, key, value)?,
        other => {
            return Err(ConfigError { line, message: format!("unknown key '{other}'") });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys_and_defaults() {
        let cfg = parse_config(
            "# comment\n\
             sys.bs_antennas = 2\n\
             sys.ris_elements = 4\n\
             sys.groups = 2\n\
             \n\
             train.seed = 9\n\
             ch.preset = a\n\
             ch.p_los = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.system.bs_antennas, 2);
        assert_eq!(cfg.system.ris_elements, 4);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.channel.p_los, 0.25);
        assert_eq!(cfg.channel.it_clusters, ChannelModelConfig::preset_a().it_clusters);
        // untouched defaults survive
        assert_eq!(cfg.system.users, 2);
    }

    #[test]
    fn rejects_unknown_key() {
        let err = parse_config("sys.bogus = 3\n").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.message.contains("unknown key"));
    }

    #[test]
    fn rejects_malformed_line() {
        let err = parse_config("just words\n").unwrap_err();
        assert!(err.message.contains("expected"));
    }

    #[test]
    fn rejects_invalid_final_config() {
        // 8 elements with 3 groups is not divisible
        let err = parse_config("sys.groups = 3\n").unwrap_err();
        assert!(err.message.contains("divisible"));
    }

    #[test]
    fn rejects_bad_number() {
        let err = parse_config("sys.tau1 = many\n").unwrap_err();
        assert!(err.message.contains("cannot parse"));
    }
}
