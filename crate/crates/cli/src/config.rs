use std::path::Path;

use serde::{Deserialize, Serialize};
use wgae::evaluation::ScoreMode;
use wgae::training::TrainConfig;

use crate::error::CliError;

/// Settings for the `eval` subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// One training run per seed; results are aggregated as mean ± std.
    pub seeds: Vec<u64>,
    pub val_frac: f64,
    pub test_frac: f64,
    pub score: ScoreMode,
    /// Training labels per class for classification.
    pub per_class: usize,
    pub val_nodes: usize,
    pub test_nodes: usize,
    /// Seed of the label split, fixed across training seeds.
    pub split_seed: u64,
    /// Number of clusters; defaults to the number of classes.
    pub clusters: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            val_frac: 0.05,
            test_frac: 0.10,
            score: ScoreMode::PosteriorMean,
            per_class: 20,
            val_nodes: 500,
            test_nodes: 1000,
            split_seed: 0,
            clusters: None,
        }
    }
}

/// Resolved run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads an optional TOML file and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| CliError::Usage(format!("config error: {e}")))?;
        config
            .train
            .validate()
            .map_err(|e| CliError::Usage(format!("config error: {e}")))?;
        if config.eval.seeds.is_empty() {
            return Err(CliError::Usage("config error: eval.seeds must not be empty".into()));
        }
        Ok(config)
    }
}

/// Sets a dotted key such as `train.encoder.heads=4`. Values are parsed as
/// TOML and fall back to a plain string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let set = [
            "train.iterations=7".to_string(),
            "train.encoder.heads=3".to_string(),
            "eval.seeds=[1, 2]".to_string(),
        ];
        let c = RunConfig::resolve(None, &set).unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.encoder.heads, 3);
        assert_eq!(c.eval.seeds, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.iteratons=7", "evl.seeds=[1]", "eval.score=\"bogus\""] {
            assert!(
                matches!(RunConfig::resolve(None, &[bad.to_string()]), Err(CliError::Usage(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn bare_strings_fall_back() {
        let c = RunConfig::resolve(None, &["train.trainer=scalable".to_string()]).unwrap();
        assert_eq!(c.train.trainer, wgae::training::TrainerKind::Scalable);
    }

    #[test]
    fn shipped_configs_resolve() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut count = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            RunConfig::resolve(Some(&p), &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            count += 1;
        }
        assert_eq!(count, 3);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap(), c);
    }
}
