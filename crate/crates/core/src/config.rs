//! Experiment configuration: TOML files, named presets and `KEY=VAL` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::analysis::RedistributionMode;
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::reward_model::RewardModelConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub mode: RedistributionMode,
    /// Episodes collected per seed.
    pub budget_episodes: usize,
    pub seeds: Vec<u64>,
    /// Rollout workers. Results do not depend on it.
    pub threads: usize,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Greedy evaluation episodes after training; 0 skips evaluation.
    pub eval_episodes: usize,
    pub trainer: TrainerConfig,
    pub reward_model: RewardModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::KeyTreasure,
            mode: RedistributionMode::Tar2,
            budget_episodes: 2000,
            seeds: vec![0],
            threads: 1,
            checkpoint_every: 0,
            eval_episodes: 100,
            trainer: TrainerConfig::default(),
            reward_model: RewardModelConfig::default(),
        }
    }
}

/// Built-in configurations, selectable by name wherever a path is accepted.
pub const PRESETS: [(&str, &str); 4] = [
    ("keytreasure_tar2", include_str!("../presets/keytreasure_tar2.toml")),
    ("keytreasure_uniform", include_str!("../presets/keytreasure_uniform.toml")),
    ("switches_tar2", include_str!("../presets/switches_tar2.toml")),
    ("switches_uniform", include_str!("../presets/switches_uniform.toml")),
];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.budget_episodes == 0 {
            return Err(Error::Config("budget_episodes must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.trainer.validate()?;
        self.reward_model.validate()
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a preset by name or a TOML file by path; `None` gives the defaults.
    pub fn load(source: Option<&str>, overrides: &[String]) -> Result<Self> {
        let text = match source {
            None => String::new(),
            Some(s) => match PRESETS.iter().find(|(name, _)| *name == s) {
                Some((_, body)) => body.to_string(),
                None => std::fs::read_to_string(Path::new(s))
                    .map_err(|e| Error::Config(format!("cannot read config '{s}': {e}")))?,
            },
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match PRESETS.iter().find(|(n, _)| *n == name) {
            Some((_, body)) => Self::from_toml_str(body, &[]),
            None => Err(Error::Config(format!("unknown preset '{name}'"))),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over everything that can change results (worker count excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = 1;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Dotted paths of every leaf of the default configuration.
fn leaf_paths() -> Vec<Vec<String>> {
    fn walk(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
        match v {
            Value::Table(t) => {
                for (k, child) in t {
                    prefix.push(k.clone());
                    walk(child, prefix, out);
                    prefix.pop();
                }
            }
            _ => out.push(prefix.clone()),
        }
    }
    let v = Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
    let mut out = Vec::new();
    walk(&v, &mut Vec::new(), &mut out);
    out
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Apply `KEY=VAL`. KEY is a dotted path (`trainer.gamma`) or a leaf name
/// that is unique across the configuration (`entropy_pen`).
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not KEY=VAL")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        let hits: Vec<Vec<String>> = leaf_paths().into_iter().filter(|p| p.last().map(String::as_str) == Some(key)).collect();
        match hits.len() {
            1 => hits.into_iter().next().expect("one hit"),
            0 => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
            _ => {
                let names: Vec<String> = hits.iter().map(|p| p.join(".")).collect();
                return Err(Error::Config(format!("key '{key}' is ambiguous: {}", names.join(", "))));
            }
        }
    };
    let mut value = parse_value(raw);
    // Float fields accept integer literals.
    if let Value::Integer(i) = value {
        let default = Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        let mut cur = Some(&default);
        for p in &path {
            cur = cur.and_then(|v| v.get(p));
        }
        if matches!(cur, Some(Value::Float(_))) {
            value = Value::Float(i as f64);
        }
    }
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' is not a table in override '{spec}'")))?;
    }
    cur.insert(path[path.len() - 1].clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            ExperimentConfig::preset(name).unwrap();
        }
    }

    #[test]
    fn overrides_by_leaf_and_path() {
        let c = ExperimentConfig::from_toml_str("", &["entropy_pen=5e-3".into(), "trainer.gamma=1".into()]).unwrap();
        assert_eq!(c.trainer.entropy_pen, 5e-3);
        assert_eq!(c.trainer.gamma, 1.0);
        let c = ExperimentConfig::from_toml_str("", &["mode=uniform".into(), "seeds=[3,4]".into()]).unwrap();
        assert_eq!(c.mode, RedistributionMode::Uniform);
        assert_eq!(c.seeds, vec![3, 4]);
    }

    #[test]
    fn bad_keys_are_config_errors() {
        for o in ["nope=1", "trainer.nope=1", "gamma", "mode=bogus", "lr=fast"] {
            let e = ExperimentConfig::from_toml_str("", &[o.to_string()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{o}: {e:?}");
        }
    }

    #[test]
    fn hash_ignores_threads_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { threads: 4, ..a.clone() };
        let c = ExperimentConfig { budget_episodes: 10, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = ExperimentConfig::preset("switches_tar2").unwrap();
        let b = ExperimentConfig::from_toml_str(&a.to_toml_string().unwrap(), &[]).unwrap();
        assert_eq!(a, b);
    }
}
