//! Pipeline configuration: a strict TOML schema with per-section defaults
//! and environment-variable overrides.
//!
//! Every key can be overridden from the environment with the `GRAPHSTAD_`
//! prefix and `__` as the section separator, e.g.
//! `GRAPHSTAD_TRAIN__EPOCHS=10` or `GRAPHSTAD_LOSS__BETA_KL=0.01`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;
use crate::model::ArchConfig;
use crate::renorm::RenormTrainConfig;
use crate::simlab::{Persistence, WorldConfig};
use crate::training::{LossConfig, TrainConfig};

pub const ENV_PREFIX: &str = "GRAPHSTAD_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Runs and lumisections per run of the healthy training stream.
    pub train_runs: usize,
    pub ls_per_run: usize,
    /// Runs of the held-out stream used for injection and scoring.
    pub test_runs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_runs: 10,
            ls_per_run: 300,
            test_runs: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    /// Degrading factor: 0 dead, 2.0 hot, (0,1) degraded.
    pub r_d: f64,
    /// Fraction of active channels targeted; realistic contamination is
    /// about 1%.
    pub density: f64,
    /// Number of fault start lumisections.
    pub n_starts: usize,
    pub persistence: Persistence,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            r_d: 0.0,
            density: 0.01,
            n_starts: 24,
            persistence: Persistence::Window,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Captured-anomaly fractions characterized as operating points.
    pub anchors: Vec<f64>,
    /// Detection threshold used when emitting flag maps outside the
    /// anchored evaluation.
    pub alpha: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            anchors: crate::simlab::DEFAULT_ANCHORS.to_vec(),
            alpha: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub geometry: GeometryConfig,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub renorm: RenormTrainConfig,
    pub injection: InjectionConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            geometry: GeometryConfig::toy(),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            renorm: RenormTrainConfig::default(),
            injection: InjectionConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale preset: toy geometry and a reduced architecture sized
    /// for minutes-long CPU runs.
    pub fn toy() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.geometry = GeometryConfig::toy();
        // Occupancy high enough that Poisson noise does not drown faults
        // after min-max scaling.
        cfg.world.base_intensity = 300.0;
        cfg.arch.cnn_features = vec![8, 16, 32];
        cfg.arch.gnn_features = vec![8, 16, 32];
        cfg.arch.lstm_sizes = vec![32, 16];
        cfg.arch.n_z = 16;
        cfg.train.epochs = 20;
        cfg.train.patience = 8;
        cfg.train.max_lr = 2e-3;
        cfg.train.threads = 1;
        cfg
    }

    /// Load from an optional TOML file, then apply `GRAPHSTAD_*`
    /// environment overrides on top.
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Value>(&text).map_err(|e| Error::parse(p, e.to_string()))?
            }
            None => toml::Value::try_from(PipelineConfig::default())
                .expect("default config serializes"),
        };
        let merged = apply_env_overrides(base, std::env::vars())?;
        merged
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Apply overrides of the form `GRAPHSTAD_SECTION__KEY=value`. Values are
/// parsed as TOML scalars, falling back to plain strings.
pub fn apply_env_overrides(
    mut value: toml::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<toml::Value> {
    for (key, raw) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("malformed override key `{key}`")));
        }
        let parsed = parse_scalar(&raw);
        let mut node = &mut value;
        for seg in &path[..path.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
            node = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        table.insert(path.last().unwrap().clone(), parsed);
    }
    Ok(value)
}

fn parse_scalar(raw: &str) -> toml::Value {
    // A bare scalar is valid TOML as the right-hand side of a dummy key.
    if let Ok(v) = toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        if let Some(inner) = v.get("v") {
            return inner.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
