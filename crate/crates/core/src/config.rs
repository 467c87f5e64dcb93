//! Experiment configuration shared by every command-line subcommand: a flat
//! key namespace loadable from a TOML file, overridable by flags, and
//! range-checked before any work starts. Also the run manifest, which pins
//! everything needed to reproduce a run's outputs byte for byte.

use crate::recording::SynthesisConfig;
use crate::rl::{InvalidConfig, TrainConfig};
use crate::scenario::{load_scenario, ScenarioError, ScenarioSpec, DT};
use crate::transfer::{Budgets, MatrixConfig, Protocol};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Every run-settable knob, one flat namespace. Optional fields default to
/// the owning scenario's values; everything else carries the experiment
/// defaults directly. Unknown keys in a file are rejected so typos cannot
/// silently fall back to defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task for single-task commands: a built-in name or a scenario file path.
    pub task: String,
    /// Task list for the transfer matrix.
    pub tasks: Vec<String>,
    /// Protocols for the transfer matrix.
    pub protocols: Vec<String>,
    /// Root seed; all other randomness is derived from it by purpose.
    pub master_seed: u64,

    pub gamma: f64,
    pub epsilon: f64,
    pub batch: usize,
    /// Gradient steps for the single-task `train` command.
    pub iterations: u32,
    pub eval_every: u32,
    pub eval_episodes: u32,
    pub replay_capacity: usize,
    pub warmup: usize,

    /// Nominal step budgets for the matrix phases, before scaling.
    pub direct_budget: u32,
    pub pretrain_budget: u32,
    pub finetune_budget: u32,
    /// Multiplier applied to every budget; below 1 shrinks runs to desk scale.
    pub budget_scale: f64,
    /// Episodes behind every reported success rate.
    pub final_episodes: u32,

    /// Scenario overrides; `None` keeps the task's own value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depart_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub krauss_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idm_max_accel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idm_comfort_brake: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idm_hard_brake: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idm_min_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idm_headway: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_behind: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_ahead: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_half_span: Option<f64>,

    /// Recording synthesis: capture rate (Hz), position noise (m), length (s).
    pub sample_rate: f64,
    pub noise_sigma: f64,
    pub duration: f64,

    /// Worker threads for the matrix; 0 uses all cores.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        let t = TrainConfig::default();
        let b = Budgets::default();
        let s = SynthesisConfig::default();
        ExperimentConfig {
            task: "forward".into(),
            tasks: crate::scenario::ScenarioId::ALL.iter().map(|t| t.name().to_string()).collect(),
            protocols: Protocol::ALL.iter().map(|p| p.to_string()).collect(),
            master_seed: 0,
            gamma: t.gamma,
            epsilon: t.epsilon,
            batch: t.batch,
            iterations: t.iterations,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            replay_capacity: t.replay_capacity,
            warmup: t.warmup,
            direct_budget: b.direct,
            pretrain_budget: b.pretrain,
            finetune_budget: b.finetune,
            budget_scale: b.scale,
            final_episodes: 500,
            depart_prob: None,
            krauss_sigma: None,
            idm_max_accel: None,
            idm_comfort_brake: None,
            idm_hard_brake: None,
            idm_min_gap: None,
            idm_headway: None,
            grid_behind: None,
            grid_ahead: None,
            grid_half_span: None,
            sample_rate: s.sample_rate,
            noise_sigma: s.noise_sigma,
            duration: 60.0,
            jobs: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Invalid(#[from] InvalidConfig),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Range-checks every field against the invariants of the module that
    /// owns it. Called once, before any command does work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_template().validate()?;
        self.budgets().validate()?;
        let bad = |field, reason: String| Err(InvalidConfig { field, reason }.into());
        if self.final_episodes == 0 {
            return bad("final_episodes", "must be >= 1".into());
        }
        if !(self.sample_rate > 1.0 / DT) {
            return bad("sample_rate", format!("{} Hz not above the simulation rate {} Hz", self.sample_rate, 1.0 / DT));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("{} not a finite non-negative number", self.noise_sigma));
        }
        if !(self.duration >= 30.0) {
            return bad("duration", format!("{} s below the 30 s minimum", self.duration));
        }
        for (field, v) in [
            ("idm_max_accel", self.idm_max_accel),
            ("idm_comfort_brake", self.idm_comfort_brake),
            ("idm_hard_brake", self.idm_hard_brake),
            ("idm_min_gap", self.idm_min_gap),
            ("idm_headway", self.idm_headway),
            ("grid_half_span", self.grid_half_span),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(field, format!("{v} not a positive finite number"));
                }
            }
        }
        for (field, v) in [("grid_behind", self.grid_behind), ("grid_ahead", self.grid_ahead)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(field, format!("{v} not a finite non-negative number"));
                }
            }
        }
        if self.grid_behind.unwrap_or(1.0) + self.grid_ahead.unwrap_or(1.0) <= 0.0 {
            return bad("grid_ahead", "window has zero depth".into());
        }
        for p in &self.protocols {
            Protocol::from_str(p).map_err(|reason| InvalidConfig { field: "protocols", reason })?;
        }
        // Scenario-side overrides are judged by the scenario's own validator,
        // applied to every task this config can name.
        for name in std::iter::once(&self.task).chain(&self.tasks) {
            self.scenario(name)?;
        }
        Ok(())
    }

    /// Training settings minus seeds, which each command derives by purpose.
    pub fn train_template(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            epsilon: self.epsilon,
            batch: self.batch,
            iterations: self.iterations,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            replay_capacity: self.replay_capacity,
            warmup: self.warmup,
            seed: 0,
            eval_seed: 0,
        }
    }

    pub fn budgets(&self) -> Budgets {
        Budgets {
            direct: self.direct_budget,
            pretrain: self.pretrain_budget,
            finetune: self.finetune_budget,
            scale: self.budget_scale,
        }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig { sample_rate: self.sample_rate, noise_sigma: self.noise_sigma }
    }

    /// Loads `name` (built-in task or scenario file) and applies the
    /// scenario-side overrides, re-validating the result.
    pub fn scenario(&self, name: &str) -> Result<ScenarioSpec, ScenarioError> {
        let mut spec = load_scenario(name)?;
        let over = [
            (&mut spec.traffic.depart_prob, self.depart_prob),
            (&mut spec.traffic.krauss_sigma, self.krauss_sigma),
            (&mut spec.traffic.idm.max_accel, self.idm_max_accel),
            (&mut spec.traffic.idm.comfort_brake, self.idm_comfort_brake),
            (&mut spec.traffic.idm.hard_brake, self.idm_hard_brake),
            (&mut spec.traffic.idm.min_gap, self.idm_min_gap),
            (&mut spec.traffic.idm.headway, self.idm_headway),
            (&mut spec.grid.behind, self.grid_behind),
            (&mut spec.grid.ahead, self.grid_ahead),
            (&mut spec.grid.half_span, self.grid_half_span),
        ];
        for (slot, value) in over {
            if let Some(v) = value {
                *slot = v;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Assembles the matrix configuration; tasks must be built-in names
    /// because cells are keyed by them.
    pub fn matrix_config(&self) -> Result<MatrixConfig, ConfigError> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| crate::scenario::ScenarioId::from_str(t))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| InvalidConfig { field: "tasks", reason: e.to_string() })?;
        let protocols = self
            .protocols
            .iter()
            .map(|p| Protocol::from_str(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|reason| InvalidConfig { field: "protocols", reason })?;
        let cfg = MatrixConfig {
            tasks,
            protocols,
            budgets: self.budgets(),
            master_seed: self.master_seed,
            final_episodes: self.final_episodes,
            template: self.train_template(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything needed to reproduce a run: the subcommand, the fully resolved
/// configuration, every derived seed, and content hashes of the files read
/// and written. Deliberately carries no timestamps or host details, so
/// re-running a command rewrites its manifest byte-identically.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    /// Derived seeds by purpose key.
    pub seeds: BTreeMap<String, u64>,
    /// sha256 of input files the run depended on, by path as given.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of files the run wrote, by path relative to the output dir.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Manifest {
        Manifest {
            command: command.to_string(),
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, std::io::Error> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
