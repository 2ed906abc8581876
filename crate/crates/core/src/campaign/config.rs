use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::resilience::GuardConfig;
use crate::solver::{init_sod, init_uniform, SolverError, State, DEFAULT_CFL, DEFAULT_GAMMA};

use super::CampaignError;

pub const DEFAULT_BENIGN_THRESHOLD: f64 = 1e-10;
pub const PROBE_SEED: u64 = 0x005E_ED0F_D1A6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum App {
    #[default]
    Sod,
    Uniform,
}

impl App {
    pub fn as_str(self) -> &'static str {
        match self {
            App::Sod => "sod",
            App::Uniform => "uniform",
        }
    }
}

impl fmt::Display for App {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for App {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sod" => Ok(App::Sod),
            "uniform" => Ok(App::Uniform),
            other => Err(format!("unknown app `{other}`")),
        }
    }
}

/// Solver setup shared by the golden run and every trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub app: App,
    pub cells: usize,
    pub steps: u64,
    pub cfl: f64,
    pub gamma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            app: App::Sod,
            cells: 200,
            steps: 200,
            cfl: DEFAULT_CFL,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl RunConfig {
    pub fn initial_state(&self) -> Result<State, CampaignError> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(CampaignError::Config(format!(
                "cfl must lie in (0, 1], got {}",
                self.cfl
            )));
        }
        let state = match self.app {
            App::Sod => init_sod(self.cells, self.gamma),
            App::Uniform => init_uniform(self.cells, 1.0, 0.0, 1.0, self.gamma),
        };
        state.map_err(|e| match e {
            SolverError::Config(msg) => CampaignError::Config(msg),
            other => CampaignError::Config(other.to_string()),
        })
    }

    /// The shock tube logs a sampled cell per iteration; the uniform fixture
    /// does not, so it executes no `xor`.
    pub fn probe_enabled(&self) -> bool {
        self.app == App::Sod
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub run: RunConfig,
    pub guard: GuardConfig,
    pub benign_threshold: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            guard: GuardConfig::default(),
            benign_threshold: DEFAULT_BENIGN_THRESHOLD,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), CampaignError> {
        self.run.initial_state()?;
        self.guard
            .validate()
            .map_err(|e| CampaignError::Config(e.to_string()))?;
        if !(self.benign_threshold >= 0.0) {
            return Err(CampaignError::Config(format!(
                "benign threshold must be nonnegative, got {}",
                self.benign_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMode {
    On,
    Off,
    #[default]
    Twin,
}

impl RecoveryMode {
    /// Recovery settings each sampled spec runs under, in order.
    pub fn settings(self) -> &'static [bool] {
        match self {
            RecoveryMode::On => &[true],
            RecoveryMode::Off => &[false],
            RecoveryMode::Twin => &[false, true],
        }
    }
}

impl FromStr for RecoveryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(RecoveryMode::On),
            "off" => Ok(RecoveryMode::Off),
            "twin" => Ok(RecoveryMode::Twin),
            other => Err(format!("unknown recovery setting `{other}`")),
        }
    }
}
