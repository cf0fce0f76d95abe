//! JSON experiment files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use wbtree::dynamics::{StopCondition, StopReason, Trajectory};
use wbtree::montecarlo::SurvivalProxy;
use wbtree::{BoundarySpec, InitSpec, Region, VertexAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Wb,
    Bcrw,
    Graphical,
    Analysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: Model,
    pub d: u32,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "origin")]
    pub init: InitSpec,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub stop: StopCondition,
    #[serde(default = "one")]
    pub replicas: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub observables: Vec<Observable>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub record_events: bool,
    /// Survival proxy for `scan`.
    #[serde(default)]
    pub proxy: Option<SurvivalProxy>,
    /// Window for `graphical-check`.
    #[serde(default)]
    pub window: Option<WindowSpec>,
    /// Observed set for `graphical-check`; the origin when absent.
    #[serde(default)]
    pub observe: Option<Vec<VertexAddr>>,
    /// Contracts on the results. A violated one gives exit status 2.
    #[serde(default)]
    pub expect: Vec<Expectation>,
}

fn origin() -> InitSpec {
    InitSpec::Origin {}
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub region: Region,
    pub horizon: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub metric: Observable,
    pub value: f64,
    #[serde(default = "three")]
    pub within_stderr: f64,
    #[serde(default)]
    pub abs_tol: f64,
}

fn three() -> f64 {
    3.0
}

/// Per-run quantities reported by `simulate` and `dual`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    Extinction,
    Survival,
    SizeReached,
    Included,
    OriginOccupied,
    FinalSize,
    EndTime,
    Events,
}

impl Observable {
    pub const DEFAULT: [Observable; 3] = [Observable::Extinction, Observable::FinalSize, Observable::EndTime];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Extinction => "extinction",
            Self::Survival => "survival",
            Self::SizeReached => "size_reached",
            Self::Included => "included",
            Self::OriginOccupied => "origin_occupied",
            Self::FinalSize => "final_size",
            Self::EndTime => "end_time",
            Self::Events => "events",
        }
    }

    /// Indicators are reported as proportions, the rest as means.
    pub fn is_indicator(&self) -> bool {
        !matches!(self, Self::FinalSize | Self::EndTime | Self::Events)
    }

    pub fn measure(&self, tr: &Trajectory) -> f64 {
        let flag = |b: bool| f64::from(u8::from(b));
        match self {
            Self::Extinction => flag(tr.stop == StopReason::Extinction),
            Self::Survival => flag(tr.stop != StopReason::Extinction),
            Self::SizeReached => flag(tr.stop == StopReason::SizeReached),
            Self::Included => flag(tr.stop == StopReason::Included),
            Self::OriginOccupied => flag(tr.final_state.contains(&VertexAddr::origin())),
            Self::FinalSize => tr.final_state.len() as f64,
            Self::EndTime => tr.end_time,
            Self::Events => tr.n_events as f64,
        }
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let spec: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), String> {
        let params = wbtree::TreeParams::new(self.d).map_err(|e| e.to_string())?;
        if self.replicas == 0 {
            return Err("replicas must be at least 1".into());
        }
        for x in self.lambda.iter().chain(self.lambda_grid.iter().flatten()) {
            if !(x.is_finite() && *x >= 1.0) {
                return Err(format!("lambda must be finite and >= 1, got {x}"));
            }
        }
        self.init.validate(params, &self.boundary).map_err(|e| e.to_string())?;
        let mut vertices: Vec<&VertexAddr> = self.observe.iter().flatten().collect();
        if let InitSpec::ExplicitSet { vertices: v } = &self.init {
            vertices.extend(v);
        }
        vertices.extend(self.stop.includes_set.iter().flatten());
        for x in vertices {
            params.check(x).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn lambda(&self) -> Result<f64, String> {
        self.lambda.ok_or_else(|| "this command needs \"lambda\"".to_string())
    }

    pub fn observables(&self) -> Vec<Observable> {
        if self.observables.is_empty() {
            Observable::DEFAULT.to_vec()
        } else {
            self.observables.clone()
        }
    }
}
