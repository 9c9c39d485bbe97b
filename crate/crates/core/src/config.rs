//! Run configuration shared by the command-line driver and the tests, with
//! the built-in Van der Pol presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attraction::AttractionConfig;
use crate::constants::EtaConfig;
use crate::error::{Error, Result};
use crate::field::{load_system, SystemSpec, VectorField};
use crate::measure::SliceSampling;
use crate::sync::{ErrorCurveConfig, SyncConfig};
use crate::tube::{AlphaMode, ExistenceConfig, StepBound, TubeConfig};

pub const PRESETS: &[&str] = &["vdp-example1", "vdp-example2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub x0: Vec<f64>,
    pub h: f64,
    pub delta0: f64,
    pub gamma: f64,
    /// Longest simulated time when looking for a return.
    pub max_time: f64,
    /// Simulation length for `simulate`.
    pub horizon: f64,
    /// Error-curve horizon in loops.
    pub periods: f64,
    pub n_s: usize,
    pub n_ball: usize,
    pub pad_factor: f64,
    pub lambda_stride: usize,
    pub passes: usize,
    pub step_bound: StepBound,
    pub alpha_mode: AlphaMode,
    pub grid_resolution: usize,
    pub eta_samples: usize,
    /// Points of the section disk swept by the attraction certificate.
    pub n_samples: usize,
    pub h_list: Vec<f64>,
    pub y0: Option<Vec<f64>>,
    pub ref_factor: f64,
    pub floor_constant: Option<f64>,
    pub reference_d: Option<f64>,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tube = TubeConfig::default();
        let existence = ExistenceConfig::default();
        RunConfig {
            system: SystemSpec::default(),
            x0: Vec::new(),
            h: 1e-3,
            delta0: 0.1,
            gamma: 0.015,
            max_time: existence.max_time,
            horizon: 20.0,
            periods: 5.0,
            n_s: tube.sampling.n_s,
            n_ball: tube.sampling.n_ball,
            pad_factor: tube.sampling.pad_factor,
            lambda_stride: tube.lambda_stride,
            passes: tube.passes,
            step_bound: tube.step_bound,
            alpha_mode: tube.alpha_mode,
            grid_resolution: existence.grid_resolution,
            eta_samples: existence.eta.n_samples,
            n_samples: AttractionConfig::default().n_samples,
            h_list: Vec::new(),
            y0: None,
            ref_factor: 100.0,
            floor_constant: None,
            reference_d: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let vdp = RunConfig {
            system: SystemSpec::registry("vanderpol", &[("p", 0.3)]),
            x0: vec![1.8929, -0.5383],
            h: 1e-4,
            delta0: 0.1,
            gamma: 0.015,
            ..Default::default()
        };
        match name {
            "vdp-example1" => Ok(vdp),
            "vdp-example2" => Ok(RunConfig {
                y0: Some(vec![1.8037, -0.5057]),
                h_list: vec![5e-4, 2.5e-4, 1.25e-4],
                reference_d: Some(-0.34),
                ..vdp
            }),
            other => Err(Error::InvalidParameter(format!(
                "unknown preset `{other}`; known: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("delta0", self.delta0),
            ("gamma", self.gamma),
            ("max_time", self.max_time),
            ("horizon", self.horizon),
            ("periods", self.periods),
            ("ref_factor", self.ref_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.pad_factor >= 0.0) {
            return Err(Error::InvalidParameter(format!("pad_factor must be non-negative, got {}", self.pad_factor)));
        }
        let counts = [
            ("n_s", self.n_s),
            ("lambda_stride", self.lambda_stride),
            ("passes", self.passes),
            ("grid_resolution", self.grid_resolution),
            ("eta_samples", self.eta_samples),
            ("n_samples", self.n_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
            }
        }
        if let Some(&bad) = self.h_list.iter().find(|h| !(**h > 0.0)) {
            return Err(Error::InvalidParameter(format!("step sizes must be positive, got {bad}")));
        }
        if self.x0.is_empty() {
            return Err(Error::InvalidParameter("x0 is required".into()));
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != self.x0.len() {
                return Err(Error::DimensionMismatch { expected: self.x0.len(), got: y0.len() });
            }
        }
        Ok(())
    }

    /// The vector field, checked against the dimension of `x0`.
    pub fn field(&self) -> Result<VectorField> {
        let field = load_system(&self.system)?;
        if field.dim() != self.x0.len() {
            return Err(Error::DimensionMismatch { expected: field.dim(), got: self.x0.len() });
        }
        Ok(field)
    }

    pub fn existence_config(&self) -> ExistenceConfig {
        ExistenceConfig {
            tube: TubeConfig {
                sampling: SliceSampling { n_s: self.n_s, n_ball: self.n_ball, pad_factor: self.pad_factor },
                method: None,
                lambda_stride: self.lambda_stride,
                passes: self.passes,
                step_bound: self.step_bound,
                alpha_mode: self.alpha_mode,
                sigma_override: None,
            },
            grid_resolution: self.grid_resolution,
            eta: EtaConfig { n_samples: self.eta_samples, max_time: self.max_time, seed: self.seed, ..EtaConfig::default() },
            max_time: self.max_time,
            ..ExistenceConfig::default()
        }
    }

    pub fn attraction_config(&self) -> AttractionConfig {
        AttractionConfig { n_samples: self.n_samples, seed: self.seed, reference_d: self.reference_d, ..Default::default() }
    }

    pub fn error_curve_config(&self) -> ErrorCurveConfig {
        ErrorCurveConfig {
            delta0: self.delta0,
            gamma: self.gamma,
            periods: self.periods,
            ref_factor: self.ref_factor,
            sync: SyncConfig::default(),
            existence: self.existence_config(),
            floor_constant: self.floor_constant,
            ..ErrorCurveConfig::default()
        }
    }
}
