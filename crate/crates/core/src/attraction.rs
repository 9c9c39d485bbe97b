//! Averaged contraction over the section disk `Y_0`, the error-floor
//! constant `D`, and the basin-of-attraction certificate.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{estimate_eta, GlobalConstants, SectionDisk};
use crate::error::{Error, Result};
use crate::euler::{simulate_until_return, EulerTrajectory, Exclusion, Section};
use crate::field::VectorField;
use crate::measure::{mu_perp, MeasureMethod};
use crate::tube::{build_tube, ExistenceCertificate, ExistenceConfig, TubeInputs, Verdict};

/// `K(z, s)` at both ends of the last segment of the loop started at `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionExponent {
    pub z: Vec<f64>,
    #[serde(rename = "K0")]
    pub k0: f64,
    #[serde(rename = "Kh")]
    pub kh: f64,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "R1")]
    pub r1: f64,
    /// `σ` of the last segment, so `Kh - K0 = h · sigma_last`.
    pub sigma_last: f64,
    /// `ln(δ(R̃_1)/δ_0)`, the exponent at the return time.
    pub k_return: f64,
}

impl ContractionExponent {
    pub fn k_max(&self) -> f64 {
        self.k0.max(self.kh)
    }
}

/// What the sweep needs besides the starting point.
#[derive(Clone, Debug)]
pub struct ExponentSetup<'a> {
    pub field: &'a VectorField,
    /// `S_0`, shared by every sample.
    pub section: Section,
    pub h: f64,
    pub delta0: f64,
    pub gamma: f64,
    pub lipschitz: f64,
    pub m_f: f64,
    pub config: &'a ExistenceConfig,
}

/// Builds the tube around the Euler loop from `z` back to `S_0` and reads off
/// the accumulated exponent.
pub fn contraction_exponent(setup: &ExponentSetup<'_>, z: &DVector<f64>) -> Result<ContractionExponent> {
    let h = setup.h;
    let (traj, crossing) = simulate_until_return(
        setup.field,
        z,
        h,
        &setup.section,
        Exclusion::standard(h, setup.delta0),
        setup.config.max_time,
    )?;
    let inputs = TubeInputs { delta0: setup.delta0, gamma: setup.gamma, lipschitz: setup.lipschitz, m_f: setup.m_f };
    let tube = build_tube(&traj, &crossing, &inputs, &setup.config.tube)?;
    Ok(ContractionExponent {
        z: z.iter().copied().collect(),
        k0: tube.k_exponent(0.0),
        kh: tube.k_exponent(h),
        n1: tube.n1,
        r1: tube.r1,
        sigma_last: tube.segments[tube.n1 - 1].sigma,
        k_return: tube.k_exponent(tube.s_star),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub d: f64,
    pub samples: Vec<ContractionExponent>,
}

/// `d = max_z max(K(z,0), K(z,h))` over `n_samples` points of `y0`.
pub fn sweep_y0(setup: &ExponentSetup<'_>, y0: &SectionDisk, n_samples: usize, seed: u64) -> Result<Sweep> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("need at least one Y_0 sample".into()));
    }
    let points = y0.sample(n_samples, seed);
    let samples = points
        .par_iter()
        .map(|z| contraction_exponent(setup, z))
        .collect::<Result<Vec<_>>>()?;
    let d = samples.iter().map(ContractionExponent::k_max).fold(f64::NEG_INFINITY, f64::max);
    Ok(Sweep { d, samples })
}

/// `D = M_C (2L/(γa) + b + 1)`.
pub fn compute_d(m_c: f64, lipschitz: f64, gamma: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::InvalidParameter(format!("a must be positive, got {a}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("γ must be positive, got {gamma}")));
    }
    Ok(m_c * (2.0 * lipschitz / (gamma * a) + b + 1.0))
}

/// Weight 1/2 below `γ`, 3/2 otherwise.
pub fn rho(mu_perp: f64, gamma: f64) -> f64 {
    if mu_perp < gamma {
        0.5
    } else {
        1.5
    }
}

/// `∫ ρ(t) μ⊥[J(ξ(t))] dt` over the first `n_steps` steps of `traj`, by the
/// composite trapezoid rule on its nodes.
pub fn integral_criterion(traj: &EulerTrajectory, n_steps: usize, gamma: f64, method: MeasureMethod) -> Result<f64> {
    let field = traj.field();
    let n = n_steps.min(traj.n_steps());
    let values = (0..=n)
        .into_par_iter()
        .map(|i| mu_perp(field, traj.node(i), method).map(|m| rho(m, gamma) * m))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.windows(2).map(|w| 0.5 * (w[0] + w[1]) * traj.h()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractionConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// The integral criterion runs on a loop with step `h / fine_factor`.
    pub integral_fine_factor: f64,
    /// A published bound to compare `d` against.
    pub reference_d: Option<f64>,
}

impl Default for AttractionConfig {
    fn default() -> Self {
        AttractionConfig { n_samples: 11, seed: 0, integral_fine_factor: 10.0, reference_d: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralCheck {
    pub value: f64,
    pub four_d: f64,
    pub holds: bool,
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnTimeBounds {
    #[serde(rename = "T_lo")]
    pub t_lo: f64,
    #[serde(rename = "T_hi")]
    pub t_hi: f64,
    #[serde(rename = "R_prime")]
    pub r_prime: f64,
    pub eta: f64,
    pub established: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DInputs {
    #[serde(rename = "M_C")]
    pub m_c: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractionCertificate {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    pub verdict: Verdict,
    pub d: f64,
    pub sample_count: usize,
    pub samples: Vec<ContractionExponent>,
    #[serde(rename = "D")]
    pub big_d: f64,
    #[serde(rename = "D_inputs")]
    pub d_inputs: DInputs,
    pub integral: IntegralCheck,
    pub return_time_bounds: ReturnTimeBounds,
    pub reference_d: Option<f64>,
    /// `d - reference_d`.
    pub reference_gap: Option<f64>,
    pub existence: ExistenceCertificate,
}

/// Attraction certificate for `Y_0 = B(x̃_0, δ_0) ∩ S_0` on top of a
/// certified existence run.
pub fn certify_attraction(
    existence: &ExistenceCertificate,
    field: &VectorField,
    existence_config: &ExistenceConfig,
    config: &AttractionConfig,
) -> Result<AttractionCertificate> {
    if existence.verdict != Verdict::Certified {
        return Err(Error::Precondition("existence certificate is not certified".into()));
    }
    let constants: &GlobalConstants = existence
        .constants
        .as_ref()
        .ok_or_else(|| Error::Precondition("existence certificate carries no constants".into()))?;
    let x0 = DVector::from_vec(existence.x0.clone());
    let (h, delta0, gamma) = (existence.h, existence.delta0, existence.gamma);
    let section = Section::through(field, &x0)?;
    let disk = SectionDisk { center: x0.clone(), radius: delta0, normal: section.normal.clone() };
    let setup = ExponentSetup {
        field,
        section: section.clone(),
        h,
        delta0,
        gamma,
        lipschitz: constants.lipschitz,
        m_f: constants.m_f,
        config: existence_config,
    };
    let sweep = sweep_y0(&setup, &disk, config.n_samples, config.seed)?;
    let big_d = compute_d(constants.m_c, constants.lipschitz, gamma, constants.a, constants.b)?;

    let eta = match existence.conditions.eta.estimate.clone() {
        Some(e) => e,
        None => estimate_eta(field, &disk, h, &existence_config.eta)?,
    };
    let return_time_bounds = ReturnTimeBounds {
        t_lo: eta.t_lo,
        t_hi: eta.t_hi,
        r_prime: eta.r_prime,
        eta: eta.eta,
        established: eta.eta > 0.0 && eta.t_hi.is_finite() && eta.r_prime.is_finite(),
    };

    let h_fine = h / config.integral_fine_factor;
    let (loop_traj, crossing) = simulate_until_return(
        field,
        &x0,
        h_fine,
        &section,
        Exclusion::standard(h_fine, delta0),
        existence_config.max_time,
    )?;
    let method = existence_config.tube.method.unwrap_or_else(|| MeasureMethod::default_for(field.dim()));
    let value = integral_criterion(&loop_traj, crossing.step_index + 1, gamma, method)?;
    let integral = IntegralCheck { value, four_d: 4.0 * sweep.d, holds: value <= 4.0 * sweep.d, period: crossing.time };

    let verdict = if sweep.d < 0.0 && return_time_bounds.established { Verdict::Certified } else { Verdict::Failed };
    Ok(AttractionCertificate {
        system: existence.system.clone(),
        params: existence.params.clone(),
        verdict,
        d: sweep.d,
        sample_count: sweep.samples.len(),
        samples: sweep.samples,
        big_d,
        d_inputs: DInputs { m_c: constants.m_c, lipschitz: constants.lipschitz, gamma, a: constants.a, b: constants.b },
        integral,
        return_time_bounds,
        reference_d: config.reference_d,
        reference_gap: config.reference_d.map(|r| sweep.d - r),
        existence: existence.clone(),
    })
}
