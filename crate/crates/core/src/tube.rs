//! Reachability and contraction tubes around one loop of an Euler trajectory,
//! the step-size and return-inclusion conditions, and the existence
//! certificate.
//!
//! Segment `i` (0-based, `i < N_1`) carries the node radius `δ_i` and the
//! rate `σ_{i+1}` that drives `δ_i(s) = δ_i e^{σ_{i+1} s}` over `s ∈ [0, h]`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{
    estimate_ab, estimate_eta, estimate_lipschitz, estimate_speed_bounds, EtaConfig, EtaEstimate, GlobalConstants,
    Provenance, RegionBox, SectionDisk, SpeedBounds,
};
use crate::error::{Error, Result};
use crate::euler::{simulate_until_return, Crossing, EulerTrajectory, Exclusion, Section};
use crate::field::VectorField;
use crate::linalg::reject;
use crate::measure::{
    grid_variation, lambda_over_slice, mu_perp, sigma_rate, transverse_from_parts, MeasureMethod, SigmaBranch, Slice,
    SlicePath, SliceSampling, ALIGNMENT_WARNING,
};
use crate::report::fmt_f64;

/// Which bound on `|⟨f(x̃_i(t)) - f(x̃_i), e⟩| / (t |e|)` enters the step
/// condition, with `e ⊥ f(x̃_i(t))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepBound {
    /// `L · M̃_i`.
    Lipschitz,
    /// `sup_τ |J(x̃_i(τ)) f(x̃_i)|`.
    Directional,
    /// `sup_{τ,t} |P⊥_{f(x̃_i(t))} J(x̃_i(τ)) f(x̃_i)|`.
    Transverse,
}

impl StepBound {
    pub fn as_str(self) -> &'static str {
        match self {
            StepBound::Lipschitz => "lipschitz",
            StepBound::Directional => "directional",
            StepBound::Transverse => "transverse",
        }
    }
}

/// How the reachability radius `α` is carried from segment to segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// `α_i(s) = δ_i + b M_f s`: each segment starts from the contraction radius.
    Restarted,
    /// `α_{i+1} = α_i + b M_f h` from `α_0 = δ_0`.
    Chained,
}

impl AlphaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlphaMode::Restarted => "restarted",
            AlphaMode::Chained => "chained",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeConfig {
    pub sampling: SliceSampling,
    /// Defaults to projection in the plane, eigenvector matching otherwise.
    pub method: Option<MeasureMethod>,
    /// Segments sharing one `Λ` and one `(a, b)` pair.
    pub lambda_stride: usize,
    pub passes: usize,
    pub step_bound: StepBound,
    pub alpha_mode: AlphaMode,
    /// Forces every `σ` to this value. Test hook.
    #[serde(skip)]
    pub sigma_override: Option<f64>,
}

impl Default for TubeConfig {
    fn default() -> Self {
        TubeConfig {
            sampling: SliceSampling::default(),
            method: None,
            lambda_stride: 10,
            passes: 2,
            step_bound: StepBound::Transverse,
            alpha_mode: AlphaMode::Restarted,
            sigma_override: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeInputs {
    pub delta0: f64,
    pub gamma: f64,
    pub lipschitz: f64,
    pub m_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSegment {
    pub index: usize,
    pub delta_start: f64,
    pub alpha_start: f64,
    pub alpha_rate: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub branch: SigmaBranch,
    pub a: f64,
    pub b: f64,
    pub m_tilde: f64,
    /// Bound selected by [`StepBound`].
    pub g_bound: f64,
    pub g_lipschitz: f64,
    pub mu_perp_node: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub pass: usize,
    pub delta_end: f64,
    pub delta_min: f64,
    pub exponent: f64,
    pub a_min: f64,
    pub b_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug)]
pub struct Tube {
    pub segments: Vec<TubeSegment>,
    pub h: f64,
    pub delta0: f64,
    pub gamma: f64,
    pub lipschitz: f64,
    pub m_f: f64,
    pub r1: f64,
    pub n1: usize,
    pub s_star: f64,
    pub step_bound: StepBound,
    pub passes: Vec<PassSummary>,
    /// `|f|` extremes over the sampled slices.
    pub slice_speed: SpeedBounds,
    pub alpha_max: f64,
    pub alignment_flags: usize,
    delta_end: f64,
    /// `h Σ_{j<i} σ_j` for `i = 0..=N_1`.
    exponent_prefix: Vec<f64>,
}

struct SegmentBounds {
    m_tilde: f64,
    g_transverse: f64,
    g_directional: f64,
    mu_perp_node: f64,
    alignment_flag: bool,
}

fn padded_max(values: &[f64], variation: f64, pad: f64) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad * variation
}

fn adjacent_variation(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

fn segment_bounds(
    traj: &EulerTrajectory,
    i: usize,
    sampling: &SliceSampling,
    method: MeasureMethod,
) -> Result<SegmentBounds> {
    let field = traj.field();
    let f_i = traj.f_node(i);
    let taus = sampling.taus(traj.h());
    let mut speeds = Vec::with_capacity(taus.len());
    let mut flows = Vec::with_capacity(taus.len());
    let mut jf = Vec::with_capacity(taus.len());
    for &s in &taus {
        let c = traj.segment_point(i, s);
        let f_c = field.eval_f(&c)?;
        speeds.push(f_c.norm());
        jf.push(field.eval_jacobian(&c)? * f_i);
        flows.push(f_c);
    }
    let pad = sampling.pad_factor;
    let m_tilde = padded_max(&speeds, adjacent_variation(&speeds), pad);
    let jf_norms: Vec<f64> = jf.iter().map(|v| v.norm()).collect();
    let g_directional = padded_max(&jf_norms, adjacent_variation(&jf_norms), pad);
    let perp: Vec<Vec<f64>> = jf
        .iter()
        .map(|v| flows.iter().map(|n| reject(v, n).norm()).collect())
        .collect();
    let adjacency: Vec<(usize, usize)> = (1..flows.len()).map(|k| (k - 1, k)).collect();
    let g_transverse = perp.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
        + pad * grid_variation(&perp, &adjacency);
    let node = traj.node(i);
    let (mu_perp_node, alignment_flag) = match method {
        MeasureMethod::EigenvectorMatch => {
            let spec = transverse_from_parts(&field.eval_jacobian(node)?, f_i, method)?;
            (spec.mu_perp, spec.alignment < ALIGNMENT_WARNING)
        }
        MeasureMethod::Projection => (mu_perp(field, node, method)?, false),
    };
    Ok(SegmentBounds { m_tilde, g_transverse, g_directional, mu_perp_node, alignment_flag })
}

/// Builds the tube over `[0, N_1 h]` for a trajectory whose first return is
/// `crossing`. The `(a, b) ↔ δ` circularity is resolved by repeated passes:
/// the first uses `a = b = 1`, later ones estimate `(a, b)` per window from
/// the previous pass's rates.
pub fn build_tube(traj: &EulerTrajectory, crossing: &Crossing, inputs: &TubeInputs, config: &TubeConfig) -> Result<Tube> {
    let field = traj.field();
    let h = traj.h();
    let n1 = crossing.step_index + 1;
    if traj.n_steps() < n1 {
        return Err(Error::InvalidParameter(format!(
            "trajectory has {} steps, return needs {n1}",
            traj.n_steps()
        )));
    }
    if !(inputs.delta0 > 0.0) {
        return Err(Error::InvalidParameter(format!("δ0 must be positive, got {}", inputs.delta0)));
    }
    let method = config.method.unwrap_or_else(|| MeasureMethod::default_for(field.dim()));
    let stride = config.lambda_stride.max(1);
    let passes = config.passes.max(1);
    let sampling = config.sampling;

    let bounds = (0..n1)
        .into_par_iter()
        .map(|i| segment_bounds(traj, i, &sampling, method))
        .collect::<Result<Vec<_>>>()?;

    let windows: Vec<(usize, usize)> = (0..n1).step_by(stride).map(|i0| (i0, (i0 + stride).min(n1))).collect();
    let mut prev_sigma: Option<Vec<f64>> = None;
    let mut summaries = Vec::with_capacity(passes);
    let mut segments = Vec::new();
    let mut slice_speed = SpeedBounds { m: f64::INFINITY, big_m: 0.0, equilibrium: false };
    let mut alpha_max: f64 = 0.0;

    for pass in 1..=passes {
        let final_pass = pass == passes;
        let mut window_sigma = Vec::with_capacity(windows.len());
        let mut delta = inputs.delta0;
        let mut delta_min = delta;
        let mut alpha = inputs.delta0;
        let mut exponent = 0.0;
        let (mut a_min, mut b_max) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut s_min, mut s_max) = (f64::INFINITY, f64::NEG_INFINITY);
        if final_pass {
            segments = Vec::with_capacity(n1);
        }
        for (w, &(i0, i1)) in windows.iter().enumerate() {
            let span = (i1 - i0) as f64 * h;
            let delta_i0 = delta;
            let sigma_guess = match &prev_sigma {
                Some(prev) => prev[w],
                None => window_sigma.last().copied().unwrap_or(0.0),
            };
            let (a, b) = match &prev_sigma {
                None => (1.0, 1.0),
                Some(prev) => {
                    let sp = prev[w];
                    let ab = estimate_ab(traj, i0..i1, |tau| delta_i0 * (sp * tau).exp(), &sampling)?;
                    (ab.a, ab.b)
                }
            };
            let alpha_rate = b * inputs.m_f;
            let (radius_start, radius_rate) = match config.alpha_mode {
                AlphaMode::Restarted if i1 - i0 == 1 => (delta_i0, alpha_rate),
                AlphaMode::Restarted => (delta_i0 * (sigma_guess.max(0.0) * span).exp() + alpha_rate * h, 0.0),
                AlphaMode::Chained => (alpha, alpha_rate),
            };
            let slice = Slice {
                path: SlicePath::Trajectory { traj, t0: traj.time(i0) },
                span,
                radius_start,
                radius_rate,
            };
            let lb = lambda_over_slice(field, &slice, &sampling, method, i0)?;
            alpha_max = alpha_max.max(slice.radius(span));
            let rate = match config.sigma_override {
                Some(sigma) => crate::measure::SigmaRate {
                    segment_index: i0,
                    sigma,
                    branch: if sigma < 0.0 { SigmaBranch::Contracting } else { SigmaBranch::Regularized },
                },
                None => sigma_rate(i0, lb.lambda, a, b, inputs.gamma)?,
            };
            let sigma = rate.sigma;
            window_sigma.push(sigma);
            s_min = s_min.min(sigma);
            s_max = s_max.max(sigma);
            if pass == 1 {
                // informational: the bracket this pass's profile would give
                let ab = estimate_ab(traj, i0..i1, |tau| delta_i0 * (sigma * tau).exp(), &sampling)?;
                a_min = a_min.min(ab.a);
                b_max = b_max.max(ab.b);
            } else {
                a_min = a_min.min(a);
                b_max = b_max.max(b);
            }
            if final_pass {
                slice_speed.m = slice_speed.m.min(lb.speed_min);
                slice_speed.big_m = slice_speed.big_m.max(lb.speed_max);
            }
            #[allow(clippy::needless_range_loop)]
            for i in i0..i1 {
                if final_pass {
                    let sb = &bounds[i];
                    let g_lipschitz = inputs.lipschitz * sb.m_tilde;
                    segments.push(TubeSegment {
                        index: i,
                        delta_start: delta,
                        alpha_start: match config.alpha_mode {
                            AlphaMode::Restarted => delta,
                            AlphaMode::Chained => alpha,
                        },
                        alpha_rate,
                        lambda: lb.lambda,
                        sigma,
                        branch: rate.branch,
                        a,
                        b,
                        m_tilde: sb.m_tilde,
                        g_bound: match config.step_bound {
                            StepBound::Lipschitz => g_lipschitz,
                            StepBound::Directional => sb.g_directional,
                            StepBound::Transverse => sb.g_transverse,
                        },
                        g_lipschitz,
                        mu_perp_node: sb.mu_perp_node,
                    });
                }
                delta *= (sigma * h).exp();
                exponent += sigma * h;
                alpha += alpha_rate * h;
                delta_min = delta_min.min(delta);
            }
        }
        summaries.push(PassSummary {
            pass,
            delta_end: delta,
            delta_min,
            exponent,
            a_min,
            b_max,
            sigma_min: s_min,
            sigma_max: s_max,
        });
        prev_sigma = Some(window_sigma);
    }
    slice_speed.equilibrium = !(slice_speed.m > crate::measure::M_FLOOR);

    let mut exponent_prefix = Vec::with_capacity(n1 + 1);
    let mut acc = 0.0;
    exponent_prefix.push(0.0);
    for seg in &segments {
        acc += h * seg.sigma;
        exponent_prefix.push(acc);
    }
    let delta_end = segments
        .last()
        .map(|s| s.delta_start * (s.sigma * h).exp())
        .unwrap_or(inputs.delta0);
    Ok(Tube {
        segments,
        h,
        delta0: inputs.delta0,
        gamma: inputs.gamma,
        lipschitz: inputs.lipschitz,
        m_f: inputs.m_f,
        r1: crossing.time,
        n1,
        s_star: crossing.s_star,
        step_bound: config.step_bound,
        passes: summaries,
        slice_speed,
        alpha_max,
        alignment_flags: bounds.iter().filter(|b| b.alignment_flag).count(),
        delta_end,
        exponent_prefix,
    })
}

impl Tube {
    /// `δ_i` for `i = 0..=N_1`, from the multiplicative chain.
    pub fn delta_node(&self, i: usize) -> f64 {
        if i < self.n1 {
            self.segments[i].delta_start
        } else {
            self.delta_end
        }
    }

    pub fn delta_end(&self) -> f64 {
        self.delta_end
    }

    /// `δ_0 exp(h Σ_{k<i} σ_k)`.
    pub fn delta_closed_form(&self, i: usize) -> f64 {
        self.delta0 * self.exponent_prefix[i].exp()
    }

    /// `δ(t)` on `[0, N_1 h]`.
    pub fn delta_at(&self, t: f64) -> Option<f64> {
        let horizon = self.n1 as f64 * self.h;
        if !(t >= 0.0 && t <= horizon * (1.0 + 1e-15)) {
            return None;
        }
        let i = ((t / self.h).floor() as usize).min(self.n1 - 1);
        let s = (t - i as f64 * self.h).clamp(0.0, self.h);
        let seg = &self.segments[i];
        Some(seg.delta_start * (seg.sigma * s).exp())
    }

    pub fn delta_min(&self) -> f64 {
        (0..=self.n1).map(|i| self.delta_node(i)).fold(f64::INFINITY, f64::min)
    }

    pub fn delta_max(&self) -> f64 {
        (0..=self.n1).map(|i| self.delta_node(i)).fold(0.0, f64::max)
    }

    /// `K(s) = h Σ_{k<N_1} σ_k + s σ_{N_1}`.
    pub fn k_exponent(&self, s: f64) -> f64 {
        self.exponent_prefix[self.n1 - 1] + s * self.segments[self.n1 - 1].sigma
    }

    /// Right-hand side of the step condition on segment `i` with the
    /// configured bound.
    pub fn step_rhs(&self, i: usize) -> f64 {
        let s = &self.segments[i];
        self.h * (2.0 * s.g_bound / (self.gamma * s.a) + s.m_tilde + s.b * self.m_f)
    }

    /// The same with `L · M̃_i`.
    pub fn step_rhs_lipschitz(&self, i: usize) -> f64 {
        let s = &self.segments[i];
        self.h * (2.0 * s.g_lipschitz / (self.gamma * s.a) + s.m_tilde + s.b * self.m_f)
    }

    pub fn a_min(&self) -> f64 {
        self.segments.iter().map(|s| s.a).fold(f64::INFINITY, f64::min)
    }

    pub fn b_max(&self) -> f64 {
        self.segments.iter().map(|s| s.b).fold(0.0, f64::max)
    }

    pub fn m_tilde_max(&self) -> f64 {
        self.segments.iter().map(|s| s.m_tilde).fold(0.0, f64::max)
    }

    pub fn mu_perp_range(&self) -> (f64, f64) {
        self.segments.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.mu_perp_node), hi.max(s.mu_perp_node))
        })
    }

    pub fn sigma_stats(&self) -> SigmaStats {
        let n = self.segments.len() as f64;
        let (mut lo, mut hi, mut sum, mut contracting) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for s in &self.segments {
            lo = lo.min(s.sigma);
            hi = hi.max(s.sigma);
            sum += s.sigma;
            contracting += usize::from(s.branch == SigmaBranch::Contracting);
        }
        SigmaStats { min: lo, max: hi, mean: sum / n, contracting_fraction: contracting as f64 / n }
    }

    pub fn lambda_range(&self) -> (f64, f64) {
        self.segments.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.lambda), hi.max(s.lambda))
        })
    }

    pub fn summary(&self) -> TubeSummary {
        let (mu_lo, mu_hi) = self.mu_perp_range();
        let (l_lo, l_hi) = self.lambda_range();
        TubeSummary {
            n1: self.n1,
            r1: self.r1,
            delta_end: self.delta_end,
            delta_min: self.delta_min(),
            delta_max: self.delta_max(),
            sigma_stats: self.sigma_stats(),
            lambda_range: [l_lo, l_hi],
            mu_perp_range: [mu_lo, mu_hi],
            alpha_max: self.alpha_max,
            alignment_flags: self.alignment_flags,
            passes: self.passes.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub contracting_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSummary {
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "R1")]
    pub r1: f64,
    pub delta_end: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub sigma_stats: SigmaStats,
    pub lambda_range: [f64; 2],
    pub mu_perp_range: [f64; 2],
    pub alpha_max: f64,
    pub alignment_flags: usize,
    pub passes: Vec<PassSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub holds: bool,
    pub min_margin: f64,
    pub argmin_i: usize,
    pub rhs_max: f64,
    pub rhs_argmax: usize,
    pub bound: StepBound,
    /// The same condition with the Lipschitz bound, for reference.
    pub lipschitz_rhs_max: f64,
    pub lipschitz_min_margin: f64,
    pub lipschitz_holds: bool,
    pub margins: Vec<f64>,
}

/// Margins `min_s δ_i(s) - RHS_i` for every segment.
pub fn check_step_condition(tube: &Tube) -> StepCheck {
    let mut margins = Vec::with_capacity(tube.n1);
    let (mut min_margin, mut argmin_i) = (f64::INFINITY, 0);
    let (mut rhs_max, mut rhs_argmax) = (f64::NEG_INFINITY, 0);
    let (mut l_rhs_max, mut l_min_margin) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..tube.n1 {
        // δ_i(s) is monotone, so its minimum sits at an endpoint
        let delta_low = tube.delta_node(i).min(tube.delta_node(i + 1));
        let rhs = tube.step_rhs(i);
        let margin = delta_low - rhs;
        if margin < min_margin {
            min_margin = margin;
            argmin_i = i;
        }
        if rhs > rhs_max {
            rhs_max = rhs;
            rhs_argmax = i;
        }
        let l_rhs = tube.step_rhs_lipschitz(i);
        l_rhs_max = l_rhs_max.max(l_rhs);
        l_min_margin = l_min_margin.min(delta_low - l_rhs);
        margins.push(margin);
    }
    StepCheck {
        holds: min_margin >= 0.0,
        min_margin,
        argmin_i,
        rhs_max,
        rhs_argmax,
        bound: tube.step_bound,
        lipschitz_rhs_max: l_rhs_max,
        lipschitz_min_margin: l_min_margin,
        lipschitz_holds: l_min_margin >= 0.0,
        margins,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricCheck {
    pub holds: bool,
    pub points: usize,
    pub max_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionCheck {
    /// `|x̃(R̃_1) - x̃_0| + δ(R̃_1)`.
    pub lhs: f64,
    /// `δ_0`.
    pub rhs: f64,
    pub holds: bool,
    pub return_distance: f64,
    #[serde(rename = "delta_R1")]
    pub delta_r1: f64,
    pub geometric_check: GeometricCheck,
}

/// The numeric sufficient condition `|x̃(R̃_1) - x̃_0| + δ(R̃_1) < δ_0` plus
/// a direct check of sampled points of `C_{N_1} ∩ S_0` against `Y_0`.
pub fn check_return_inclusion(tube: &Tube, traj: &EulerTrajectory) -> Result<InclusionCheck> {
    let j = tube.n1 - 1;
    let x0 = traj.x0();
    let return_point = traj.segment_point(j, tube.s_star);
    let return_distance = (&return_point - x0).norm();
    let seg = &tube.segments[j];
    let delta_r1 = seg.delta_start * (seg.sigma * tube.s_star).exp();
    let lhs = return_distance + delta_r1;
    let geometric_check = geometric_inclusion(tube, traj)?;
    Ok(InclusionCheck {
        lhs,
        rhs: tube.delta0,
        holds: lhs < tube.delta0,
        return_distance,
        delta_r1,
        geometric_check,
    })
}

fn geometric_inclusion(tube: &Tube, traj: &EulerTrajectory) -> Result<GeometricCheck> {
    const BOUNDARY_POINTS: usize = 64;
    const S_GRID: usize = 33;
    let field = traj.field();
    let j = tube.n1 - 1;
    let seg = &tube.segments[j];
    let h = tube.h;
    let section = Section::through(field, traj.x0())?;
    // Boundary offsets expressed in coordinates of the normal complement,
    // then carried along the segment with the local complement basis.
    let f_end = field.eval_f(&traj.segment_point(j, h))?;
    let n_ball = if field.dim() == 2 { BOUNDARY_POINTS - 1 } else { BOUNDARY_POINTS };
    let q_end = crate::linalg::complement_basis(&f_end);
    let coords: Vec<DVector<f64>> = SliceSampling { n_s: 1, n_ball, pad_factor: 0.0 }
        .cross_section(&f_end)
        .0
        .iter()
        .map(|u| q_end.transpose() * u)
        .collect();
    let point = |s: f64, u: &DVector<f64>| -> Result<DVector<f64>> {
        let c = traj.segment_point(j, s);
        let q = crate::linalg::complement_basis(&field.eval_f(&c)?);
        let r = seg.delta_start * (seg.sigma * s).exp();
        Ok(c + q * u * r)
    };
    let mut max_distance: f64 = 0.0;
    let mut found = 0;
    let mut holds = true;
    for u in &coords {
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..S_GRID {
            let s = h * k as f64 / (S_GRID - 1) as f64;
            let g = section.value(&point(s, u)?);
            if let Some((s0, g0)) = prev {
                if (g0 < 0.0 && g >= 0.0) || (g0 > 0.0 && g <= 0.0) {
                    let (mut lo, mut hi, mut g_lo) = (s0, s, g0);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        let gm = section.value(&point(mid, u)?);
                        if (gm < 0.0) == (g_lo < 0.0) {
                            lo = mid;
                            g_lo = gm;
                        } else {
                            hi = mid;
                        }
                    }
                    let z = point(0.5 * (lo + hi), u)?;
                    let d = (&z - traj.x0()).norm();
                    max_distance = max_distance.max(d);
                    holds &= d <= tube.delta0;
                    found += 1;
                }
            }
            prev = Some((s, g));
        }
    }
    Ok(GeometricCheck { holds: holds && found > 0, points: found, max_distance })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Certified,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: String,
    pub detail: String,
}

impl Diagnostic {
    fn new(kind: &str, detail: impl Into<String>) -> Self {
        Diagnostic { kind: kind.to_string(), detail: detail.into() }
    }

    fn from_error(e: &Error) -> Self {
        Diagnostic::new(e.kind(), e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaCondition {
    pub established: bool,
    pub value: Option<f64>,
    pub estimate: Option<EtaEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    pub eq_h: Option<StepCheck>,
    pub eq_new: Option<InclusionCheck>,
    pub eta: EtaCondition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExistenceCertificate {
    pub system: String,
    pub params: BTreeMap<String, f64>,
    pub x0: Vec<f64>,
    pub h: f64,
    pub delta0: f64,
    pub gamma: f64,
    pub verdict: Verdict,
    pub diagnostics: Vec<Diagnostic>,
    pub conditions: Conditions,
    pub constants: Option<GlobalConstants>,
    pub tube_summary: Option<TubeSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExistenceConfig {
    pub tube: TubeConfig,
    /// Grid intervals per axis for `L` and `M_f`.
    pub grid_resolution: usize,
    pub lipschitz_safety: f64,
    /// Region margin as a multiple of `δ_0`.
    pub region_margin_factor: f64,
    pub eta: EtaConfig,
    /// Longest simulated time when looking for the first return.
    pub max_time: f64,
}

impl Default for ExistenceConfig {
    fn default() -> Self {
        ExistenceConfig {
            tube: TubeConfig::default(),
            grid_resolution: 64,
            lipschitz_safety: 1.0,
            region_margin_factor: 2.0,
            eta: EtaConfig::default(),
            max_time: 100.0,
        }
    }
}

/// Everything produced by [`certify_existence`].
#[derive(Clone, Debug)]
pub struct ExistenceRun {
    pub certificate: ExistenceCertificate,
    pub trajectory: Option<EulerTrajectory>,
    pub crossing: Option<Crossing>,
    pub tube: Option<Tube>,
    pub region: Option<RegionBox>,
}

struct RegionEstimates {
    region: RegionBox,
    lipschitz: f64,
    m_f: f64,
}

fn region_estimates(field: &VectorField, traj: &EulerTrajectory, margin: f64, cfg: &ExistenceConfig) -> Result<RegionEstimates> {
    let region = RegionBox::around(traj.nodes(), margin)?;
    let lipschitz = estimate_lipschitz(field, &region, cfg.grid_resolution, cfg.lipschitz_safety)?;
    let speed = estimate_speed_bounds(field, &region, cfg.grid_resolution)?;
    Ok(RegionEstimates { region, lipschitz, m_f: speed.big_m })
}

/// Runs the whole existence pipeline. Blocking problems become a failed
/// verdict with diagnostics rather than an error.
pub fn certify_existence(
    field: &VectorField,
    x0: &DVector<f64>,
    h: f64,
    delta0: f64,
    gamma: f64,
    config: &ExistenceConfig,
) -> ExistenceRun {
    let mut cert = ExistenceCertificate {
        system: field.name().to_string(),
        params: field.params().clone(),
        x0: x0.iter().copied().collect(),
        h,
        delta0,
        gamma,
        verdict: Verdict::Failed,
        diagnostics: Vec::new(),
        conditions: Conditions {
            eq_h: None,
            eq_new: None,
            eta: EtaCondition { established: false, value: None, estimate: None },
        },
        constants: None,
        tube_summary: None,
    };
    let mut run = ExistenceRun { certificate: cert.clone(), trajectory: None, crossing: None, tube: None, region: None };

    let fail = |mut cert: ExistenceCertificate, mut run: ExistenceRun, d: Diagnostic| {
        cert.diagnostics.push(d);
        cert.verdict = Verdict::Failed;
        run.certificate = cert;
        run
    };
    if !(h > 0.0 && delta0 > 0.0 && gamma > 0.0) {
        let d = Diagnostic::new("invalid-parameter", format!("need h, δ0, γ > 0; got {h}, {delta0}, {gamma}"));
        return fail(cert, run, d);
    }

    let section = match Section::through(field, x0) {
        Ok(s) => s,
        Err(e) => return fail(cert, run, Diagnostic::from_error(&e)),
    };
    let (traj, crossing) =
        match simulate_until_return(field, x0, h, &section, Exclusion::standard(h, delta0), config.max_time) {
            Ok(v) => v,
            Err(e) => return fail(cert, run, Diagnostic::from_error(&e)),
        };
    run.trajectory = Some(traj.clone());
    run.crossing = Some(crossing.clone());

    let mut margin = config.region_margin_factor * delta0;
    let mut attempt = 0;
    let (tube, est) = loop {
        let est = match region_estimates(field, &traj, margin, config) {
            Ok(v) => v,
            Err(e) => return fail(cert, run, Diagnostic::from_error(&e)),
        };
        let inputs = TubeInputs { delta0, gamma, lipschitz: est.lipschitz, m_f: est.m_f };
        let tube = match build_tube(&traj, &crossing, &inputs, &config.tube) {
            Ok(t) => t,
            Err(e) => return fail(cert, run, Diagnostic::from_error(&e)),
        };
        if tube.alpha_max <= margin {
            break (tube, est);
        }
        attempt += 1;
        if attempt > 1 {
            let d = Diagnostic::new(
                "region",
                format!("tube radius {} exceeds the region margin {margin}", tube.alpha_max),
            );
            return fail(cert, run, d);
        }
        margin = 2.0 * tube.alpha_max;
    };
    run.region = Some(est.region.clone());

    let step = check_step_condition(&tube);
    if !step.holds {
        cert.diagnostics.push(Diagnostic::new(
            "eq-h-violated",
            format!("segment {} has margin {:.3e}", step.argmin_i, step.min_margin),
        ));
    }
    let inclusion = match check_return_inclusion(&tube, &traj) {
        Ok(v) => v,
        Err(e) => return fail(cert, run, Diagnostic::from_error(&e)),
    };
    if !inclusion.holds {
        cert.diagnostics.push(Diagnostic::new(
            "eq-new-violated",
            format!("|x̃(R1) - x̃0| + δ(R1) = {:.6e} is not below δ0 = {delta0}", inclusion.lhs),
        ));
    }

    let disk = SectionDisk { center: x0.clone(), radius: delta0, normal: section.normal.clone() };
    let eta = estimate_eta(field, &disk, h, &config.eta);
    let (eta_cond, eta_est) = match eta {
        Ok(e) => (
            EtaCondition { established: e.eta > 0.0, value: Some(e.eta), estimate: Some(e.clone()) },
            Some(e),
        ),
        Err(e) => {
            cert.diagnostics.push(Diagnostic::from_error(&e));
            (EtaCondition { established: false, value: None, estimate: None }, None)
        }
    };
    if eta_est.is_some() && !eta_cond.established {
        cert.diagnostics.push(Diagnostic::new("eta", "return-time floor is not positive"));
    }

    let m_f = est.m_f.max(tube.slice_speed.big_m);
    let method = config.tube.method.unwrap_or_else(|| MeasureMethod::default_for(field.dim()));
    let constants = GlobalConstants {
        lipschitz: est.lipschitz,
        m_f,
        m_c: tube.slice_speed.big_m,
        m: tube.slice_speed.m,
        m_tilde_max: tube.m_tilde_max(),
        a: tube.a_min(),
        b: tube.b_max(),
        eta: eta_est.as_ref().map_or(f64::NAN, |e| e.eta),
        t_lo: eta_est.as_ref().map_or(f64::NAN, |e| e.t_lo),
        t_hi: eta_est.as_ref().map_or(f64::NAN, |e| e.t_hi),
        r_prime: eta_est.as_ref().map_or(f64::NAN, |e| e.r_prime),
        provenance: Provenance {
            region: est.region.clone(),
            grid_resolution: config.grid_resolution,
            lipschitz_safety: config.lipschitz_safety,
            slice_sampling: config.tube.sampling,
            lambda_stride: config.tube.lambda_stride.max(1),
            passes: config.tube.passes.max(1),
            step_bound: config.tube.step_bound.as_str().to_string(),
            alpha_mode: config.tube.alpha_mode.as_str().to_string(),
            eta_samples: config.eta.n_samples,
            eta_fine_factor: config.eta.fine_factor,
            tube_speed_source: format!("{method:?} slice samples").to_lowercase(),
        },
    };

    if step.holds && inclusion.holds && eta_cond.established {
        cert.verdict = Verdict::Certified;
    }
    cert.conditions = Conditions { eq_h: Some(step), eq_new: Some(inclusion), eta: eta_cond };
    cert.constants = Some(constants);
    cert.tube_summary = Some(tube.summary());
    run.certificate = cert;
    run.tube = Some(tube);
    run
}

/// Tube geometry: `i, t, center_1..n, alpha, delta, Lambda, sigma`.
pub fn write_tube_csv<W: Write>(tube: &Tube, traj: &EulerTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = traj.field().dim();
    let mut header = vec!["i".to_string(), "t".into()];
    header.extend((1..=dim).map(|k| format!("center_{k}")));
    header.extend(["alpha", "delta", "Lambda", "sigma"].map(String::from));
    w.write_record(&header)?;
    for seg in &tube.segments {
        let i = seg.index;
        let mut row = vec![i.to_string(), fmt_f64(traj.time(i))];
        row.extend(traj.node(i).iter().map(|v| fmt_f64(*v)));
        row.extend([seg.alpha_start, seg.delta_start, seg.lambda, seg.sigma].map(fmt_f64));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step dump: `i, Lambda, sigma, branch, mu_perp`.
pub fn write_steps_csv<W: Write>(tube: &Tube, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "Lambda", "sigma", "branch", "mu_perp"])?;
    for seg in &tube.segments {
        w.write_record([
            seg.index.to_string(),
            fmt_f64(seg.lambda),
            fmt_f64(seg.sigma),
            seg.branch.as_str().to_string(),
            fmt_f64(seg.mu_perp_node),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::from_registry;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn run_on(id: &str, x0: DVector<f64>, h: f64, delta0: f64, cfg: &ExistenceConfig) -> ExistenceRun {
        let field = from_registry(id, &BTreeMap::new()).unwrap();
        certify_existence(&field, &x0, h, delta0, 0.015, cfg)
    }

    fn quick() -> ExistenceConfig {
        ExistenceConfig {
            grid_resolution: 8,
            eta: EtaConfig { n_samples: 3, ..Default::default() },
            max_time: 20.0,
            ..Default::default()
        }
    }

    #[test]
    fn radial_contraction_has_no_return() {
        let run = run_on("linear-stable", dvector![1.0, 0.0], 1e-2, 0.1, &quick());
        assert_eq!(run.certificate.verdict, Verdict::Failed);
        assert_eq!(run.certificate.diagnostics[0].kind, "no-return");
    }

    #[test]
    fn forced_zero_rate_keeps_delta_constant() {
        let mut cfg = quick();
        cfg.tube.sigma_override = Some(0.0);
        let run = run_on("harmonic", dvector![1.0, 0.0], 1e-3, 0.1, &cfg);
        let tube = run.tube.unwrap();
        for i in 0..=tube.n1 {
            assert_eq!(tube.delta_node(i), 0.1);
        }
        assert_eq!(tube.k_exponent(tube.h), 0.0);
    }

    #[test]
    fn chain_matches_closed_form() {
        let field = from_registry("vanderpol", &[("p".to_string(), 0.3)].into_iter().collect()).unwrap();
        let cfg = ExistenceConfig { tube: TubeConfig { lambda_stride: 3, ..Default::default() }, ..quick() };
        let run = certify_existence(&field, &dvector![1.8929, -0.5383], 1e-3, 0.1, 0.015, &cfg);
        let tube = run.tube.unwrap();
        for i in 0..=tube.n1 {
            let cf = tube.delta_closed_form(i);
            assert!((tube.delta_node(i) - cf).abs() <= 1e-12 * cf);
        }
        assert_abs_diff_eq!(tube.k_exponent(tube.s_star), (run.certificate.conditions.eq_new.unwrap().delta_r1 / 0.1).ln(), epsilon = 1e-10);
    }

    #[test]
    fn harmonic_rate_is_gamma_floor() {
        let run = run_on("harmonic", dvector![1.0, 0.0], 1e-3, 0.1, &quick());
        let tube = run.tube.unwrap();
        for s in &tube.segments {
            assert_eq!(s.branch, SigmaBranch::Regularized);
            assert!(s.sigma > 0.0);
        }
        assert!(tube.k_exponent(0.0) > 0.0);
        assert_eq!(run.certificate.verdict, Verdict::Failed);
    }
}
