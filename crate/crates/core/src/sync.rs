//! Synchronized error between an Euler trajectory and a fine-step reference
//! solution, the tail-error experiment across step sizes, and the empirical
//! tube membership check.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attraction::compute_d;
use crate::error::{Error, Result};
use crate::euler::{simulate, EulerStepper, EulerTrajectory};
use crate::field::VectorField;
use crate::report::fmt_f64;
use crate::tube::{certify_existence, ExistenceConfig, Tube, Verdict};

/// Fine window of an Euler run generated on demand. Segments behind the
/// cursor are dropped, so memory stays bounded however long the run.
#[derive(Clone, Debug)]
pub struct StreamingReference {
    stepper: EulerStepper,
    base: usize,
    window: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl StreamingReference {
    pub fn new(field: &VectorField, y0: &DVector<f64>, h_ref: f64) -> Result<Self> {
        let stepper = EulerStepper::new(field, y0, h_ref)?;
        let first = (stepper.x().to_vec(), stepper.f().to_vec());
        Ok(StreamingReference { stepper, base: 0, window: VecDeque::from([first]) })
    }

    fn ensure(&mut self, k: usize) -> Result<()> {
        while self.base + self.window.len() <= k {
            self.stepper.step()?;
            self.window.push_back((self.stepper.x().to_vec(), self.stepper.f().to_vec()));
        }
        Ok(())
    }

    fn release_before(&mut self, k: usize) {
        while self.base < k && self.window.len() > 1 {
            self.window.pop_front();
            self.base += 1;
        }
    }
}

/// Stand-in for the exact flow from `y0`: a stored or streamed Euler run
/// with a much smaller step, evaluated on its own linear segments.
#[derive(Clone, Debug)]
pub enum ReferenceSolution {
    Stored(EulerTrajectory),
    Streaming(StreamingReference),
}

impl ReferenceSolution {
    pub fn streaming(field: &VectorField, y0: &DVector<f64>, h_ref: f64) -> Result<Self> {
        Ok(ReferenceSolution::Streaming(StreamingReference::new(field, y0, h_ref)?))
    }

    pub fn h(&self) -> f64 {
        match self {
            ReferenceSolution::Stored(t) => t.h(),
            ReferenceSolution::Streaming(s) => s.stepper.h(),
        }
    }

    /// Node `k` and its vector field value.
    fn segment(&mut self, k: usize) -> Result<(&[f64], &[f64])> {
        match self {
            ReferenceSolution::Stored(t) => {
                if k > t.n_steps() {
                    return Err(Error::OutOfRange { t: k as f64 * t.h(), horizon: t.horizon() });
                }
                Ok((t.node(k).as_slice(), t.f_node(k).as_slice()))
            }
            ReferenceSolution::Streaming(s) => {
                if k < s.base {
                    return Err(Error::OutOfRange { t: k as f64 * s.stepper.h(), horizon: f64::INFINITY });
                }
                s.ensure(k)?;
                let (x, f) = &s.window[k - s.base];
                Ok((x, f))
            }
        }
    }

    fn release_before(&mut self, k: usize) {
        if let ReferenceSolution::Streaming(s) = self {
            s.release_before(k);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    /// Accepted residual `|⟨ξ(θ) - x̃(t), f(x̃(t))⟩| / |f(x̃(t))|`.
    pub tau: f64,
    /// Search window past the previous root, in Euler steps.
    pub window_steps: f64,
    /// Sample times per Euler step; 1 samples the nodes only.
    pub refine: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig { tau: 1e-10, window_steps: 3.0, refine: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncSeries {
    pub h: f64,
    pub h_ref: f64,
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    pub errors: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl SyncSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// For each sample time `t_j` of `traj`, the first `θ_j ≥ θ_{j-1}` with
/// `⟨ξ(θ_j) - x̃(t_j), f(x̃(t_j))⟩ = 0`, found on the reference's linear
/// segments inside a window of `window_steps · h`.
pub fn synchronize(reference: &mut ReferenceSolution, traj: &EulerTrajectory, config: &SyncConfig) -> Result<SyncSeries> {
    let field = traj.field();
    let h = traj.h();
    let h_ref = reference.h();
    let refine = config.refine.max(1);
    let window = config.window_steps * h;
    let n_samples = traj.n_steps() * refine + 1;
    let mut series = SyncSeries {
        h,
        h_ref,
        times: Vec::with_capacity(n_samples),
        theta: Vec::with_capacity(n_samples),
        errors: Vec::with_capacity(n_samples),
        residuals: Vec::with_capacity(n_samples),
    };
    let mut theta_prev = 0.0;
    let mut x = vec![0.0; field.dim()];
    let mut fx = vec![0.0; field.dim()];
    for j in 0..n_samples {
        let (i, q) = (j / refine, j % refine);
        let s = h * q as f64 / refine as f64;
        let t = i as f64 * h + s;
        if q == 0 {
            x.copy_from_slice(traj.node(i).as_slice());
            fx.copy_from_slice(traj.f_node(i).as_slice());
        } else {
            x.copy_from_slice(traj.segment_point(i, s).as_slice());
            field.eval_f_into(&x, &mut fx)?;
        }
        let f_norm = dot(&fx, &fx).sqrt();
        let mut k = (theta_prev / h_ref).floor() as usize;
        reference.release_before(k);
        let found = loop {
            let k_start = k as f64 * h_ref;
            if k_start > theta_prev + window {
                break None;
            }
            let (y, fy) = reference.segment(k)?;
            let lo = theta_prev.max(k_start);
            let hi = k_start + h_ref;
            // g is affine on the segment: g(θ) = g_k + (θ - k h_ref) ⟨f(y_k), f⟩
            let g_k: f64 = y.iter().zip(&x).zip(&fx).map(|((yv, xv), fv)| (yv - xv) * fv).sum();
            let slope = dot(fy, &fx);
            let g_lo = g_k + (lo - k_start) * slope;
            let g_hi = g_k + h_ref * slope;
            if g_lo >= 0.0 {
                if g_lo <= config.tau * f_norm {
                    break Some(lo);
                }
                return Err(Error::SynchronizationLost { index: j });
            }
            if g_hi >= 0.0 {
                let root = (k_start - g_k / slope).clamp(lo, hi);
                break Some(root);
            }
            k += 1;
        };
        let Some(theta) = found else {
            return Err(Error::SynchronizationLost { index: j });
        };
        let k = ((theta / h_ref).floor() as usize).max((theta_prev / h_ref).floor() as usize);
        let (y, fy) = reference.segment(k)?;
        let ds = theta - k as f64 * h_ref;
        let mut err2 = 0.0;
        let mut g = 0.0;
        for d in 0..x.len() {
            let xi = y[d] + ds * fy[d];
            err2 += (xi - x[d]) * (xi - x[d]);
            g += (xi - x[d]) * fx[d];
        }
        let residual = if f_norm > 0.0 { g.abs() / f_norm } else { g.abs() };
        if residual > config.tau {
            return Err(Error::SynchronizationLost { index: j });
        }
        series.times.push(t);
        series.theta.push(theta);
        series.errors.push(err2.sqrt());
        series.residuals.push(residual);
        theta_prev = theta;
    }
    Ok(series)
}

/// `δ(t)` on the tube's loop, continued past `N_1 h` by repeating the loop
/// with the per-loop factor `δ(N_1 h)/δ_0`.
pub fn delta_extended(tube: &Tube, t: f64) -> f64 {
    let period = tube.n1 as f64 * tube.h;
    let p = (t / period).floor().max(0.0);
    let tau = (t - p * period).clamp(0.0, period);
    let ratio = tube.delta_end() / tube.delta0;
    tube.delta_at(tau).unwrap_or(tube.delta_end()) * ratio.powf(p)
}

/// Sample indices with `t_j ≤ N_1 h` whose error exceeds
/// `max(δ(t_j), RHS_i)`, where `RHS_i` is the step-condition right-hand side
/// of the segment containing `t_j`.
pub fn tube_membership_check(series: &SyncSeries, tube: &Tube) -> Vec<usize> {
    let horizon = tube.n1 as f64 * tube.h;
    series
        .times
        .iter()
        .zip(&series.errors)
        .enumerate()
        .take_while(|(_, (t, _))| **t <= horizon * (1.0 + 1e-15))
        .filter_map(|(j, (&t, &e))| {
            let i = ((t / tube.h).floor() as usize).min(tube.n1 - 1);
            let bound = tube.delta_at(t).unwrap_or(tube.delta_end()).max(tube.step_rhs(i));
            (e > bound).then_some(j)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveConfig {
    pub delta0: f64,
    pub gamma: f64,
    /// Horizon in multiples of the Euler return time.
    pub periods: f64,
    /// Reference step is `h / ref_factor`.
    pub ref_factor: f64,
    /// The tail is the last `tail_fraction` of the horizon.
    pub tail_fraction: f64,
    pub sync: SyncConfig,
    pub existence: ExistenceConfig,
    /// Overrides the error-floor constant computed from each run's constants.
    pub floor_constant: Option<f64>,
    /// Repeat the largest step against a reference with half the step.
    pub richardson: bool,
}

impl Default for ErrorCurveConfig {
    fn default() -> Self {
        ErrorCurveConfig {
            delta0: 0.1,
            gamma: 0.015,
            periods: 5.0,
            ref_factor: 100.0,
            tail_fraction: 0.2,
            sync: SyncConfig::default(),
            existence: ExistenceConfig::default(),
            floor_constant: None,
            richardson: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRun {
    pub h: f64,
    pub tail_max: f64,
    #[serde(rename = "D")]
    pub big_d: f64,
    #[serde(rename = "Dh")]
    pub dh: f64,
    pub pass: bool,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "R1")]
    pub r1: f64,
    pub horizon: f64,
    pub existence_certified: bool,
    pub tube_violations: usize,
    pub max_residual: f64,
    #[serde(skip)]
    pub series: SyncSeries,
    #[serde(skip)]
    pub delta_bound: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RichardsonCheck {
    pub h: f64,
    pub h_ref: f64,
    /// Largest change of the error when the reference step is halved.
    pub max_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveReport {
    pub y0: Vec<f64>,
    pub tail_fraction: f64,
    pub runs: Vec<ErrorRun>,
    /// Tails strictly decrease as `h` decreases.
    pub ordered: bool,
    /// `max(tail/h) / min(tail/h)`.
    pub ratio_spread: f64,
    pub richardson: Option<RichardsonCheck>,
}

fn error_run(field: &VectorField, x0: &DVector<f64>, y0: &DVector<f64>, h: f64, cfg: &ErrorCurveConfig) -> Result<ErrorRun> {
    let run = certify_existence(field, x0, h, cfg.delta0, cfg.gamma, &cfg.existence);
    let certified = run.certificate.verdict == Verdict::Certified;
    let (Some(tube), Some(constants)) = (run.tube, run.certificate.constants) else {
        let reason = run.certificate.diagnostics.first().map_or("unknown".to_string(), |d| d.detail.clone());
        return Err(Error::Precondition(format!("no tube at h = {h}: {reason}")));
    };
    let big_d = match cfg.floor_constant {
        Some(d) => d,
        None => compute_d(constants.m_c, constants.lipschitz, cfg.gamma, constants.a, constants.b)?,
    };
    let horizon = cfg.periods * tube.r1;
    let traj = simulate(field, x0, h, (horizon / h).ceil() as usize)?;
    let mut reference = ReferenceSolution::streaming(field, y0, h / cfg.ref_factor)?;
    let series = synchronize(&mut reference, &traj, &cfg.sync)?;
    let dh = big_d * h;
    let delta_bound: Vec<f64> = series.times.iter().map(|&t| delta_extended(&tube, t).max(dh)).collect();
    let tail_start = (1.0 - cfg.tail_fraction) * traj.horizon();
    let tail_max = series
        .times
        .iter()
        .zip(&series.errors)
        .filter(|(t, _)| **t >= tail_start)
        .map(|(_, e)| *e)
        .fold(0.0, f64::max);
    let violations = tube_membership_check(&series, &tube);
    Ok(ErrorRun {
        h,
        tail_max,
        big_d,
        dh,
        pass: tail_max <= dh,
        n1: tube.n1,
        r1: tube.r1,
        horizon: traj.horizon(),
        existence_certified: certified,
        tube_violations: violations.len(),
        max_residual: series.max_residual(),
        series,
        delta_bound,
    })
}

/// Error curves from `y0` for every step in `h_list`, each against a
/// reference with step `h / ref_factor`.
pub fn error_curve_experiment(
    field: &VectorField,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    h_list: &[f64],
    config: &ErrorCurveConfig,
) -> Result<ErrorCurveReport> {
    if h_list.is_empty() {
        return Err(Error::InvalidParameter("empty step list".into()));
    }
    let runs = h_list
        .par_iter()
        .map(|&h| error_run(field, x0, y0, h, config))
        .collect::<Result<Vec<_>>>()?;

    let mut by_h: Vec<&ErrorRun> = runs.iter().collect();
    by_h.sort_by(|a, b| b.h.total_cmp(&a.h));
    let ordered = by_h.windows(2).all(|w| w[0].h > w[1].h && w[0].tail_max > w[1].tail_max);
    let ratios: Vec<f64> = runs.iter().map(|r| r.tail_max / r.h).collect();
    let ratio_spread = ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min);

    let richardson = if config.richardson {
        let largest = by_h[0];
        let h_ref = largest.h / config.ref_factor / 2.0;
        let traj = simulate(field, x0, largest.h, largest.series.len() - 1)?;
        let mut reference = ReferenceSolution::streaming(field, y0, h_ref)?;
        let half = synchronize(&mut reference, &traj, &config.sync)?;
        let max_change = half
            .errors
            .iter()
            .zip(&largest.series.errors)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Some(RichardsonCheck { h: largest.h, h_ref, max_change })
    } else {
        None
    };

    Ok(ErrorCurveReport {
        y0: y0.iter().copied().collect(),
        tail_fraction: config.tail_fraction,
        runs,
        ordered,
        ratio_spread,
        richardson,
    })
}

/// `t, theta, error, delta_bound, Dh`.
pub fn write_error_csv<W: Write>(run: &ErrorRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "theta", "error", "delta_bound", "Dh"])?;
    let dh = fmt_f64(run.dh);
    for j in 0..run.series.len() {
        w.write_record([
            fmt_f64(run.series.times[j]),
            fmt_f64(run.series.theta[j]),
            fmt_f64(run.series.errors[j]),
            fmt_f64(run.delta_bound[j]),
            dh.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
