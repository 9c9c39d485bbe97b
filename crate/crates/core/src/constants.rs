//! Sampled estimates of the scalar bounds used by the certificates.
//!
//! None of these is formally rigorous: extrema are taken over finite grids,
//! optionally widened by a safety factor or by the observed grid variation.
//! Every estimate records how it was obtained in [`Provenance`].

use std::ops::Range;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::euler::{first_return, EulerTrajectory, Exclusion, Section};
use crate::field::VectorField;
use crate::linalg::{complement_basis, spectral_norm};
use crate::measure::{grid_variation, SliceSampling, M_FLOOR};

/// Axis-aligned working region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RegionBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() || lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidParameter("region box is empty".into()));
        }
        Ok(RegionBox { lo, hi })
    }

    /// Bounding box of `points` inflated by `margin` on every side.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a DVector<f64>>, margin: f64) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for p in points {
            if lo.is_empty() {
                lo = p.iter().copied().collect();
                hi = lo.clone();
            }
            for (k, v) in p.iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        RegionBox::new(lo.iter().map(|v| v - margin).collect(), hi.iter().map(|v| v + margin).collect())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Distance from `x` to the box boundary, negative outside.
    pub fn clearance(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| (v - l).min(h - v))
            .fold(f64::INFINITY, f64::min)
    }

    /// Number of points of the tensor grid with `resolution` intervals per axis.
    pub fn grid_len(&self, resolution: usize) -> usize {
        (resolution + 1).pow(self.dim() as u32)
    }

    /// The `k`-th grid point. Doubling `resolution` keeps every old point.
    pub fn grid_point(&self, resolution: usize, mut k: usize) -> DVector<f64> {
        let r = resolution.max(1);
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|axis| {
                let idx = k % (r + 1);
                k /= r + 1;
                let (l, h) = (self.lo[axis], self.hi[axis]);
                if idx == r {
                    h
                } else {
                    l + (h - l) * idx as f64 / r as f64
                }
            }),
        )
    }
}

fn check_region(field: &VectorField, region: &RegionBox) -> Result<()> {
    if region.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: region.dim() });
    }
    Ok(())
}

/// `L = safety · max ‖J(x)‖₂` over the grid.
pub fn estimate_lipschitz(field: &VectorField, region: &RegionBox, resolution: usize, safety: f64) -> Result<f64> {
    check_region(field, region)?;
    let max = (0..region.grid_len(resolution))
        .into_par_iter()
        .map(|k| field.eval_jacobian(&region.grid_point(resolution, k)).map(|j| spectral_norm(&j)))
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(safety * max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedBounds {
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    /// Set when the smallest sampled speed is at or below the equilibrium floor.
    pub equilibrium: bool,
}

impl SpeedBounds {
    fn from_extremes(m: f64, big_m: f64) -> Self {
        SpeedBounds { m, big_m, equilibrium: !(m > M_FLOOR) }
    }
}

/// Sampled `min |f|` and `max |f|` over the grid.
pub fn estimate_speed_bounds(field: &VectorField, region: &RegionBox, resolution: usize) -> Result<SpeedBounds> {
    check_region(field, region)?;
    let (m, big_m) = (0..region.grid_len(resolution))
        .into_par_iter()
        .map(|k| field.eval_f(&region.grid_point(resolution, k)).map(|f| (f.norm(), f.norm())))
        .try_reduce(|| (f64::INFINITY, 0.0), |a, b| Ok((a.0.min(b.0), a.1.max(b.1))))?;
    Ok(SpeedBounds::from_extremes(m, big_m))
}

/// Speed bounds over sampled points of a point cloud (tube slices).
pub fn speed_bounds_of<'a>(field: &VectorField, points: impl IntoIterator<Item = &'a DVector<f64>>) -> Result<SpeedBounds> {
    let mut m = f64::INFINITY;
    let mut big_m: f64 = 0.0;
    for p in points {
        let s = field.eval_f(p)?.norm();
        m = m.min(s);
        big_m = big_m.max(s);
    }
    Ok(SpeedBounds::from_extremes(m, big_m))
}

/// Phase rate `θ̇` of the synchronised exact solution passing through
/// `xi_theta ∈ S_i(s)` while the Euler point moves along segment `i`.
pub fn theta_dot(
    field: &VectorField,
    node: &DVector<f64>,
    f_node: &DVector<f64>,
    s: f64,
    xi_theta: &DVector<f64>,
) -> Result<f64> {
    let center = node + f_node * s;
    let f_c = field.eval_f(&center)?;
    let j_c = field.eval_jacobian(&center)?;
    let f_xi = field.eval_f(xi_theta)?;
    let num = f_node.dot(&f_c) - (xi_theta - &center).dot(&(j_c * f_node));
    let den = f_xi.dot(&f_c);
    if !(den.abs() >= M_FLOOR * f_c.norm()) {
        return Err(Error::TransversalityLoss { denominator: den });
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbBound {
    pub a: f64,
    pub b: f64,
    pub sampled_min: f64,
    pub sampled_max: f64,
    pub margin: f64,
}

/// Bounds `a ≤ θ̇ ≤ b` over `segments` of `traj`, sampling `n_s` times across
/// the whole range and the cross-section offsets up to radius `delta(τ)`,
/// where `τ` is measured from the start of the range.
pub fn estimate_ab(
    traj: &EulerTrajectory,
    segments: Range<usize>,
    delta: impl Fn(f64) -> f64,
    sampling: &SliceSampling,
) -> Result<AbBound> {
    let field = traj.field();
    let h = traj.h();
    let count = segments.len();
    if count == 0 || segments.end > traj.n_steps() {
        return Err(Error::InvalidParameter(format!("bad segment range {segments:?}")));
    }
    let span = count as f64 * h;
    let mut grid = Vec::with_capacity(sampling.n_s);
    let mut adjacency = Vec::new();
    for tau in sampling.taus(span) {
        let local = ((tau / h).floor() as usize).min(count - 1);
        let i = segments.start + local;
        let s = (tau - local as f64 * h).clamp(0.0, h);
        let (node, f_node) = (traj.node(i), traj.f_node(i));
        let center = node + f_node * s;
        let f_c = field.eval_f(&center)?;
        let (offsets, adj) = sampling.cross_section(&f_c);
        adjacency = adj;
        let r = delta(tau);
        let row = offsets
            .iter()
            .map(|o| theta_dot(field, node, f_node, s, &(&center + o * r)))
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    let sampled_min = grid.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let sampled_max = grid.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = sampling.pad_factor * grid_variation(&grid, &adjacency);
    let a = sampled_min - margin;
    if !(a > 0.0) {
        return Err(Error::InvalidReparametrization { segment: segments.start, a });
    }
    Ok(AbBound { a, b: sampled_max + margin, sampled_min, sampled_max, margin })
}

/// `B(center, radius) ∩ S` for the section through `center` with `normal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionDisk {
    pub center: DVector<f64>,
    pub radius: f64,
    pub normal: DVector<f64>,
}

impl SectionDisk {
    pub fn section(&self) -> Result<Section> {
        Section::new(self.center.clone(), self.normal.clone())
    }

    /// `n` points of the disk. In the plane they are evenly spaced on the
    /// segment with both endpoints; when `n` is odd the center is included.
    /// In higher dimension the first point is the center and the rest are
    /// uniform in the disk, drawn from `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        if n <= 1 || self.radius == 0.0 {
            return vec![self.center.clone()];
        }
        let q = complement_basis(&self.normal);
        if self.center.len() == 2 {
            let w = q.column(0).into_owned();
            return (0..n)
                .map(|k| {
                    let u = -1.0 + 2.0 * k as f64 / (n - 1) as f64;
                    &self.center + &w * (u * self.radius)
                })
                .collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = q.ncols();
        let mut out = vec![self.center.clone()];
        while out.len() < n {
            let c: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
            if c.iter().map(|v| v * v).sum::<f64>() > 1.0 {
                continue;
            }
            let offset = &q * DVector::from_vec(c);
            out.push(&self.center + offset * self.radius);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaConfig {
    pub n_samples: usize,
    /// Reference step is `h / fine_factor`.
    pub fine_factor: f64,
    pub max_time: f64,
    pub seed: u64,
}

impl Default for EtaConfig {
    fn default() -> Self {
        EtaConfig { n_samples: 21, fine_factor: 10.0, max_time: 100.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    pub eta: f64,
    #[serde(rename = "T_lo")]
    pub t_lo: f64,
    #[serde(rename = "T_hi")]
    pub t_hi: f64,
    #[serde(rename = "R_prime")]
    pub r_prime: f64,
    pub samples: usize,
}

/// Return-time floor `η = T_lo / 2` from fine-step first returns of sampled
/// points of `y0`, together with `T_lo`, `T_hi` and the Euler bound `R'`.
pub fn estimate_eta(field: &VectorField, y0: &SectionDisk, h: f64, config: &EtaConfig) -> Result<EtaEstimate> {
    let section = y0.section()?;
    let points = y0.sample(config.n_samples, config.seed);
    let h_fine = h / config.fine_factor;
    let times = points
        .par_iter()
        .map(|z| {
            let exact = first_return(field, z, h_fine, &section, Exclusion::standard(h_fine, y0.radius), config.max_time)?;
            let euler = first_return(field, z, h, &section, Exclusion::standard(h, y0.radius), config.max_time)?;
            match (exact, euler) {
                (Some(e), Some(r)) => Ok((e.time, r.time)),
                _ => Err(Error::NoReturn { horizon: config.max_time }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let t_lo = times.iter().map(|t| t.0).fold(f64::INFINITY, f64::min);
    let t_hi = times.iter().map(|t| t.0).fold(0.0, f64::max);
    let r_prime = times.iter().map(|t| t.1).fold(0.0, f64::max);
    Ok(EtaEstimate { eta: 0.5 * t_lo, t_lo, t_hi, r_prime, samples: times.len() })
}

/// How each estimate was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub region: RegionBox,
    pub grid_resolution: usize,
    pub lipschitz_safety: f64,
    pub slice_sampling: SliceSampling,
    pub lambda_stride: usize,
    pub passes: usize,
    pub step_bound: String,
    pub alpha_mode: String,
    pub eta_samples: usize,
    pub eta_fine_factor: f64,
    pub tube_speed_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConstants {
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(rename = "M_f")]
    pub m_f: f64,
    #[serde(rename = "M_C")]
    pub m_c: f64,
    pub m: f64,
    #[serde(rename = "M_tilde_max")]
    pub m_tilde_max: f64,
    pub a: f64,
    pub b: f64,
    pub eta: f64,
    #[serde(rename = "T_lo")]
    pub t_lo: f64,
    #[serde(rename = "T_hi")]
    pub t_hi: f64,
    #[serde(rename = "R_prime")]
    pub r_prime: f64,
    pub provenance: Provenance,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::from_registry;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use std::collections::BTreeMap;

    fn sys(id: &str) -> VectorField {
        from_registry(id, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn lipschitz_of_linear_fields() {
        let b = RegionBox::new(vec![-2.0, -1.0], vec![3.0, 1.0]).unwrap();
        assert_abs_diff_eq!(estimate_lipschitz(&sys("linear-stable"), &b, 8, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_lipschitz(&sys("harmonic"), &b, 8, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_lipschitz(&sys("harmonic"), &b, 8, 1.5).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn speed_bounds_radial_box() {
        let b = RegionBox::new(vec![1.0, 1.0], vec![2.0, 2.0]).unwrap();
        let s = estimate_speed_bounds(&sys("linear-stable"), &b, 10).unwrap();
        assert_abs_diff_eq!(s.m, 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.big_m, 2.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert!(!s.equilibrium);
        let around_origin = RegionBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(estimate_speed_bounds(&sys("linear-stable"), &around_origin, 10).unwrap().equilibrium);
    }

    #[test]
    fn harmonic_unit_circle_speed() {
        let pts: Vec<DVector<f64>> = (0..32)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 32.0;
                dvector![a.cos(), a.sin()]
            })
            .collect();
        let s = speed_bounds_of(&sys("harmonic"), &pts).unwrap();
        assert_abs_diff_eq!(s.m, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.big_m, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_nests_under_refinement() {
        let b = RegionBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let coarse: Vec<_> = (0..b.grid_len(4)).map(|k| b.grid_point(4, k)).collect();
        let fine: Vec<_> = (0..b.grid_len(8)).map(|k| b.grid_point(8, k)).collect();
        for p in &coarse {
            assert!(fine.iter().any(|q| (p - q).norm() < 1e-15));
        }
    }

    #[test]
    fn theta_dot_on_trajectory_is_one() {
        let field = sys("linear-stable");
        let x = dvector![1.0, 0.0];
        let f = field.eval_f(&x).unwrap();
        assert_abs_diff_eq!(theta_dot(&field, &x, &f, 0.0, &x).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(theta_dot(&field, &x, &f, 0.0, &dvector![1.0, 0.01]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn theta_dot_transversality_loss() {
        // f(xi) orthogonal to f at the center, or zero
        let field = sys("harmonic");
        let x = dvector![1.0, 0.0];
        let f = field.eval_f(&x).unwrap();
        let err = theta_dot(&field, &x, &f, 0.0, &dvector![0.0, 0.0]);
        assert!(matches!(err, Err(Error::TransversalityLoss { .. })));
        let err = theta_dot(&field, &x, &f, 0.0, &dvector![0.0, 5.0]);
        assert!(matches!(err, Err(Error::TransversalityLoss { .. })));
    }

    #[test]
    fn ab_for_radial_field() {
        // f = -x: along segment i the center is x_i(1 - s) and every section
        // offset is orthogonal to it, so θ̇ = 1/(1 - s) exactly
        let field = sys("linear-stable");
        let h = 1e-3;
        let traj = crate::euler::simulate(&field, &dvector![1.0, 0.5], h, 20).unwrap();
        let ab = estimate_ab(&traj, 3..4, |_| 0.2, &SliceSampling::default()).unwrap();
        assert_abs_diff_eq!(ab.sampled_min, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ab.sampled_max, 1.0 / (1.0 - h), epsilon = 1e-12);
        assert!(ab.a <= ab.sampled_min && ab.b >= ab.sampled_max);
    }

    #[test]
    fn ab_zero_radius_is_on_trajectory_rate() {
        let field = from_registry("vanderpol", &[("p".to_string(), 0.3)].into_iter().collect()).unwrap();
        let traj = crate::euler::simulate(&field, &dvector![1.8929, -0.5383], 1e-3, 5).unwrap();
        let ab = estimate_ab(&traj, 2..3, |_| 0.0, &SliceSampling::default()).unwrap();
        let expected: Vec<f64> = SliceSampling::default()
            .taus(1e-3)
            .iter()
            .map(|&s| {
                let fc = field.eval_f(&traj.segment_point(2, s)).unwrap();
                traj.f_node(2).dot(&fc) / fc.norm_squared()
            })
            .collect();
        assert!(ab.sampled_min <= ab.sampled_max);
        for e in expected {
            assert!(e >= ab.a && e <= ab.b);
            assert_abs_diff_eq!(e, 1.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn eta_for_harmonic_is_half_period() {
        let field = sys("harmonic");
        let disk = SectionDisk { center: dvector![1.0, 0.0], radius: 0.05, normal: dvector![0.0, -1.0] };
        let est = estimate_eta(&field, &disk, 1e-3, &EtaConfig { n_samples: 5, ..Default::default() }).unwrap();
        assert_abs_diff_eq!(est.eta, std::f64::consts::PI, epsilon = 0.01);
        assert!(est.eta <= est.t_lo && est.t_lo <= est.t_hi);
        let single = SectionDisk { radius: 0.0, ..disk };
        let est = estimate_eta(&field, &single, 1e-3, &EtaConfig::default()).unwrap();
        assert_eq!(est.samples, 1);
        assert_eq!(est.eta, 0.5 * est.t_lo);
    }

    #[test]
    fn eta_without_return_is_blocking() {
        let field = sys("linear-stable");
        let disk = SectionDisk { center: dvector![1.0, 0.0], radius: 0.1, normal: dvector![-1.0, 0.0] };
        let cfg = EtaConfig { n_samples: 3, max_time: 5.0, ..Default::default() };
        assert!(matches!(estimate_eta(&field, &disk, 1e-2, &cfg), Err(Error::NoReturn { .. })));
    }
}
