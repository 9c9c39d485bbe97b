//! Matrix measure `μ`, its transverse part `μ⊥`, sampled bounds `Λ` over tube
//! slices and the γ-regularised rate `σ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::euler::EulerTrajectory;
use crate::field::VectorField;
use crate::linalg::{complement_basis, sorted_symmetric_eigen, symmetric_part};

/// Speeds at or below this are treated as equilibria.
pub const M_FLOOR: f64 = 1e-8;

/// Alignment below which the tangent eigenvector identification is flagged.
pub const ALIGNMENT_WARNING: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureMethod {
    /// Largest eigenvalue of `S` restricted to `f(x)⊥`.
    Projection,
    /// Drop the eigenvector of `S` best aligned with `f(x)`.
    EigenvectorMatch,
}

impl MeasureMethod {
    pub fn default_for(dim: usize) -> Self {
        if dim == 2 {
            MeasureMethod::Projection
        } else {
            MeasureMethod::EigenvectorMatch
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransverseSpectrum {
    /// Eigenvalues of the symmetric part, ascending.
    pub eigenvalues: Vec<f64>,
    pub tangent_index: usize,
    pub mu: f64,
    pub mu_perp: f64,
    pub alignment: f64,
}

impl TransverseSpectrum {
    pub fn alignment_flagged(&self) -> bool {
        self.alignment < ALIGNMENT_WARNING
    }
}

/// Largest eigenvalue of `(J + Jᵀ)/2`.
pub fn matrix_measure(j: &DMatrix<f64>) -> Result<f64> {
    let s = symmetric_part(j)?;
    let (vals, _) = sorted_symmetric_eigen(&s);
    Ok(*vals.last().unwrap_or(&f64::NAN))
}

/// Spectrum of `S = (J + Jᵀ)/2` split into tangent and transverse parts
/// relative to the flow direction `f`.
pub fn transverse_from_parts(j: &DMatrix<f64>, f: &DVector<f64>, method: MeasureMethod) -> Result<TransverseSpectrum> {
    let n = j.nrows();
    if f.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.len() });
    }
    if n < 2 {
        return Err(Error::InvalidParameter(
            "transverse measure needs dimension at least 2".into(),
        ));
    }
    let speed = f.norm();
    if !(speed > M_FLOOR) {
        return Err(Error::EquilibriumProximity { speed, floor: M_FLOOR });
    }
    let s = symmetric_part(j)?;
    let (eigenvalues, vectors) = sorted_symmetric_eigen(&s);
    let u = f / speed;
    let align: Vec<f64> = (0..n).map(|k| vectors.column(k).dot(&u).abs()).collect();
    // Ties go to the larger eigenvalue, i.e. the later index.
    let mut tangent_index = 0;
    for k in 1..n {
        if align[k] >= align[tangent_index] - 1e-12 {
            tangent_index = k;
        }
    }
    let mu = eigenvalues[n - 1];
    let mu_perp = match method {
        MeasureMethod::Projection => {
            let q = complement_basis(f);
            let reduced = q.transpose() * &s * &q;
            if reduced.nrows() == 1 {
                reduced[(0, 0)]
            } else {
                let (vals, _) = sorted_symmetric_eigen(&reduced);
                vals[vals.len() - 1]
            }
        }
        MeasureMethod::EigenvectorMatch => (0..n)
            .filter(|&k| k != tangent_index)
            .map(|k| eigenvalues[k])
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(TransverseSpectrum {
        eigenvalues,
        tangent_index,
        mu,
        // Rayleigh quotients never exceed the top eigenvalue; clip rounding.
        mu_perp: mu_perp.min(mu),
        alignment: align[tangent_index],
    })
}

pub fn transverse_measure(field: &VectorField, x: &DVector<f64>, method: MeasureMethod) -> Result<TransverseSpectrum> {
    let f = field.eval_f(x)?;
    let j = field.eval_jacobian(x)?;
    transverse_from_parts(&j, &f, method)
}

/// `μ⊥` only, with an allocation-light planar fast path.
pub fn mu_perp(field: &VectorField, x: &DVector<f64>, method: MeasureMethod) -> Result<f64> {
    let f = field.eval_f(x)?;
    let j = field.eval_jacobian(x)?;
    if f.len() == 2 && method == MeasureMethod::Projection {
        let speed = f.norm();
        if !(speed > M_FLOOR) {
            return Err(Error::EquilibriumProximity { speed, floor: M_FLOOR });
        }
        let (w0, w1) = (-f[1] / speed, f[0] / speed);
        let off = 0.5 * (j[(0, 1)] + j[(1, 0)]);
        return Ok(j[(0, 0)] * w0 * w0 + 2.0 * off * w0 * w1 + j[(1, 1)] * w1 * w1);
    }
    Ok(transverse_from_parts(&j, &f, method)?.mu_perp)
}

/// Center curve of a slice family.
#[derive(Clone, Debug)]
pub enum SlicePath<'a> {
    /// `center(τ) = start + τ·velocity`.
    Line { start: DVector<f64>, velocity: DVector<f64> },
    /// `center(τ) = x̃(t0 + τ)`.
    Trajectory { traj: &'a EulerTrajectory, t0: f64 },
}

/// The family `B(center(τ), radius(τ)) ∩ {z : ⟨z - center(τ), f(center(τ))⟩ = 0}`
/// for `τ ∈ [0, span]`.
#[derive(Clone, Debug)]
pub struct Slice<'a> {
    pub path: SlicePath<'a>,
    pub span: f64,
    pub radius_start: f64,
    pub radius_rate: f64,
}

impl Slice<'_> {
    pub fn center(&self, tau: f64) -> Result<DVector<f64>> {
        match &self.path {
            SlicePath::Line { start, velocity } => Ok(start + velocity * tau),
            SlicePath::Trajectory { traj, t0 } => traj.dense_point((t0 + tau).min(traj.horizon())),
        }
    }

    pub fn radius(&self, tau: f64) -> f64 {
        self.radius_start + self.radius_rate * tau
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSampling {
    /// Points along the slice family, endpoints included.
    pub n_s: usize,
    /// Off-center points per cross-section.
    pub n_ball: usize,
    /// Multiplier on the observed adjacent-sample variation.
    pub pad_factor: f64,
}

impl Default for SliceSampling {
    fn default() -> Self {
        SliceSampling {
            n_s: 5,
            n_ball: 8,
            pad_factor: 1.0,
        }
    }
}

impl SliceSampling {
    pub fn taus(&self, span: f64) -> Vec<f64> {
        if self.n_s <= 1 || span == 0.0 {
            return vec![0.0];
        }
        (0..self.n_s)
            .map(|k| span * k as f64 / (self.n_s - 1) as f64)
            .collect()
    }

    /// Unit-radius offsets in the cross-section orthogonal to `normal`, plus
    /// the pairs of indices treated as adjacent when measuring variation.
    ///
    /// In the plane the points are evenly spaced on `[-1, 1]`, so scaling the
    /// radius and `n_ball` by the same integer nests the old samples. In higher
    /// dimension the points sit on the unit sphere of the cross-section.
    pub fn cross_section(&self, normal: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<(usize, usize)>) {
        let n = normal.len();
        let q = complement_basis(normal);
        let mut points = Vec::new();
        let mut adjacent = Vec::new();
        if n == 2 {
            let w = q.column(0).into_owned();
            let k_max = self.n_ball.div_ceil(2).max(if self.n_ball == 0 { 0 } else { 1 });
            for k in -(k_max as i64)..=(k_max as i64) {
                let scale = if k_max == 0 { 0.0 } else { k as f64 / k_max as f64 };
                points.push(&w * scale);
            }
            for a in 1..points.len() {
                adjacent.push((a - 1, a));
            }
        } else {
            points.push(DVector::zeros(n));
            let m = n - 1;
            for k in 0..self.n_ball {
                let angle = std::f64::consts::TAU * k as f64 / self.n_ball as f64;
                let (a, b) = (k % m, (k + 1) % m);
                let dir = if a == b {
                    q.column(a).into_owned() * if k % 2 == 0 { 1.0 } else { -1.0 }
                } else {
                    q.column(a) * angle.cos() + q.column(b) * angle.sin()
                };
                let norm = dir.norm();
                points.push(dir / norm);
                adjacent.push((0, k + 1));
                if k > 0 {
                    adjacent.push((k, k + 1));
                }
            }
            if self.n_ball > 2 {
                adjacent.push((self.n_ball, 1));
            }
        }
        (points, adjacent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaBound {
    pub segment_index: usize,
    pub lambda: f64,
    pub sampled_max: f64,
    pub padding: f64,
    pub samples_used: usize,
    /// Smallest and largest `|f|` seen at the sample points.
    pub speed_min: f64,
    pub speed_max: f64,
}

/// Values indexed `[tau][offset]` with the cross-section adjacency pairs.
pub(crate) type SliceGrid<T> = (Vec<Vec<T>>, Vec<(usize, usize)>);

/// Evaluates `g` on the sample grid of a slice family.
pub(crate) fn sample_slice<T>(
    field: &VectorField,
    slice: &Slice<'_>,
    sampling: &SliceSampling,
    mut g: impl FnMut(&DVector<f64>, &DVector<f64>, f64) -> Result<T>,
) -> Result<SliceGrid<T>> {
    if !(slice.radius_start >= 0.0) || slice.radius(slice.span) < 0.0 {
        return Err(Error::InvalidParameter("slice radius must be nonnegative".into()));
    }
    let mut grid = Vec::with_capacity(sampling.n_s);
    let mut adjacency = Vec::new();
    for tau in sampling.taus(slice.span) {
        let center = slice.center(tau)?;
        let normal = field.eval_f(&center)?;
        let speed = normal.norm();
        if !(speed > M_FLOOR) {
            return Err(Error::EquilibriumProximity { speed, floor: M_FLOOR });
        }
        let (offsets, adj) = sampling.cross_section(&normal);
        adjacency = adj;
        let r = slice.radius(tau);
        let row = offsets
            .iter()
            .map(|o| g(&(&center + o * r), &normal, tau))
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    Ok((grid, adjacency))
}

/// Largest difference between neighbouring grid values, along the family
/// and across each cross-section.
pub(crate) fn grid_variation(grid: &[Vec<f64>], adjacency: &[(usize, usize)]) -> f64 {
    let mut var: f64 = 0.0;
    for row in grid {
        for &(a, b) in adjacency {
            var = var.max((row[a] - row[b]).abs());
        }
    }
    for pair in grid.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            var = var.max((a - b).abs());
        }
    }
    var
}

/// Sampled upper bound `Λ ≥ sup μ⊥` over a slice family, padded by the
/// observed local variation.
pub fn lambda_over_slice(
    field: &VectorField,
    slice: &Slice<'_>,
    sampling: &SliceSampling,
    method: MeasureMethod,
    segment_index: usize,
) -> Result<LambdaBound> {
    let mut speed_min = f64::INFINITY;
    let mut speed_max: f64 = 0.0;
    let (grid, adjacency) = sample_slice(field, slice, sampling, |z, _, _| {
        let f = field.eval_f(z)?;
        let speed = f.norm();
        speed_min = speed_min.min(speed);
        speed_max = speed_max.max(speed);
        let j = field.eval_jacobian(z)?;
        if z.len() == 2 && method == MeasureMethod::Projection {
            if !(speed > M_FLOOR) {
                return Err(Error::EquilibriumProximity { speed, floor: M_FLOOR });
            }
            let (w0, w1) = (-f[1] / speed, f[0] / speed);
            let off = 0.5 * (j[(0, 1)] + j[(1, 0)]);
            return Ok(j[(0, 0)] * w0 * w0 + 2.0 * off * w0 * w1 + j[(1, 1)] * w1 * w1);
        }
        Ok(transverse_from_parts(&j, &f, method)?.mu_perp)
    })?;
    let sampled_max = grid.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let padding = sampling.pad_factor * grid_variation(&grid, &adjacency);
    Ok(LambdaBound {
        segment_index,
        lambda: sampled_max + padding,
        sampled_max,
        padding,
        samples_used: grid.iter().map(Vec::len).sum(),
        speed_min,
        speed_max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaBranch {
    Contracting,
    Regularized,
}

impl SigmaBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            SigmaBranch::Contracting => "contracting",
            SigmaBranch::Regularized => "regularized",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRate {
    pub segment_index: usize,
    pub sigma: f64,
    pub branch: SigmaBranch,
}

/// `σ = a Λ / 2` when `Λ < -γ`, else `σ = 3 b max(|Λ|, γ) / 2`.
pub fn sigma_rate(segment_index: usize, lambda: f64, a: f64, b: f64, gamma: f64) -> Result<SigmaRate> {
    if !(a > 0.0) {
        return Err(Error::InvalidReparametrization { segment: segment_index, a });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "γ must be positive for the rate floor |σ| ≥ γa/2, got {gamma}"
        )));
    }
    if !(a <= b) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "need finite Λ and 0 < a ≤ b, got Λ = {lambda}, a = {a}, b = {b}"
        )));
    }
    let (sigma, branch) = if lambda < -gamma {
        (0.5 * a * lambda, SigmaBranch::Contracting)
    } else {
        (1.5 * b * lambda.abs().max(gamma), SigmaBranch::Regularized)
    };
    let floor = 0.5 * gamma * a;
    if !(sigma.abs() >= floor * (1.0 - 1e-14)) {
        return Err(Error::InvalidParameter(format!(
            "rate floor violated on segment {segment_index}: |σ| = {} < γa/2 = {floor}",
            sigma.abs()
        )));
    }
    Ok(SigmaRate {
        segment_index,
        sigma,
        branch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::from_registry;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use std::collections::BTreeMap;

    fn sys(id: &str) -> VectorField {
        let params: BTreeMap<String, f64> = if id == "vanderpol" {
            [("p".to_string(), 0.3)].into_iter().collect()
        } else {
            BTreeMap::new()
        };
        from_registry(id, &params).unwrap()
    }

    #[test]
    fn trivial_spectra() {
        let x = dvector![0.4, -1.3];
        for method in [MeasureMethod::Projection, MeasureMethod::EigenvectorMatch] {
            let h = transverse_measure(&sys("harmonic"), &x, method).unwrap();
            assert_abs_diff_eq!(h.mu, 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(h.mu_perp, 0.0, epsilon = 1e-15);
            let l = transverse_measure(&sys("linear-stable"), &x, method).unwrap();
            assert_abs_diff_eq!(l.mu, -1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(l.mu_perp, -1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn planar_projection_is_rayleigh_quotient() {
        let field = sys("vanderpol");
        let x = dvector![1.8929, -0.5383];
        let spec = transverse_measure(&field, &x, MeasureMethod::Projection).unwrap();
        let f = field.eval_f(&x).unwrap();
        let s = symmetric_part(&field.eval_jacobian(&x).unwrap()).unwrap();
        let w = dvector![-f[1], f[0]] / f.norm();
        assert_abs_diff_eq!(spec.mu_perp, w.dot(&(&s * &w)), epsilon = 1e-14);
        assert_abs_diff_eq!(mu_perp(&field, &x, MeasureMethod::Projection).unwrap(), spec.mu_perp, epsilon = 1e-14);
        assert!(spec.mu_perp <= spec.mu);
    }

    #[test]
    fn equilibrium_is_rejected() {
        let err = transverse_measure(&sys("linear-stable"), &dvector![0.0, 0.0], MeasureMethod::Projection);
        assert!(matches!(err, Err(Error::EquilibriumProximity { .. })));
    }

    #[test]
    fn tie_break_prefers_larger_eigenvalue() {
        // S = diag(-1, 2), f along the diagonal: both eigenvectors equally aligned.
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]);
        let spec = transverse_from_parts(&j, &dvector![1.0, 1.0], MeasureMethod::EigenvectorMatch).unwrap();
        assert_eq!(spec.tangent_index, 1);
        assert_eq!(spec.mu_perp, -1.0);
        assert!(spec.alignment_flagged());
    }

    #[test]
    fn sigma_examples() {
        let s = sigma_rate(0, -2.0, 0.9, 1.1, 0.015).unwrap();
        assert_abs_diff_eq!(s.sigma, -0.9, epsilon = 1e-15);
        assert_eq!(s.branch, SigmaBranch::Contracting);
        let s = sigma_rate(0, 1.0, 0.9, 1.1, 0.015).unwrap();
        assert_abs_diff_eq!(s.sigma, 1.65, epsilon = 1e-14);
        assert_eq!(s.branch, SigmaBranch::Regularized);
        let s = sigma_rate(0, -0.01, 0.9, 1.1, 0.015).unwrap();
        assert_abs_diff_eq!(s.sigma, 0.02475, epsilon = 1e-15);
        assert_eq!(s.branch, SigmaBranch::Regularized);
        assert!(matches!(
            sigma_rate(3, -1.0, 0.0, 1.0, 0.015),
            Err(Error::InvalidReparametrization { segment: 3, .. })
        ));
        assert!(sigma_rate(0, -1e-3, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn linear_slice_has_constant_lambda() {
        let field = sys("linear-stable");
        let slice = Slice {
            path: SlicePath::Line {
                start: dvector![1.0, 0.5],
                velocity: dvector![-1.0, -0.5],
            },
            span: 0.01,
            radius_start: 0.1,
            radius_rate: 2.0,
        };
        let lb = lambda_over_slice(&field, &slice, &SliceSampling::default(), MeasureMethod::Projection, 0).unwrap();
        assert_abs_diff_eq!(lb.lambda, -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lb.padding, 0.0, epsilon = 1e-14);
        assert_eq!(lb.samples_used, 45);
    }

    #[test]
    fn cross_section_shapes() {
        let s = SliceSampling::default();
        let (pts, adj) = s.cross_section(&dvector![0.0, 2.0]);
        assert_eq!(pts.len(), 9);
        assert_eq!(adj.len(), 8);
        let (pts, _) = s.cross_section(&dvector![0.0, 0.0, 1.0]);
        assert_eq!(pts.len(), 9);
        for p in &pts[1..] {
            assert_abs_diff_eq!(p.norm(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p[2], 0.0, epsilon = 1e-12);
        }
    }
}
