//! Explicit Euler trajectories with piecewise-linear dense output, section
//! crossings and return times.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VectorField;

/// Stored Euler solution `x̃_{i+1} = x̃_i + h f(x̃_i)`.
#[derive(Clone, Debug)]
pub struct EulerTrajectory {
    field: VectorField,
    h: f64,
    nodes: Vec<DVector<f64>>,
    f_nodes: Vec<DVector<f64>>,
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    Ok(())
}

fn diverged_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        other => other,
    }
}

impl EulerTrajectory {
    fn start(field: &VectorField, x0: &DVector<f64>, h: f64, capacity: usize) -> Result<Self> {
        check_step(h)?;
        let f0 = field.eval_f(x0)?;
        let mut nodes = Vec::with_capacity(capacity + 1);
        let mut f_nodes = Vec::with_capacity(capacity + 1);
        nodes.push(x0.clone());
        f_nodes.push(f0);
        Ok(EulerTrajectory {
            field: field.clone(),
            h,
            nodes,
            f_nodes,
        })
    }

    fn push_step(&mut self) -> Result<()> {
        let i = self.nodes.len() - 1;
        let next = &self.nodes[i] + &self.f_nodes[i] * self.h;
        let f_next = self.field.eval_f(&next).map_err(diverged_at(i + 1))?;
        self.nodes.push(next);
        self.f_nodes.push(f_next);
        Ok(())
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.nodes[0]
    }

    /// Number of steps `N`; there are `N + 1` nodes.
    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.h
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn f_nodes(&self) -> &[DVector<f64>] {
        &self.f_nodes
    }

    pub fn node(&self, i: usize) -> &DVector<f64> {
        &self.nodes[i]
    }

    pub fn f_node(&self, i: usize) -> &DVector<f64> {
        &self.f_nodes[i]
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// `x̃_i(s) = x̃_i + s f(x̃_i)`.
    pub fn segment_point(&self, i: usize, s: f64) -> DVector<f64> {
        &self.nodes[i] + &self.f_nodes[i] * s
    }

    /// Splits `t` into `(i, s)` with `s ∈ [0, h]`; node times map to `s = 0`
    /// except at the horizon, which maps to the end of the last segment.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.horizon();
        if !(t >= 0.0 && t <= horizon * (1.0 + f64::EPSILON)) {
            return Err(Error::OutOfRange { t, horizon });
        }
        let n = self.n_steps();
        let k = (t / self.h).round();
        if (t - k * self.h).abs() <= 4.0 * f64::EPSILON * t.max(self.h) {
            let k = k as usize;
            return Ok(if k >= n { (n - 1, self.h) } else { (k, 0.0) });
        }
        let i = ((t / self.h).floor() as usize).min(n - 1);
        Ok((i, (t - self.time(i)).clamp(0.0, self.h)))
    }

    pub fn dense_point(&self, t: f64) -> Result<DVector<f64>> {
        let (i, s) = self.locate(t)?;
        if s == 0.0 {
            return Ok(self.nodes[i].clone());
        }
        if s == self.h {
            return Ok(self.nodes[i + 1].clone());
        }
        Ok(self.segment_point(i, s))
    }

    /// Truncates to the first `n_steps` steps.
    pub fn truncated(&self, n_steps: usize) -> EulerTrajectory {
        let keep = n_steps.min(self.n_steps()) + 1;
        EulerTrajectory {
            field: self.field.clone(),
            h: self.h,
            nodes: self.nodes[..keep].to_vec(),
            f_nodes: self.f_nodes[..keep].to_vec(),
        }
    }
}

pub fn simulate(field: &VectorField, x0: &DVector<f64>, h: f64, n_steps: usize) -> Result<EulerTrajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
    }
    let mut traj = EulerTrajectory::start(field, x0, h, n_steps)?;
    for _ in 0..n_steps {
        traj.push_step()?;
    }
    Ok(traj)
}

/// Hyperplane `{z : ⟨z - anchor, normal⟩ = 0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub anchor: DVector<f64>,
    pub normal: DVector<f64>,
}

impl Section {
    pub fn new(anchor: DVector<f64>, normal: DVector<f64>) -> Result<Self> {
        if anchor.len() != normal.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                got: normal.len(),
            });
        }
        if !(normal.norm() > 0.0) {
            return Err(Error::InvalidParameter("section normal must be nonzero".into()));
        }
        Ok(Section { anchor, normal })
    }

    /// The section through `x` orthogonal to `f(x)`.
    pub fn through(field: &VectorField, x: &DVector<f64>) -> Result<Self> {
        Section::new(x.clone(), field.eval_f(x)?)
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        (z - &self.anchor).dot(&self.normal)
    }

    fn value_slice(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.anchor.iter())
            .zip(self.normal.iter())
            .map(|((z, a), n)| (z - a) * n)
            .sum()
    }
}

/// Masks the departure from the anchor: crossings before `t_min`, or before
/// the trajectory has first left `B(anchor, r_excl)`, are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub t_min: f64,
    pub r_excl: f64,
}

impl Exclusion {
    pub fn standard(h: f64, delta0: f64) -> Self {
        Exclusion {
            t_min: 10.0 * h,
            r_excl: 0.5 * delta0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub step_index: usize,
    pub s_star: f64,
    pub time: f64,
    pub point: DVector<f64>,
    pub direction_dot: f64,
}

/// Incremental crossing test shared by the stored and streaming paths.
struct CrossingScanner<'a> {
    section: &'a Section,
    exclusion: Exclusion,
    f_anchor: DVector<f64>,
    left: bool,
}

impl<'a> CrossingScanner<'a> {
    fn new(field: &VectorField, section: &'a Section, exclusion: Exclusion) -> Result<Self> {
        Ok(CrossingScanner {
            section,
            exclusion,
            f_anchor: field.eval_f(&section.anchor)?,
            left: false,
        })
    }

    /// Tests segment `i` from node `x` with slope `fx`; `next` is node `i+1`.
    fn test(
        &mut self,
        field: &VectorField,
        h: f64,
        i: usize,
        x: &[f64],
        fx: &[f64],
        next: &[f64],
    ) -> Option<Crossing> {
        if !self.left {
            let dist2: f64 = x
                .iter()
                .zip(self.section.anchor.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            self.left = dist2.sqrt() > self.exclusion.r_excl;
        }
        let g0 = self.section.value_slice(x);
        let g1 = self.section.value_slice(next);
        if !(g0 < 0.0 && g1 >= 0.0) {
            return None;
        }
        let slope: f64 = fx.iter().zip(self.section.normal.iter()).map(|(a, b)| a * b).sum();
        let s_star = if slope > 0.0 { (-g0 / slope).clamp(f64::MIN_POSITIVE, h) } else { h };
        let time = i as f64 * h + s_star;
        if time < self.exclusion.t_min || !self.left {
            return None;
        }
        let point = DVector::from_iterator(x.len(), x.iter().zip(fx).map(|(a, b)| a + s_star * b));
        let direction_dot = match field.eval_f(&point) {
            Ok(fp) => self.f_anchor.dot(&fp),
            Err(_) => return None,
        };
        (direction_dot > 0.0).then_some(Crossing {
            step_index: i,
            s_star,
            time,
            point,
            direction_dot,
        })
    }
}

/// All good-direction crossings `g < 0 → g ≥ 0`, sorted by time.
pub fn detect_crossings(traj: &EulerTrajectory, section: &Section, exclusion: Exclusion) -> Result<Vec<Crossing>> {
    let mut scanner = CrossingScanner::new(traj.field(), section, exclusion)?;
    let mut out = Vec::new();
    for i in 0..traj.n_steps() {
        if let Some(c) = scanner.test(
            traj.field(),
            traj.h(),
            i,
            traj.node(i).as_slice(),
            traj.f_node(i).as_slice(),
            traj.node(i + 1).as_slice(),
        ) {
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnTime {
    pub p: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub point: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnTimes {
    pub returns: Vec<ReturnTime>,
    /// False when fewer than the requested number of returns were found.
    pub complete: bool,
}

/// The first `p_max` returns `(R̃_p, N_p)` with `N_p = ⌈R̃_p / h⌉`.
pub fn return_times(
    traj: &EulerTrajectory,
    section: &Section,
    p_max: usize,
    exclusion: Exclusion,
) -> Result<ReturnTimes> {
    let returns: Vec<ReturnTime> = detect_crossings(traj, section, exclusion)?
        .into_iter()
        .take(p_max)
        .enumerate()
        .map(|(k, c)| {
            let n = c.step_index + 1;
            let h = traj.h();
            debug_assert!(c.time > (n - 1) as f64 * h && c.time <= n as f64 * h * (1.0 + 1e-15));
            ReturnTime {
                p: k + 1,
                r: c.time,
                n,
                point: c.point,
            }
        })
        .collect();
    Ok(ReturnTimes {
        complete: returns.len() == p_max,
        returns,
    })
}

/// Allocation-free Euler integrator for long runs that are not stored.
#[derive(Clone, Debug)]
pub struct EulerStepper {
    field: VectorField,
    h: f64,
    k: usize,
    x: Vec<f64>,
    f: Vec<f64>,
    next: Vec<f64>,
}

impl EulerStepper {
    pub fn new(field: &VectorField, x0: &DVector<f64>, h: f64) -> Result<Self> {
        check_step(h)?;
        let f = field.eval_f(x0)?;
        Ok(EulerStepper {
            field: field.clone(),
            h,
            k: 0,
            x: x0.as_slice().to_vec(),
            f: f.as_slice().to_vec(),
            next: vec![0.0; x0.len()],
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.h
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    /// Position of the pending step's end node without committing it.
    fn peek_next(&mut self) -> &[f64] {
        for ((n, x), f) in self.next.iter_mut().zip(&self.x).zip(&self.f) {
            *n = x + self.h * f;
        }
        &self.next
    }

    pub fn step(&mut self) -> Result<()> {
        self.peek_next();
        std::mem::swap(&mut self.x, &mut self.next);
        self.field
            .eval_f_into(&self.x, &mut self.f)
            .map_err(diverged_at(self.k + 1))?;
        self.k += 1;
        Ok(())
    }
}

/// Streams an Euler trajectory from `x0` until its first good-direction
/// crossing of `section`, without storing it. `Ok(None)` if none occurs
/// before `max_time`.
pub fn first_return(
    field: &VectorField,
    x0: &DVector<f64>,
    h: f64,
    section: &Section,
    exclusion: Exclusion,
    max_time: f64,
) -> Result<Option<Crossing>> {
    let mut scanner = CrossingScanner::new(field, section, exclusion)?;
    let mut stepper = EulerStepper::new(field, x0, h)?;
    let max_steps = (max_time / h).ceil() as usize;
    while stepper.index() < max_steps {
        let i = stepper.index();
        stepper.peek_next();
        if let Some(c) = scanner.test(field, h, i, &stepper.x, &stepper.f, &stepper.next) {
            return Ok(Some(c));
        }
        stepper.step()?;
    }
    Ok(None)
}

/// Simulates until the first return to `section`, storing nodes up to
/// `N_1 = step_index + 1`. Fails with `NoReturn` past `max_time`.
pub fn simulate_until_return(
    field: &VectorField,
    x0: &DVector<f64>,
    h: f64,
    section: &Section,
    exclusion: Exclusion,
    max_time: f64,
) -> Result<(EulerTrajectory, Crossing)> {
    let mut scanner = CrossingScanner::new(field, section, exclusion)?;
    let mut traj = EulerTrajectory::start(field, x0, h, (max_time / h) as usize)?;
    let max_steps = (max_time / h).ceil() as usize;
    for i in 0..max_steps {
        traj.push_step()?;
        if let Some(c) = scanner.test(
            field,
            h,
            i,
            traj.nodes[i].as_slice(),
            traj.f_nodes[i].as_slice(),
            traj.nodes[i + 1].as_slice(),
        ) {
            return Ok((traj, c));
        }
    }
    Err(Error::NoReturn { horizon: max_time })
}

pub fn write_trajectory_csv<W: Write>(traj: &EulerTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.field().dim()).map(|k| format!("x_{k}")));
    w.write_record(&header)?;
    for (i, x) in traj.nodes().iter().enumerate() {
        let mut row = vec![crate::report::fmt_f64(traj.time(i))];
        row.extend(x.iter().map(|v| crate::report::fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_crossings_csv<W: Write>(returns: &[ReturnTime], dim: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["p".to_string(), "R_p".into(), "N_p".into()];
    header.extend((1..=dim).map(|k| format!("point_{k}")));
    w.write_record(&header)?;
    for r in returns {
        let mut row = vec![r.p.to_string(), crate::report::fmt_f64(r.r), r.n.to_string()];
        row.extend(r.point.iter().map(|v| crate::report::fmt_f64(*v)));
        w.write_record(&row)?;
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
    use std::collections::BTreeMap;

    fn sys(id: &str, params: &[(&str, f64)]) -> VectorField {
        let p: BTreeMap<String, f64> = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        from_registry(id, &p).unwrap()
    }

    #[test]
    fn recurrence_examples() {
        let lin = sys("linear-stable", &[]);
        let t = simulate(&lin, &dvector![1.0, 0.0], 0.1, 1).unwrap();
        assert_abs_diff_eq!(t.node(1)[0], 0.9, epsilon = 1e-15);
        assert_eq!(t.node(1)[1], 0.0);

        let harm = sys("harmonic", &[]);
        let t = simulate(&harm, &dvector![1.0, 0.0], 0.01, 2).unwrap();
        assert_eq!(t.node(1), &dvector![1.0, -0.01]);
        assert_abs_diff_eq!(t.node(2)[0], 0.9999, epsilon = 1e-15);
        assert_abs_diff_eq!(t.node(2)[1], -0.02, epsilon = 1e-15);

        let vdp = sys("vanderpol", &[("p", 0.3)]);
        let x0 = dvector![1.8929, -0.5383];
        let t = simulate(&vdp, &x0, 1e-4, 1).unwrap();
        let expected = &x0 + vdp.eval_f(&x0).unwrap() * 1e-4;
        assert_eq!(t.node(1), &expected);
        assert_abs_diff_eq!(t.node(1)[0], 1.892846, epsilon = 1e-6);
        assert_abs_diff_eq!(t.node(1)[1], -0.538448, epsilon = 1e-6);
    }

    #[test]
    fn dense_output() {
        let lin = sys("linear-stable", &[]);
        let t = simulate(&lin, &dvector![1.0, 0.0], 0.1, 3).unwrap();
        assert_abs_diff_eq!(t.dense_point(0.05).unwrap()[0], 0.95, epsilon = 1e-15);
        for i in 0..=3 {
            assert_eq!(&t.dense_point(t.time(i)).unwrap(), t.node(i));
        }
        assert!(matches!(t.dense_point(0.31), Err(Error::OutOfRange { .. })));
        assert!(matches!(t.dense_point(-1e-9), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn divergence_reports_first_bad_step() {
        let blowup = crate::field::load_system(&crate::field::SystemSpec {
            rhs: Some(vec!["x1*x1".into()]),
            ..Default::default()
        })
        .unwrap();
        match simulate(&blowup, &dvector![1.0], 1.0, 50) {
            Err(Error::Diverged { step }) => assert!(step > 5 && step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn harmonic_period_and_second_return() {
        let harm = sys("harmonic", &[]);
        let x0 = dvector![1.0, 0.0];
        let h = 1e-4;
        let traj = simulate(&harm, &x0, h, 130_000).unwrap();
        let section = Section::through(&harm, &x0).unwrap();
        let rt = return_times(&traj, &section, 2, Exclusion::standard(h, 0.1)).unwrap();
        assert!(rt.complete);
        let r1 = rt.returns[0].r;
        assert_abs_diff_eq!(r1, std::f64::consts::TAU, epsilon = 0.01);
        assert_abs_diff_eq!(rt.returns[1].r, 2.0 * r1, epsilon = 0.02);
        for r in &rt.returns {
            assert!(r.r > (r.n - 1) as f64 * h && r.r <= r.n as f64 * h);
        }
    }

    #[test]
    fn monotone_escape_has_no_crossings() {
        let flow = sys("uniform-flow", &[]);
        let x0 = dvector![0.0, 0.0];
        let traj = simulate(&flow, &x0, 0.01, 1000).unwrap();
        let section = Section::new(x0.clone(), dvector![1.0, 0.0]).unwrap();
        assert!(detect_crossings(&traj, &section, Exclusion::standard(0.01, 0.1)).unwrap().is_empty());
        let rt = return_times(&traj, &section, 1, Exclusion::standard(0.01, 0.1)).unwrap();
        assert!(!rt.complete && rt.returns.is_empty());
    }

    #[test]
    fn streaming_matches_stored() {
        let vdp = sys("vanderpol", &[("p", 0.3)]);
        let x0 = dvector![1.8929, -0.5383];
        let h = 1e-3;
        let section = Section::through(&vdp, &x0).unwrap();
        let ex = Exclusion::standard(h, 0.1);
        let streamed = first_return(&vdp, &x0, h, &section, ex, 20.0).unwrap().unwrap();
        let (traj, stored) = simulate_until_return(&vdp, &x0, h, &section, ex, 20.0).unwrap();
        assert_eq!(streamed, stored);
        assert_eq!(traj.n_steps(), stored.step_index + 1);
        let full = simulate(&vdp, &x0, h, 8000).unwrap();
        assert_eq!(detect_crossings(&full, &section, ex).unwrap()[0], stored);
    }

    #[test]
    fn csv_exports() {
        let harm = sys("harmonic", &[]);
        let t = simulate(&harm, &dvector![1.0, 0.0], 0.5, 2).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x_1,x_2"));
        assert_eq!(text.lines().count(), 4);
    }
}
