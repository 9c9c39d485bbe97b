//! Autonomous vector fields `x' = f(x)`, their Jacobians, and the registry of
//! built-in systems.
//!
//! A [`VectorField`] is immutable after construction and cheap to clone; the
//! right-hand side lives behind an `Arc<dyn Dynamics>`. Registry systems carry
//! analytic Jacobians. Systems loaded from inline expressions fall back to
//! central finite differences unless a Jacobian is supplied as expressions too.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use exmex::prelude::*;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Right-hand side of an autonomous system.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn rhs(&self, x: &[f64], out: &mut [f64]);

    /// Writes the analytic Jacobian into `out`. Returns `false` when the
    /// system has none, in which case callers fall back to finite differences.
    fn jacobian(&self, _x: &[f64], _out: &mut DMatrix<f64>) -> bool {
        false
    }

    fn has_jacobian(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum JacobianMode {
    Analytic,
    FiniteDifference { step: f64 },
}

impl Default for JacobianMode {
    fn default() -> Self {
        JacobianMode::FiniteDifference {
            step: DEFAULT_FD_STEP,
        }
    }
}

#[derive(Clone)]
pub struct VectorField {
    name: String,
    params: BTreeMap<String, f64>,
    dynamics: Arc<dyn Dynamics>,
    jacobian_mode: JacobianMode,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("params", &self.params)
            .field("jacobian_mode", &self.jacobian_mode)
            .finish()
    }
}

impl VectorField {
    /// Wraps `dynamics`, choosing the analytic Jacobian when it has one.
    pub fn new<D: Dynamics + 'static>(
        name: impl Into<String>,
        params: BTreeMap<String, f64>,
        dynamics: D,
    ) -> Self {
        let jacobian_mode = if dynamics.has_jacobian() {
            JacobianMode::Analytic
        } else {
            JacobianMode::default()
        };
        VectorField {
            name: name.into(),
            params,
            dynamics: Arc::new(dynamics),
            jacobian_mode,
        }
    }

    pub fn with_jacobian_mode(mut self, mode: JacobianMode) -> Result<Self> {
        match mode {
            JacobianMode::Analytic if !self.dynamics.has_jacobian() => {
                return Err(Error::InvalidParameter(format!(
                    "system `{}` has no analytic Jacobian",
                    self.name
                )))
            }
            JacobianMode::FiniteDifference { step } if !(step > 0.0 && step.is_finite()) => {
                return Err(Error::InvalidParameter(format!(
                    "finite-difference step must be positive, got {step}"
                )))
            }
            _ => {}
        }
        self.jacobian_mode = mode;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn jacobian_mode(&self) -> JacobianMode {
        self.jacobian_mode
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "state",
                index,
            });
        }
        Ok(())
    }

    pub fn eval_f(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut out = DVector::zeros(self.dim());
        self.dynamics.rhs(x.as_slice(), out.as_mut_slice());
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "f(x)",
                index,
            });
        }
        Ok(out)
    }

    /// Allocation-free `eval_f` for hot loops; `x` must already be finite.
    pub fn eval_f_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim() || out.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        self.dynamics.rhs(x, out);
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "f(x)",
                index,
            });
        }
        Ok(())
    }

    pub fn eval_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let jac = match self.jacobian_mode {
            JacobianMode::Analytic => {
                let n = self.dim();
                let mut out = DMatrix::zeros(n, n);
                self.dynamics.jacobian(x.as_slice(), &mut out);
                out
            }
            JacobianMode::FiniteDifference { step } => self.central_difference(x, step),
        };
        if let Some(index) = jac.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "J(x)",
                index,
            });
        }
        Ok(jac)
    }

    /// Central-difference Jacobian regardless of the configured mode.
    pub fn finite_difference_jacobian(&self, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.central_difference(x, step))
    }

    fn central_difference(&self, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut jac = DMatrix::zeros(n, n);
        let mut probe = x.clone_owned();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for col in 0..n {
            let orig = probe[col];
            probe[col] = orig + step;
            self.dynamics.rhs(probe.as_slice(), &mut plus);
            probe[col] = orig - step;
            self.dynamics.rhs(probe.as_slice(), &mut minus);
            probe[col] = orig;
            for row in 0..n {
                jac[(row, col)] = (plus[row] - minus[row]) / (2.0 * step);
            }
        }
        jac
    }
}

// Built-in systems.

/// `u1' = u2`, `u2' = p u2 - p u1^2 u2 - u1`.
#[derive(Clone, Copy, Debug)]
pub struct VanDerPol {
    pub p: f64,
}

impl Dynamics for VanDerPol {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        let (u1, u2) = (x[0], x[1]);
        out[0] = u2;
        out[1] = self.p * u2 - self.p * u1 * u1 * u2 - u1;
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> bool {
        let (u1, u2) = (x[0], x[1]);
        out[(0, 0)] = 0.0;
        out[(0, 1)] = 1.0;
        out[(1, 0)] = -2.0 * self.p * u1 * u2 - 1.0;
        out[(1, 1)] = self.p - self.p * u1 * u1;
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

/// Circle flow `x' = (x2, -x1)`, period 2π.
#[derive(Clone, Copy, Debug)]
pub struct Harmonic;

impl Dynamics for Harmonic {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -x[0];
    }

    fn jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) -> bool {
        out[(0, 0)] = 0.0;
        out[(0, 1)] = 1.0;
        out[(1, 0)] = -1.0;
        out[(1, 1)] = 0.0;
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

/// `x' = -rate * x` in `dim` dimensions.
#[derive(Clone, Copy, Debug)]
pub struct LinearStable {
    pub rate: f64,
    pub dim: usize,
}

impl Dynamics for LinearStable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = -self.rate * v;
        }
    }

    fn jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) -> bool {
        out.fill(0.0);
        out.fill_diagonal(-self.rate);
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

/// `v' = v - v^3/3 - w + current`, `w' = eps (v + a - b w)`.
#[derive(Clone, Copy, Debug)]
pub struct FitzHughNagumo {
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub current: f64,
}

impl Dynamics for FitzHughNagumo {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        let (v, w) = (x[0], x[1]);
        out[0] = v - v * v * v / 3.0 - w + self.current;
        out[1] = self.eps * (v + self.a - self.b * w);
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> bool {
        let v = x[0];
        out[(0, 0)] = 1.0 - v * v;
        out[(0, 1)] = -1.0;
        out[(1, 0)] = self.eps;
        out[(1, 1)] = -self.eps * self.b;
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

/// Expanding focus `x' = growth * x + omega * (x2, -x1)`.
#[derive(Clone, Copy, Debug)]
pub struct UnstableFocus {
    pub growth: f64,
    pub omega: f64,
}

impl Dynamics for UnstableFocus {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.growth * x[0] + self.omega * x[1];
        out[1] = -self.omega * x[0] + self.growth * x[1];
    }

    fn jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) -> bool {
        out[(0, 0)] = self.growth;
        out[(0, 1)] = self.omega;
        out[(1, 0)] = -self.omega;
        out[(1, 1)] = self.growth;
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

/// Constant velocity field.
#[derive(Clone, Debug)]
pub struct UniformFlow {
    pub velocity: Vec<f64>,
}

impl Dynamics for UniformFlow {
    fn dim(&self) -> usize {
        self.velocity.len()
    }

    fn rhs(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.velocity);
    }

    fn jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) -> bool {
        out.fill(0.0);
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

/// `x' = A x`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub matrix: DMatrix<f64>,
}

impl Dynamics for LinearSystem {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (row, o) in out.iter_mut().enumerate().take(n) {
            *o = (0..n).map(|col| self.matrix[(row, col)] * x[col]).sum();
        }
    }

    fn jacobian(&self, _x: &[f64], out: &mut DMatrix<f64>) -> bool {
        out.copy_from(&self.matrix);
        true
    }

    fn has_jacobian(&self) -> bool {
        true
    }
}

// Expression-backed systems.

#[derive(Clone, Copy, Debug)]
enum Binding {
    State(usize),
    Param(f64),
}

#[derive(Debug)]
struct CompiledExpr {
    expr: FlatEx<f64>,
    bindings: Vec<Binding>,
}

impl CompiledExpr {
    fn compile(
        source: &str,
        system: &str,
        variables: &[String],
        params: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let expr = exmex::parse::<f64>(source)
            .map_err(|e| Error::Expression(format!("`{source}`: {e}")))?;
        let bindings = expr
            .var_names()
            .iter()
            .map(|name| {
                if let Some(i) = variables.iter().position(|v| v == name) {
                    Ok(Binding::State(i))
                } else if let Some(&value) = params.get(name) {
                    Ok(Binding::Param(value))
                } else {
                    Err(Error::MissingParameter {
                        system: system.to_string(),
                        name: name.clone(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledExpr { expr, bindings })
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let args: Vec<f64> = self
            .bindings
            .iter()
            .map(|b| match *b {
                Binding::State(i) => x[i],
                Binding::Param(v) => v,
            })
            .collect();
        self.expr.eval(&args).unwrap_or(f64::NAN)
    }
}

/// A system whose components are parsed arithmetic expressions.
#[derive(Debug)]
pub struct ExpressionSystem {
    components: Vec<CompiledExpr>,
    jacobian: Option<Vec<CompiledExpr>>,
}

impl ExpressionSystem {
    pub fn new(
        system: &str,
        variables: &[String],
        rhs: &[String],
        jacobian: Option<&[Vec<String>]>,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        if variables.len() != rhs.len() {
            return Err(Error::DimensionMismatch {
                expected: variables.len(),
                got: rhs.len(),
            });
        }
        if let Some(v) = variables.iter().find(|v| params.contains_key(*v)) {
            return Err(Error::InvalidParameter(format!(
                "`{v}` is both a state variable and a parameter"
            )));
        }
        let components = rhs
            .iter()
            .map(|src| CompiledExpr::compile(src, system, variables, params))
            .collect::<Result<Vec<_>>>()?;
        let jacobian = match jacobian {
            None => None,
            Some(rows) => {
                let n = variables.len();
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Expression(format!(
                        "jacobian must be a {n}x{n} array of expressions"
                    )));
                }
                Some(
                    rows.iter()
                        .flatten()
                        .map(|src| CompiledExpr::compile(src, system, variables, params))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(ExpressionSystem {
            components,
            jacobian,
        })
    }
}

impl Dynamics for ExpressionSystem {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval(x);
        }
    }

    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) -> bool {
        let Some(entries) = &self.jacobian else {
            return false;
        };
        let n = self.dim();
        for (k, e) in entries.iter().enumerate() {
            out[(k / n, k % n)] = e.eval(x);
        }
        true
    }

    fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }
}

// Registry and loader.

/// Ids accepted by [`from_registry`].
pub const REGISTRY: &[&str] = &[
    "vanderpol",
    "harmonic",
    "linear-stable",
    "fitzhugh-nagumo",
    "unstable-focus",
    "uniform-flow",
];

struct ParamReader<'a> {
    system: &'a str,
    params: &'a BTreeMap<String, f64>,
    known: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(system: &'a str, params: &'a BTreeMap<String, f64>) -> Self {
        ParamReader {
            system,
            params,
            known: Vec::new(),
        }
    }

    fn required(&mut self, name: &'static str) -> Result<f64> {
        self.known.push(name);
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter {
                system: self.system.to_string(),
                name: name.to_string(),
            })
    }

    fn or(&mut self, name: &'static str, default: f64) -> f64 {
        self.known.push(name);
        self.params.get(name).copied().unwrap_or(default)
    }

    fn finish(self) -> Result<BTreeMap<String, f64>> {
        if let Some(extra) = self.params.keys().find(|k| !self.known.contains(&k.as_str())) {
            return Err(Error::UnexpectedParameter {
                system: self.system.to_string(),
                name: extra.clone(),
            });
        }
        Ok(self.params.clone())
    }
}

/// Builds a registry system. Missing optional parameters take their defaults;
/// the resolved values are recorded on the returned field.
pub fn from_registry(id: &str, params: &BTreeMap<String, f64>) -> Result<VectorField> {
    let mut reader = ParamReader::new(id, params);
    let mut resolved = BTreeMap::new();
    let field = match id {
        "vanderpol" => {
            let p = reader.required("p")?;
            resolved.insert("p".into(), p);
            VectorField::new(id, BTreeMap::new(), VanDerPol { p })
        }
        "harmonic" => VectorField::new(id, BTreeMap::new(), Harmonic),
        "linear-stable" => {
            let rate = reader.or("rate", 1.0);
            let dim = reader.or("dim", 2.0);
            if dim < 1.0 || dim.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "linear-stable dim must be a positive integer, got {dim}"
                )));
            }
            resolved.insert("rate".into(), rate);
            resolved.insert("dim".into(), dim);
            VectorField::new(
                id,
                BTreeMap::new(),
                LinearStable {
                    rate,
                    dim: dim as usize,
                },
            )
        }
        "fitzhugh-nagumo" => {
            let sys = FitzHughNagumo {
                a: reader.or("a", 0.7),
                b: reader.or("b", 0.8),
                eps: reader.or("eps", 0.08),
                current: reader.or("current", 0.5),
            };
            resolved.insert("a".into(), sys.a);
            resolved.insert("b".into(), sys.b);
            resolved.insert("eps".into(), sys.eps);
            resolved.insert("current".into(), sys.current);
            VectorField::new(id, BTreeMap::new(), sys)
        }
        "unstable-focus" => {
            let sys = UnstableFocus {
                growth: reader.or("growth", 0.1),
                omega: reader.or("omega", 1.0),
            };
            resolved.insert("growth".into(), sys.growth);
            resolved.insert("omega".into(), sys.omega);
            VectorField::new(id, BTreeMap::new(), sys)
        }
        "uniform-flow" => {
            let vx = reader.or("vx", 1.0);
            let vy = reader.or("vy", 0.0);
            resolved.insert("vx".into(), vx);
            resolved.insert("vy".into(), vy);
            VectorField::new(
                id,
                BTreeMap::new(),
                UniformFlow {
                    velocity: vec![vx, vy],
                },
            )
        }
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    reader.finish()?;
    Ok(VectorField {
        params: resolved,
        ..field
    })
}

/// On-disk system definition: either a registry `id` or inline `rhs`
/// expressions over `variables` (default `x1..xn`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variables: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhs: Option<Vec<String>>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jacobian: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
}

impl SystemSpec {
    pub fn registry(id: &str, params: &[(&str, f64)]) -> Self {
        SystemSpec {
            id: Some(id.to_string()),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn load_system(spec: &SystemSpec) -> Result<VectorField> {
    let field = match (&spec.id, &spec.rhs) {
        (Some(id), None) => {
            if spec.jacobian.is_some() || spec.variables.is_some() {
                return Err(Error::InvalidParameter(
                    "registry systems take only `params` (and optionally `fd_step`)".into(),
                ));
            }
            let field = from_registry(id, &spec.params)?;
            match spec.fd_step {
                Some(step) => field.with_jacobian_mode(JacobianMode::FiniteDifference { step })?,
                None => field,
            }
        }
        (None, Some(rhs)) => {
            let variables = spec
                .variables
                .clone()
                .unwrap_or_else(|| (1..=rhs.len()).map(|i| format!("x{i}")).collect());
            let name = spec.name.clone().unwrap_or_else(|| "inline".to_string());
            let system = ExpressionSystem::new(
                &name,
                &variables,
                rhs,
                spec.jacobian.as_deref(),
                &spec.params,
            )?;
            let field = VectorField::new(name, spec.params.clone(), system);
            match spec.fd_step {
                Some(step) if spec.jacobian.is_none() => {
                    field.with_jacobian_mode(JacobianMode::FiniteDifference { step })?
                }
                _ => field,
            }
        }
        (Some(_), Some(_)) => {
            return Err(Error::InvalidParameter(
                "system spec has both `id` and `rhs`".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidParameter(
                "system spec needs `id` or `rhs`".into(),
            ))
        }
    };
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn vdp() -> VectorField {
        from_registry("vanderpol", &[("p".to_string(), 0.3)].into_iter().collect()).unwrap()
    }

    #[test]
    fn vanderpol_rhs_at_reference_point() {
        // hand evaluation: u2 = -0.5383, p*u2*(1 - u1^2) - u1 with u1 = 1.8929
        let x = dvector![1.8929, -0.5383];
        let f = vdp().eval_f(&x).unwrap();
        let u1: f64 = 1.8929;
        let u2: f64 = -0.5383;
        let expected = 0.3 * u2 - 0.3 * u1 * u1 * u2 - u1;
        assert_eq!(f[0], -0.5383);
        assert_abs_diff_eq!(f[1], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], -1.4758, epsilon = 5e-5);
    }

    #[test]
    fn vanderpol_jacobian_at_reference_point() {
        let j = vdp().eval_jacobian(&dvector![1.8929, -0.5383]).unwrap();
        assert_eq!(j[(0, 0)], 0.0);
        assert_eq!(j[(0, 1)], 1.0);
        assert_abs_diff_eq!(j[(1, 0)], -2.0 * 0.3 * 1.8929 * -0.5383 - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 0)], -0.3886, epsilon = 1e-4);
        assert_abs_diff_eq!(j[(1, 1)], -0.7749, epsilon = 1e-4);
    }

    #[test]
    fn trivial_systems() {
        let lin = from_registry("linear-stable", &BTreeMap::new()).unwrap();
        assert_eq!(lin.eval_f(&dvector![2.0, 3.0]).unwrap(), dvector![-2.0, -3.0]);
        assert_eq!(
            lin.eval_jacobian(&dvector![5.0, -1.0]).unwrap(),
            -DMatrix::<f64>::identity(2, 2)
        );
        let harm = from_registry("harmonic", &BTreeMap::new()).unwrap();
        assert_eq!(harm.eval_f(&dvector![1.0, 0.0]).unwrap(), dvector![0.0, -1.0]);
        assert_eq!(
            harm.eval_jacobian(&dvector![0.3, 0.7]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
        );
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let f = vdp();
        assert!(matches!(
            f.eval_f(&dvector![1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(matches!(
            f.eval_f(&dvector![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let blowup = load_system(&SystemSpec {
            rhs: Some(vec!["1/x1".into(), "x2".into()]),
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            blowup.eval_f(&dvector![0.0, 1.0]),
            Err(Error::NonFinite { what: "f(x)", index: 0 })
        ));
    }

    #[test]
    fn loader_errors() {
        assert!(matches!(
            load_system(&SystemSpec::registry("lorenz", &[])),
            Err(Error::UnknownSystem(_))
        ));
        assert!(matches!(
            load_system(&SystemSpec::registry("vanderpol", &[])),
            Err(Error::MissingParameter { .. })
        ));
        assert!(matches!(
            load_system(&SystemSpec::registry("harmonic", &[("q", 1.0)])),
            Err(Error::UnexpectedParameter { .. })
        ));
        let malformed = SystemSpec {
            rhs: Some(vec!["x2 +* ".into(), "x1".into()]),
            ..Default::default()
        };
        assert!(matches!(load_system(&malformed), Err(Error::Expression(_))));
        let unbound = SystemSpec {
            rhs: Some(vec!["k*x2".into(), "x1".into()]),
            ..Default::default()
        };
        assert!(matches!(load_system(&unbound), Err(Error::MissingParameter { .. })));
    }

    #[test]
    fn inline_jacobian_mode_defaults() {
        let spec = SystemSpec {
            rhs: Some(vec!["x2".into(), "-x1".into()]),
            ..Default::default()
        };
        let field = load_system(&spec).unwrap();
        assert_eq!(
            field.jacobian_mode(),
            JacobianMode::FiniteDifference { step: DEFAULT_FD_STEP }
        );
        let with_jac = SystemSpec {
            jacobian: Some(vec![vec!["0".into(), "1".into()], vec!["-1".into(), "0".into()]]),
            ..spec
        };
        let field = load_system(&with_jac).unwrap();
        assert_eq!(field.jacobian_mode(), JacobianMode::Analytic);
        assert_eq!(
            field.eval_jacobian(&dvector![0.2, 0.1]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
        );
    }

    #[test]
    fn json_spec_round_trip() {
        let text = r#"{"id": "vanderpol", "params": {"p": 0.3}}"#;
        let spec = SystemSpec::from_json(text).unwrap();
        assert_eq!(spec, SystemSpec::registry("vanderpol", &[("p", 0.3)]));
        assert!(SystemSpec::from_json(r#"{"id": "harmonic", "colour": 1}"#).is_err());
    }
}
