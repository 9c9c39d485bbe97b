#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cyclecert::field::{from_registry, VectorField};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

pub const X0: [f64; 2] = [1.8929, -0.5383];
pub const Y0: [f64; 2] = [1.8037, -0.5057];

pub fn vdp() -> VectorField {
    from_registry("vanderpol", &[("p".to_string(), 0.3)].into_iter().collect()).unwrap()
}

pub fn registry(id: &str) -> VectorField {
    from_registry(id, &BTreeMap::new()).unwrap()
}

pub fn x0() -> DVector<f64> {
    DVector::from_row_slice(&X0)
}

pub fn y0() -> DVector<f64> {
    DVector::from_row_slice(&Y0)
}

/// Determinant of `S - λI` for `n ∈ {2, 3}` by cofactor expansion.
fn char_poly(s: &DMatrix<f64>, lambda: f64) -> f64 {
    let m = s - DMatrix::identity(s.nrows(), s.nrows()) * lambda;
    match s.nrows() {
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        n => panic!("char_poly only for n = 2, 3, got {n}"),
    }
}

/// Largest root of the characteristic polynomial of a symmetric `S`, found
/// by scanning down from the Gershgorin bound and bisecting the first sign
/// change. Shares no code with the eigen-solver.
pub fn largest_char_root(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let bound = (0..n)
        .map(|r| (0..n).map(|c| s[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    // sign of det(S - λI) for λ above every eigenvalue is (-1)^n
    let top_sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    let steps = 20_000;
    let mut hi = bound;
    for k in 1..=steps {
        let lo = bound - 2.0 * bound * k as f64 / steps as f64;
        let v = char_poly(s, lo);
        if v * top_sign <= 0.0 {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if char_poly(s, mid) * top_sign <= 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return 0.5 * (a + b);
        }
        hi = lo;
    }
    panic!("no root found in [-{bound}, {bound}]")
}

pub fn rk4_step(field: &VectorField, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let k1 = field.eval_f(x).unwrap();
    let k2 = field.eval_f(&(x + &k1 * (dt / 2.0))).unwrap();
    let k3 = field.eval_f(&(x + &k2 * (dt / 2.0))).unwrap();
    let k4 = field.eval_f(&(x + &k3 * dt)).unwrap();
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Exact-flow surrogate `Φ_θ(ξ)` by RK4 with fixed substeps.
pub fn flow(field: &VectorField, xi: &DVector<f64>, theta: f64) -> DVector<f64> {
    let n = 64;
    let dt = theta / n as f64;
    (0..n).fold(xi.clone(), |x, _| rk4_step(field, &x, dt))
}

/// Phase `θ(s)` with `Φ_θ(ξ) ∈ S_i(s)`, by Newton's method on the section
/// equation, for the segment `node + s · f_node`.
pub fn synchronized_phase(field: &VectorField, node: &DVector<f64>, f_node: &DVector<f64>, s: f64, xi: &DVector<f64>, theta0: f64) -> f64 {
    let c = node + f_node * s;
    let n = field.eval_f(&c).unwrap();
    let mut theta = theta0;
    for _ in 0..50 {
        let p = flow(field, xi, theta);
        let g = (&p - &c).dot(&n);
        let dg = field.eval_f(&p).unwrap().dot(&n);
        let step = g / dg;
        theta -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    theta
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct SchemaDir(PathBuf);

impl jsonschema::Retrieve for SchemaDir {
    fn retrieve(&self, uri: &jsonschema::Uri<String>) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let name = uri.as_str().rsplit('/').next().unwrap_or_default().to_string();
        let text = std::fs::read_to_string(self.0.join(name))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Validation errors of `instance` against `schemas/<name>`.
pub fn schema_errors(name: &str, instance: &Value) -> Vec<String> {
    let dir = repo_root().join("schemas");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap();
    let validator = jsonschema::options().with_retriever(SchemaDir(dir)).build(&schema).unwrap();
    validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path())).collect()
}
