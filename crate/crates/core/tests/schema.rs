//! Every JSON document the pipeline writes validates against `schemas/`.

mod common;

use std::sync::OnceLock;

use common::*;
use cyclecert::attraction::{certify_attraction, AttractionConfig};
use cyclecert::report::to_json_string;
use cyclecert::sync::{error_curve_experiment, ErrorCurveConfig};
use cyclecert::tube::{certify_existence, ExistenceConfig, ExistenceRun, Verdict};
use cyclecert::Error;
use serde::Serialize;
use serde_json::Value;

fn as_written<T: Serialize>(value: &T) -> Value {
    serde_json::from_str(&to_json_string(value).unwrap()).unwrap()
}

fn assert_valid<T: Serialize>(schema: &str, value: &T) {
    let errors = schema_errors(schema, &as_written(value));
    assert!(errors.is_empty(), "{schema}:\n{}", errors.join("\n"));
}

fn vdp_run() -> &'static ExistenceRun {
    static RUN: OnceLock<ExistenceRun> = OnceLock::new();
    RUN.get_or_init(|| certify_existence(&vdp(), &x0(), 1e-4, 0.1, 0.015, &ExistenceConfig::default()))
}

#[test]
fn existence_and_constants() {
    let cert = &vdp_run().certificate;
    assert_eq!(cert.verdict, Verdict::Certified);
    assert_valid("existence.schema.json", cert);
    assert_valid("constants.schema.json", cert.constants.as_ref().unwrap());
}

#[test]
fn failed_existence_still_validates() {
    let field = registry("linear-stable");
    let run = certify_existence(&field, &nalgebra::dvector![1.0, 0.0], 1e-3, 0.1, 0.015, &ExistenceConfig::default());
    assert_eq!(run.certificate.verdict, Verdict::Failed);
    assert_valid("existence.schema.json", &run.certificate);
}

#[test]
fn attraction() {
    let field = vdp();
    let config = AttractionConfig { n_samples: 3, reference_d: Some(-0.34), ..Default::default() };
    let cert = certify_attraction(&vdp_run().certificate, &field, &ExistenceConfig::default(), &config).unwrap();
    assert_valid("attraction.schema.json", &cert);
}

#[test]
fn error_curve() {
    let cfg = ErrorCurveConfig { periods: 1.0, ref_factor: 10.0, floor_constant: Some(503.0), ..Default::default() };
    let report = error_curve_experiment(&vdp(), &x0(), &y0(), &[2e-3, 1e-3], &cfg).unwrap();
    assert_valid("error_curve.schema.json", &report);
}

#[test]
fn error_report() {
    for e in [
        Error::InvalidParameter("h must be positive".into()),
        Error::DimensionMismatch { expected: 2, got: 3 },
        Error::Precondition("existence certificate is not certified".into()),
    ] {
        let doc = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
        let errors = schema_errors("error.schema.json", &doc);
        assert!(errors.is_empty(), "{}", errors.join("\n"));
    }
}

#[test]
fn schemas_reject_extra_fields() {
    let mut doc = as_written(&vdp_run().certificate);
    doc.as_object_mut().unwrap().insert("unexpected".into(), Value::Bool(true));
    assert!(!schema_errors("existence.schema.json", &doc).is_empty());
}
