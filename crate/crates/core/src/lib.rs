//! Numerical certificates for the existence of a stable limit cycle and an
//! estimate of its basin of attraction, built from a single explicit-Euler
//! loop, a contraction tube around it, and a transverse matrix measure.
//!
//! ```
//! use std::collections::BTreeMap;
//! use cyclecert::{field::from_registry, euler::simulate};
//! use nalgebra::dvector;
//!
//! let field = from_registry("harmonic", &BTreeMap::new()).unwrap();
//! let traj = simulate(&field, &dvector![1.0, 0.0], 1e-3, 1000).unwrap();
//! assert_eq!(traj.nodes().len(), 1001);
//! ```

// `!(x > 0.0)` is deliberate throughout: NaN has to fail those checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attraction;
pub mod config;
pub mod constants;
pub mod error;
pub mod euler;
pub mod field;
pub mod linalg;
pub mod measure;
pub mod report;
pub mod sync;
pub mod tube;

pub use error::{Error, Result};
pub use field::VectorField;

// The guide's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/systems.md")]
    mod systems {}
    #[doc = include_str!("../../../book/src/euler.md")]
    mod euler {}
    #[doc = include_str!("../../../book/src/measures.md")]
    mod measures {}
    #[doc = include_str!("../../../book/src/tube.md")]
    mod tube {}
    #[doc = include_str!("../../../book/src/existence.md")]
    mod existence {}
    #[doc = include_str!("../../../book/src/attraction.md")]
    mod attraction {}
    #[doc = include_str!("../../../book/src/error-curves.md")]
    mod error_curves {}
    #[doc = include_str!("../../../book/src/outputs.md")]
    mod outputs {}
}
