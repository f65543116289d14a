//! Numerical laboratory for boundary blow-up solutions of the Loewner–Nirenberg
//! problem near conical boundary points.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cone_profiles;
pub mod domain_solver;
pub mod error;
pub mod expansion;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod newton;
pub mod spectral;
pub mod sphere_fields;

pub use error::{Error, Result};
