//! Einsum cascade fusion: parsing, stitching, loop-nest lowering, a reference
//! interpreter and an analytic cost model.

pub mod cost;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod interp;
pub mod ir;
pub mod schedule;

pub use error::{Error, ParseDiagnostic, Result};
pub use ir::*;
