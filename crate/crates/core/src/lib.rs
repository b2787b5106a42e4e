//! Projection predictive variable and structure selection for GLMs, GLMMs
//! and GAMMs.
//!
//! A reference model's posterior predictive (draws of the predictive means)
//! is projected onto submodels by exponential-family maximum likelihood,
//! with group and smooth terms handled through PIRLS and a Laplace-profiled
//! deviance. Forward search over terms builds a solution path whose sizes are
//! scored by leave-one-out ELPD.

// Negated float comparisons are used on purpose so that NaN takes the
// failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cli;
pub mod data;
pub mod design;
pub mod error;
pub mod exec;
pub mod family;
pub mod formula;
pub mod optim;
pub mod projector;
pub mod reference;
pub mod search;
pub mod select;
pub mod simulate;
pub mod validate;

pub use data::{Column, ColumnType, Dataset, Factor};
pub use design::{build_design, DesignMatrices, DesignOptions};
pub use error::{Error, Result};
pub use exec::Exec;
pub use family::Family;
pub use formula::{parse_formula, ModelFormula, Term};
