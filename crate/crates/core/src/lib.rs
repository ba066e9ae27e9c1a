// Negated comparisons below reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clients;
pub mod curation;
pub mod error;
pub mod eval;
pub mod format;
pub mod graph;
pub mod gt;
pub mod inspect;
pub mod lm;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
