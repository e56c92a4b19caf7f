// `!(x > 0.0)` is used on purpose so NaN is rejected along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image;
pub mod inspect;
pub mod llm;
pub mod model;
pub mod prompts;
pub mod run;
pub mod selfcheck;
pub mod space;
pub mod synth;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
