//! Simulator and toolchain for a latency-oriented LLM inference processor.

pub mod arch;
pub mod bench;
pub mod codegen;
pub mod compiler;
pub mod error;
pub mod esl;
pub mod isa;
pub mod mapper;
pub mod model;
pub mod presets;
pub mod sim;

pub use error::{Error, Result};
