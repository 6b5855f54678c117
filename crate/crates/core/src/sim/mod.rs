pub mod functional;
pub mod numeric;
pub mod reference;
pub mod report;
pub mod sampler;
pub mod timing;

pub use functional::{interpret, interpret_cluster, RunOptions, RunOutput, Schedule};
pub use report::{EngineStats, SimReport, TraceEvent};
pub use sampler::{sample, SamplingParams};
pub use timing::{simulate_ring, simulate_token, TimingSim};
