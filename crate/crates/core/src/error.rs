use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("capacity exceeded by {deficit} bytes")]
    CapacityExceeded { deficit: u64 },

    #[error("invalid device count {0} (expected 1, 2, 4 or 8)")]
    InvalidDeviceCount(usize),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("tensor {0} has no memory mapping")]
    UnmappedTensor(String),

    #[error("unknown block `{0}`")]
    UnknownBlock(String),

    #[error("register pressure exceeded: {needed} live {class} registers, {available} available")]
    RegisterPressureExceeded {
        class: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("cyclic dependency through instruction {0}")]
    CyclicDependency(usize),

    #[error("malformed binary: {0}")]
    MalformedBinary(String),

    #[error("invalid sampling parameters: {0}")]
    InvalidSamplingParams(String),

    #[error("decode fault: {0}")]
    DecodeFault(String),

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("illegal ring partition {partition} for {devices} devices")]
    IllegalPartition { partition: String, devices: usize },

    #[error("devices {src} and {dst} are not in the same ring")]
    CrossRing { src: usize, dst: usize },

    #[error("sync buffer overflow on device {device}: {occupancy} bytes > {capacity} bytes")]
    BufferOverflow {
        device: usize,
        occupancy: u64,
        capacity: u64,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
