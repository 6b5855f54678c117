//! Timing results.

use serde::Serialize;

/// Cycle accounting for one engine. The five fields sum to the elapsed time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EngineStats {
    pub busy: f64,
    /// Waiting for operand tiles from memory.
    pub stall_operand: f64,
    /// Waiting for a result of another instruction.
    pub stall_scoreboard: f64,
    /// Waiting for a synchronization with peer devices.
    pub stall_sync: f64,
    pub idle: f64,
}

impl EngineStats {
    pub fn total(&self) -> f64 {
        self.busy + self.stall_operand + self.stall_scoreboard + self.stall_sync + self.idle
    }

    /// Fill `idle` so the engine accounts for `cycles` in total.
    pub fn close(&mut self, cycles: f64) {
        let used = self.busy + self.stall_operand + self.stall_scoreboard + self.stall_sync;
        self.idle = (cycles - used).max(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub cycle: f64,
    pub engine: &'static str,
    pub inst: String,
}

/// Timing of one generated token on one device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub device: usize,
    pub position: usize,
    pub seconds: f64,
    pub cycles: f64,
    /// Bytes moved over the HBM channels.
    pub bytes: u64,
    /// `bytes / (peak bandwidth * seconds)`.
    pub utilization: f64,
    pub sma: EngineStats,
    pub sxe: EngineStats,
    pub vxe: EngineStats,
    /// Seconds of synchronization not hidden behind computation.
    pub sync_exposed: f64,
    /// Most partial-sum column sets ever live in the SXE at once.
    pub max_live_partial_sets: usize,
    pub token: Option<u32>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}
