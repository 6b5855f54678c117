//! Experiments: per-token latency of a model on a cluster and device sweeps.
//!
//! Decoding is memory bound, so per-token latency is nearly linear in the
//! KV length. A run simulates a handful of positions spread over the
//! generated range and averages them with the trapezoidal rule.

use rayon::prelude::*;
use serde::Serialize;

use crate::arch::{ClusterConfig, RingPartition};
use crate::codegen::BLOCK_GEN;
use crate::compiler::{compile_cluster, Compiled};
use crate::error::{Error, Result};
use crate::presets;
use crate::sim::timing::simulate_ring;
use crate::sim::SamplingParams;

pub const DEFAULT_INPUT_TOKENS: usize = 32;
pub const DEFAULT_OUTPUT_TOKENS: usize = 2016;
/// Positions simulated per run when none are given.
pub const SAMPLE_POINTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub model: String,
    pub arch: String,
    pub devices: usize,
    /// Defaults to one ring over all devices.
    pub partition: Option<RingPartition>,
    pub input_tokens: usize,
    pub output_tokens: usize,
    /// KV positions to simulate; defaults to [`sample_positions`].
    pub positions: Option<Vec<usize>>,
    /// Simulate every generated position.
    pub full_decode: bool,
    pub sampling: SamplingParams,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(model: &str, arch: &str, devices: usize) -> Self {
        ExperimentSpec {
            model: model.into(),
            arch: arch.into(),
            devices,
            partition: None,
            input_tokens: DEFAULT_INPUT_TOKENS,
            output_tokens: DEFAULT_OUTPUT_TOKENS,
            positions: None,
            full_decode: false,
            sampling: SamplingParams::greedy(),
            seed: 0,
        }
    }

    pub fn cluster(&self) -> Result<ClusterConfig> {
        let partition = match self.partition {
            Some(p) => p,
            None => RingPartition::single_ring(self.devices)?,
        };
        ClusterConfig::new(presets::device(&self.arch)?, self.devices, partition)
    }

    /// KV positions of the generated tokens to simulate.
    pub fn positions(&self) -> Result<Vec<usize>> {
        if self.output_tokens == 0 {
            return Err(Error::InvalidConfig("no output tokens".into()));
        }
        Ok(if self.full_decode {
            (self.input_tokens..self.input_tokens + self.output_tokens).collect()
        } else if let Some(p) = &self.positions {
            p.clone()
        } else {
            sample_positions(self.input_tokens, self.output_tokens)
        })
    }
}

/// `SAMPLE_POINTS` evenly spaced positions from the first generated token to
/// the last, both included.
pub fn sample_positions(input_tokens: usize, output_tokens: usize) -> Vec<usize> {
    let first = input_tokens;
    let last = input_tokens + output_tokens.max(1) - 1;
    let step = (last - first).div_ceil(SAMPLE_POINTS - 1);
    let mut out: Vec<usize> = (0..SAMPLE_POINTS).map(|k| (first + k * step).min(last)).collect();
    out.dedup();
    out
}

/// Mean of a piecewise-linear function through `points` over their span.
/// `points` must be sorted by position.
pub fn trapezoid(points: &[(usize, f64)]) -> f64 {
    match points {
        [] => 0.0,
        [(_, y)] => *y,
        _ => {
            let span = (points[points.len() - 1].0 - points[0].0) as f64;
            if span == 0.0 {
                return points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
            }
            points
                .windows(2)
                .map(|w| (w[0].1 + w[1].1) / 2.0 * (w[1].0 - w[0].0) as f64)
                .sum::<f64>()
                / span
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionResult {
    pub position: usize,
    /// Slowest device of the ring.
    pub seconds: f64,
    /// Bytes moved by all devices of the ring.
    pub bytes: u64,
    pub sync_exposed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub model: String,
    pub arch: String,
    pub devices: usize,
    pub partition: String,
    pub ms_per_token: f64,
    /// Streamed bytes over peak bandwidth of the ring, averaged over tokens.
    pub utilization: f64,
    pub exposed_sync_us: f64,
    pub bytes_per_token: f64,
    pub positions: Vec<PositionResult>,
}

/// Time the generation block of a compiled model at each position.
pub fn run_compiled(
    model: &str,
    compiled: &Compiled,
    cluster: &ClusterConfig,
    positions: &[usize],
) -> Result<RunResult> {
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::InvalidConfig("no positions to simulate".into()));
    }
    let line = cluster.ring_partition.is_line();
    // rings never share links, and every ring runs the same programs, so
    // one ring stands for all of them
    let per: Vec<PositionResult> = sorted
        .iter()
        .map(|&pos| {
            let reports = simulate_ring(&compiled.chains, &cluster.device, BLOCK_GEN, pos, line, false)?;
            Ok(PositionResult {
                position: pos,
                seconds: reports.iter().map(|r| r.seconds).fold(0.0, f64::max),
                bytes: reports.iter().map(|r| r.bytes).sum(),
                sync_exposed: reports.iter().map(|r| r.sync_exposed).fold(0.0, f64::max),
            })
        })
        .collect::<Result<_>>()?;
    let avg = |f: &dyn Fn(&PositionResult) -> f64| trapezoid(&per.iter().map(|p| (p.position, f(p))).collect::<Vec<_>>());
    let seconds = avg(&|p| p.seconds);
    let bytes = avg(&|p| p.bytes as f64);
    let ring = compiled.chains.len() as f64;
    Ok(RunResult {
        model: model.into(),
        arch: cluster.device.name.clone(),
        devices: cluster.num_devices,
        partition: cluster.ring_partition.label().into(),
        ms_per_token: seconds * 1e3,
        utilization: bytes / (ring * cluster.device.hbm_bandwidth * seconds),
        exposed_sync_us: avg(&|p| p.sync_exposed) * 1e6,
        bytes_per_token: bytes,
        positions: per,
    })
}

/// Compile and time one experiment.
pub fn run(spec: &ExperimentSpec) -> Result<RunResult> {
    let config = presets::model(&spec.model)?;
    let cluster = spec.cluster()?;
    let positions = spec.positions()?;
    if let Some(&p) = positions.iter().find(|&&p| p >= config.max_seq) {
        return Err(Error::IndexOutOfRange(format!(
            "position {p} beyond max_seq {}",
            config.max_seq
        )));
    }
    let compiled = compile_cluster(&config, &cluster)?;
    run_compiled(&spec.model, &compiled, &cluster, &positions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub devices: usize,
    pub partition: String,
    pub ms_per_token: f64,
    /// Relative to the first row.
    pub speedup: f64,
    pub exposed_sync_us: f64,
    pub utilization: f64,
}

/// Run `base` at each device count, in parallel, with speedups relative to
/// the first count.
pub fn sweep(base: &ExperimentSpec, devices: &[usize]) -> Result<Vec<ScalingRow>> {
    let runs = devices
        .par_iter()
        .map(|&n| {
            run(&ExperimentSpec {
                devices: n,
                partition: None,
                ..base.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t0 = runs.first().map(|r| r.ms_per_token).unwrap_or(0.0);
    Ok(runs
        .into_iter()
        .map(|r| ScalingRow {
            devices: r.devices,
            partition: r.partition,
            speedup: t0 / r.ms_per_token,
            ms_per_token: r.ms_per_token,
            exposed_sync_us: r.exposed_sync_us,
            utilization: r.utilization,
        })
        .collect())
}

/// Geometric mean of the speedup per doubling of the device count.
pub fn per_doubling_gain(rows: &[ScalingRow]) -> Option<f64> {
    let (a, b) = (rows.first()?, rows.last()?);
    let doublings = (b.devices as f64 / a.devices as f64).log2();
    (doublings > 0.0).then(|| (b.speedup / a.speedup).powf(1.0 / doublings))
}
