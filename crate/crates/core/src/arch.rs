//! Hardware configuration for a single LPU device and for a cluster of
//! devices joined by synchronization-link rings.
//!
//! The compute array is sized to the memory system: `l` MAC trees of `v`
//! lanes each consume `l * v * 2` bytes per cycle, which should match the
//! HBM bandwidth at the chosen core clock.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per FP16 element.
pub const FP16_BYTES: u64 = 2;

/// Microarchitectural timing constants. None of these are fixed by the
/// architecture description; they are exposed so experiments can vary them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingParams {
    /// SXE pipeline depth in cycles (tile in to result out).
    pub sxe_pipeline_depth: u64,
    /// Tiles the OIU can hold ahead of the SXE.
    pub oiu_queue_tiles: u64,
    /// Fixed pipeline cost added to every VXE operation, in cycles.
    pub vxe_fixed_cycles: u64,
    /// Read latency of one HBM access, request to first data.
    pub hbm_latency_ns: f64,
    /// Sustained fraction of peak HBM bandwidth for streaming reads.
    pub hbm_efficiency: f64,
    /// Operand streams the SMA may fetch ahead of the SXE: a stream starts
    /// once the VMM this many streams earlier has begun consuming.
    pub stream_lookahead: u64,
}

impl Default for TimingParams {
    fn default() -> Self {
        Self {
            sxe_pipeline_depth: 8,
            oiu_queue_tiles: 4,
            vxe_fixed_cycles: 16,
            hbm_latency_ns: 100.0,
            hbm_efficiency: 0.92,
            stream_lookahead: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub name: String,
    /// Aggregate HBM bandwidth, bytes/s.
    pub hbm_bandwidth: f64,
    /// HBM capacity, bytes.
    pub hbm_capacity: u64,
    pub num_channels: u32,
    /// Bytes per channel transaction.
    pub burst_bytes: u32,
    pub freq_hz: f64,
    /// Number of MAC trees (`l`).
    pub mac_trees: u32,
    /// Lanes per MAC tree (`v`).
    pub vector_dim: u32,
    pub lmu_banks: u32,
    pub lmu_bytes: u64,
    pub sync_buffer_bytes: u64,
    /// Link bandwidth per direction per port, bytes/s.
    pub link_bandwidth: f64,
    /// Per-hop forwarding latency, seconds.
    pub link_hop_latency: f64,
    #[serde(default)]
    pub timing: TimingParams,
}

/// Vector registers per LMU bank.
pub const VECTOR_REGS_PER_BANK: u32 = 64;
/// Scalar registers per LMU bank.
pub const SCALAR_REGS_PER_BANK: u32 = 64;

impl DeviceConfig {
    pub fn per_channel_bandwidth(&self) -> f64 {
        self.hbm_bandwidth / self.num_channels as f64
    }

    /// Bytes in one `v x l` weight tile.
    pub fn tile_bytes(&self) -> u64 {
        self.vector_dim as u64 * self.mac_trees as u64 * FP16_BYTES
    }

    pub fn sxe_peak_bandwidth(&self) -> f64 {
        sxe_peak_bandwidth(self.mac_trees, self.vector_dim, self.freq_hz)
    }

    pub fn cycle_seconds(&self) -> f64 {
        1.0 / self.freq_hz
    }

    pub fn vector_registers(&self) -> usize {
        (self.lmu_banks * VECTOR_REGS_PER_BANK) as usize
    }

    pub fn scalar_registers(&self) -> usize {
        (self.lmu_banks * SCALAR_REGS_PER_BANK) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{}: {msg}", self.name)));
        if !self.mac_trees.is_power_of_two() || !self.vector_dim.is_power_of_two() {
            return bad("mac_trees and vector_dim must be powers of two".into());
        }
        if !(self.hbm_bandwidth > 0.0 && self.freq_hz > 0.0 && self.link_bandwidth > 0.0) {
            return bad("bandwidths and frequency must be positive".into());
        }
        if self.num_channels == 0 || self.burst_bytes == 0 || self.lmu_banks == 0 {
            return bad("channel count, burst size and bank count must be non-zero".into());
        }
        if !self.tile_bytes().is_multiple_of(self.burst_bytes as u64) {
            return bad(format!(
                "tile size {} is not a multiple of burst size {}",
                self.tile_bytes(),
                self.burst_bytes
            ));
        }
        if self.sxe_peak_bandwidth() < 0.95 * self.hbm_bandwidth {
            return bad(format!(
                "SXE peak {:.3e} B/s starves against HBM {:.3e} B/s",
                self.sxe_peak_bandwidth(),
                self.hbm_bandwidth
            ));
        }
        let t = &self.timing;
        if !(t.hbm_efficiency > 0.0 && t.hbm_efficiency <= 1.0) {
            return bad("hbm_efficiency must lie in (0, 1]".into());
        }
        if t.stream_lookahead == 0 {
            return bad("stream_lookahead must be at least 1".into());
        }
        if t.hbm_latency_ns < 0.0 || self.link_hop_latency < 0.0 {
            return bad("latencies must be non-negative".into());
        }
        Ok(())
    }
}

/// Number of MAC trees that best matches a memory bandwidth: the power of two
/// nearest to `bw / (v * 2 * freq)` on a log scale, ties rounding up.
pub fn derive_mac_trees(hbm_bandwidth: f64, vector_dim: u32, freq_hz: f64) -> u32 {
    let ideal = hbm_bandwidth / (vector_dim as f64 * FP16_BYTES as f64 * freq_hz);
    let exp = ideal.log2();
    // round half up
    let rounded = (exp + 0.5).floor().max(0.0);
    1u32 << (rounded as u32)
}

/// Peak operand bandwidth of the SXE: `l * v * 2 B * freq`.
pub fn sxe_peak_bandwidth(mac_trees: u32, vector_dim: u32, freq_hz: f64) -> f64 {
    mac_trees as f64 * vector_dim as f64 * FP16_BYTES as f64 * freq_hz
}

/// How a cluster's devices are grouped into synchronization rings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RingPartition {
    /// One ring over 8 devices.
    #[serde(rename = "1x8")]
    OneRing8,
    /// Two independent 4-device lines.
    #[serde(rename = "2x4")]
    TwoLines4,
    /// Four independent 2-device lines.
    #[serde(rename = "4x2")]
    FourLines2,
    /// One ring over 4 devices.
    #[serde(rename = "1x4")]
    OneRing4,
    /// One ring over 2 devices.
    #[serde(rename = "1x2")]
    OneRing2,
    #[serde(rename = "1x1")]
    Single,
}

impl RingPartition {
    pub const ALL: [RingPartition; 6] = [
        RingPartition::OneRing8,
        RingPartition::TwoLines4,
        RingPartition::FourLines2,
        RingPartition::OneRing4,
        RingPartition::OneRing2,
        RingPartition::Single,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RingPartition::OneRing8 => "1x8",
            RingPartition::TwoLines4 => "2x4",
            RingPartition::FourLines2 => "4x2",
            RingPartition::OneRing4 => "1x4",
            RingPartition::OneRing2 => "1x2",
            RingPartition::Single => "1x1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::Parse(format!("unknown partition `{s}`")))
    }

    /// Devices the partition spans.
    pub fn total_devices(self) -> usize {
        self.ring_count() * self.ring_size()
    }

    pub fn ring_count(self) -> usize {
        match self {
            RingPartition::TwoLines4 => 2,
            RingPartition::FourLines2 => 4,
            _ => 1,
        }
    }

    pub fn ring_size(self) -> usize {
        match self {
            RingPartition::OneRing8 => 8,
            RingPartition::TwoLines4 | RingPartition::OneRing4 => 4,
            RingPartition::FourLines2 | RingPartition::OneRing2 => 2,
            RingPartition::Single => 1,
        }
    }

    /// Lines have no wrap-around link between their end devices.
    pub fn is_line(self) -> bool {
        matches!(self, RingPartition::TwoLines4 | RingPartition::FourLines2)
    }

    /// Default single-ring partition for a device count.
    pub fn single_ring(n_devices: usize) -> Result<Self> {
        match n_devices {
            1 => Ok(RingPartition::Single),
            2 => Ok(RingPartition::OneRing2),
            4 => Ok(RingPartition::OneRing4),
            8 => Ok(RingPartition::OneRing8),
            n => Err(Error::InvalidDeviceCount(n)),
        }
    }
}

impl std::fmt::Display for RingPartition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Homogeneous device description shared by every member.
    pub device: DeviceConfig,
    pub num_devices: usize,
    pub ring_partition: RingPartition,
}

impl ClusterConfig {
    pub fn new(device: DeviceConfig, num_devices: usize, ring_partition: RingPartition) -> Result<Self> {
        let c = Self {
            device,
            num_devices,
            ring_partition,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn single_ring(device: DeviceConfig, num_devices: usize) -> Result<Self> {
        Self::new(device, num_devices, RingPartition::single_ring(num_devices)?)
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.num_devices) {
            return Err(Error::InvalidDeviceCount(self.num_devices));
        }
        if self.ring_partition.total_devices() != self.num_devices {
            return Err(Error::IllegalPartition {
                partition: self.ring_partition.label().into(),
                devices: self.num_devices,
            });
        }
        self.device.validate()
    }

    /// Devices cooperating on one model instance.
    pub fn devices_per_ring(&self) -> usize {
        self.ring_partition.ring_size()
    }

    pub fn total_capacity(&self) -> u64 {
        self.device.hbm_capacity * self.num_devices as u64
    }
}

/// Check that a model plus its KV cache fits the cluster, assuming an even
/// split across devices.
pub fn validate_fit(model_bytes: u64, kv_bytes: u64, cluster: &ClusterConfig) -> Result<()> {
    let total = model_bytes + kv_bytes;
    let n = cluster.num_devices as u64;
    let capacity = cluster.total_capacity();
    if total > capacity {
        return Err(Error::CapacityExceeded {
            deficit: total - capacity,
        });
    }
    let share = total.div_ceil(n);
    if share > cluster.device.hbm_capacity {
        return Err(Error::CapacityExceeded {
            deficit: (share - cluster.device.hbm_capacity) * n,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_tree_points() {
        assert_eq!(derive_mac_trees(819e9, 64, 1e9), 8);
        assert_eq!(derive_mac_trees(1.64e12, 64, 1e9), 16);
        assert_eq!(derive_mac_trees(3.28e12, 64, 1e9), 32);
        assert_eq!(derive_mac_trees(460e9, 64, 220e6), 16);
    }

    #[test]
    fn mac_tree_ties_round_up() {
        // ratio sqrt(2) * 4 sits exactly between 4 and 8 on a log scale
        let bw = 128e9 * 4.0 * 2f64.sqrt();
        assert_eq!(derive_mac_trees(bw, 64, 1e9), 8);
        assert_eq!(derive_mac_trees(1.0, 64, 1e9), 1);
    }

    #[test]
    fn sxe_peak_examples() {
        assert_eq!(sxe_peak_bandwidth(16, 64, 220e6), 450.56e9);
        assert_eq!(sxe_peak_bandwidth(1, 1, 1.0), 2.0);
        assert_eq!(sxe_peak_bandwidth(32, 64, 1e9), 4.096e12);
    }

    #[test]
    fn partition_labels_round_trip() {
        for p in RingPartition::ALL {
            assert_eq!(RingPartition::parse(p.label()).unwrap(), p);
        }
        assert!(RingPartition::parse("3x3").is_err());
    }
}
