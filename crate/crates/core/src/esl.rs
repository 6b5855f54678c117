//! Synchronization links between devices.
//!
//! Devices of a ring exchange partial results of row-parallel matrix
//! products. Every column set a VMM finishes becomes a small task; tasks are
//! packed into fixed-size packets which are broadcast along the ring in both
//! directions as soon as they are ready, so transfer overlaps the rest of
//! the computation. Links are full duplex, forward cut-through and serve
//! waiting packets first come first served.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::arch::{DeviceConfig, RingPartition};
use crate::error::{Error, Result};

/// Bytes in one link packet.
pub const PACKET_BYTES: u64 = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rings {
    pub partition: RingPartition,
    /// Member device ids of each ring, in link order.
    pub rings: Vec<Vec<usize>>,
}

impl Rings {
    pub fn ring_of(&self, device: usize) -> Option<usize> {
        self.rings.iter().position(|r| r.contains(&device))
    }

    pub fn is_line(&self) -> bool {
        self.partition.is_line()
    }
}

/// Group `n_devices` into the rings of `partition`.
pub fn configure_rings(n_devices: usize, partition: RingPartition) -> Result<Rings> {
    if partition.total_devices() != n_devices {
        return Err(Error::IllegalPartition {
            partition: partition.label().into(),
            devices: n_devices,
        });
    }
    let size = partition.ring_size();
    let rings = (0..partition.ring_count())
        .map(|r| (r * size..(r + 1) * size).collect())
        .collect();
    Ok(Rings { partition, rings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Clockwise,
    CounterClockwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    /// `None` when source and destination coincide.
    pub direction: Option<Direction>,
    pub hops: usize,
}

fn ring_route(src: usize, dst: usize, n: usize, line: bool) -> Route {
    if src == dst {
        return Route { direction: None, hops: 0 };
    }
    if line {
        return if dst > src {
            Route { direction: Some(Direction::Clockwise), hops: dst - src }
        } else {
            Route { direction: Some(Direction::CounterClockwise), hops: src - dst }
        };
    }
    let cw = (dst + n - src) % n;
    // ties go clockwise
    if cw <= n - cw {
        Route { direction: Some(Direction::Clockwise), hops: cw }
    } else {
        Route { direction: Some(Direction::CounterClockwise), hops: n - cw }
    }
}

/// Shortest path between two devices of the same ring.
pub fn route(src: usize, dst: usize, rings: &Rings) -> Result<Route> {
    let (a, b) = (rings.ring_of(src), rings.ring_of(dst));
    match (a, b) {
        (Some(a), Some(b)) if a == b => {
            let ring = &rings.rings[a];
            let pos = |d| ring.iter().position(|&x| x == d).expect("member");
            Ok(ring_route(pos(src), pos(dst), ring.len(), rings.is_line()))
        }
        _ => Err(Error::CrossRing { src, dst }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Bytes/s per direction.
    pub bandwidth: f64,
    /// Seconds per hop.
    pub hop_latency: f64,
    pub packet_bytes: u64,
    /// Sync buffer per device, bytes.
    pub buffer_bytes: u64,
    /// Seconds to merge one received packet into the local partial.
    pub accumulate: f64,
}

impl LinkParams {
    pub fn from_device(d: &DeviceConfig) -> Self {
        // a packet of FP16 values is added at v lanes per cycle
        let lanes_cycles = (PACKET_BYTES / 2).div_ceil(d.vector_dim as u64);
        LinkParams {
            bandwidth: d.link_bandwidth,
            hop_latency: d.link_hop_latency,
            packet_bytes: PACKET_BYTES,
            buffer_bytes: d.sync_buffer_bytes,
            accumulate: lanes_cycles as f64 / d.freq_hz,
        }
    }

    pub fn serialization(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    /// Seconds at which the payload is complete at the sender.
    pub ready: f64,
    pub bytes: u64,
}

/// Pack column tasks (each `task_bytes`, completing at `task_ready`) into
/// packets. A packet leaves when its last task is done.
pub fn pack_tasks(task_ready: &[f64], task_bytes: u64, packet_bytes: u64) -> Vec<Packet> {
    let per = (packet_bytes / task_bytes.max(1)).max(1) as usize;
    task_ready
        .chunks(per)
        .map(|c| Packet {
            ready: c.iter().copied().fold(0.0, f64::max),
            bytes: c.len() as u64 * task_bytes,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncOutcome {
    /// Per member: time the summed vector is complete.
    pub done: Vec<f64>,
    /// Per member: completion beyond `compute_end + window`.
    pub exposed: Vec<f64>,
    /// `delivered[src][dst]` counts packets accumulated by `dst`.
    pub delivered: Vec<Vec<usize>>,
    /// Peak bytes held in each member's sync buffer.
    pub peak_buffer: Vec<u64>,
}

impl SyncOutcome {
    pub fn max_exposed(&self) -> f64 {
        self.exposed.iter().copied().fold(0.0, f64::max)
    }

    pub fn finish(&self) -> f64 {
        self.done.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    src: usize,
    packet: usize,
    dir: Direction,
    node: usize,
    hops_left: usize,
}

fn step(node: usize, dir: Direction, n: usize) -> usize {
    match dir {
        Direction::Clockwise => (node + 1) % n,
        Direction::CounterClockwise => (node + n - 1) % n,
    }
}

/// Every member broadcasts its packets to all others and sums what it
/// receives. Indices are ring positions; `line` removes the wrap link.
/// `window` is compute the consumer can do before it needs the sum.
pub fn sync_timeline(
    sends: &[Vec<Packet>],
    compute_end: &[f64],
    line: bool,
    window: f64,
    link: &LinkParams,
) -> Result<SyncOutcome> {
    let n = sends.len();
    if compute_end.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} senders but {} compute times",
            n,
            compute_end.len()
        )));
    }
    let mut heap = BinaryHeap::new();
    let mut copies = Vec::new();
    for (src, packets) in sends.iter().enumerate() {
        let (cw, ccw) = if line { (n - 1 - src, src) } else { (n / 2, (n - 1) / 2) };
        for (pi, p) in packets.iter().enumerate() {
            for (dir, hops) in [(Direction::Clockwise, cw), (Direction::CounterClockwise, ccw)] {
                if hops > 0 {
                    heap.push(Reverse((p.ready.to_bits(), copies.len())));
                    copies.push(InFlight { src, packet: pi, dir, node: src, hops_left: hops });
                }
            }
        }
    }
    let mut link_free: HashMap<(usize, Direction), f64> = HashMap::new();
    let mut arrivals: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n];
    // (time, +/- bytes) per member
    let mut occupancy: Vec<Vec<(f64, i64)>> = vec![Vec::new(); n];
    while let Some(Reverse((bits, id))) = heap.pop() {
        let t = f64::from_bits(bits);
        let c = copies[id];
        let bytes = sends[c.src][c.packet].bytes;
        let ser = link.serialization(bytes);
        let free = link_free.entry((c.node, c.dir)).or_insert(0.0);
        let start = t.max(*free);
        *free = start + ser;
        occupancy[c.node].push((t, bytes as i64));
        occupancy[c.node].push((start + ser, -(bytes as i64)));
        let next = step(c.node, c.dir, n);
        arrivals[next].push((start + ser + link.hop_latency, c.src));
        if c.hops_left > 1 {
            heap.push(Reverse(((start + link.hop_latency).to_bits(), copies.len())));
            copies.push(InFlight { node: next, hops_left: c.hops_left - 1, ..c });
        }
    }

    let mut done = Vec::with_capacity(n);
    let mut exposed = Vec::with_capacity(n);
    let mut delivered = vec![vec![0usize; n]; n];
    for (dst, arr) in arrivals.iter_mut().enumerate() {
        arr.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut acc = 0.0f64;
        for &(t, src) in arr.iter() {
            acc = acc.max(t) + link.accumulate;
            delivered[src][dst] += 1;
        }
        let d = compute_end[dst].max(acc);
        done.push(d);
        exposed.push((d - compute_end[dst] - window).max(0.0));
    }

    let mut peak_buffer = Vec::with_capacity(n);
    for (dev, ev) in occupancy.iter_mut().enumerate() {
        // releases before acquisitions at equal times
        ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (mut cur, mut peak) = (0i64, 0i64);
        for &(_, d) in ev.iter() {
            cur += d;
            peak = peak.max(cur);
        }
        if peak as u64 > link.buffer_bytes {
            return Err(Error::BufferOverflow {
                device: dev,
                occupancy: peak as u64,
                capacity: link.buffer_bytes,
            });
        }
        peak_buffer.push(peak as u64);
    }
    Ok(SyncOutcome {
        done,
        exposed,
        delivered,
        peak_buffer,
    })
}
