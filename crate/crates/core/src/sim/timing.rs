//! Timing of one pass through a program block.
//!
//! Each chain issues in order. A weight or KV read is simulated together
//! with the VMM consuming it: tiles are requested round-robin over the HBM
//! channels, each channel moves one tile at a time at its share of the
//! sustained bandwidth, and the SXE takes one tile per cycle once the tile
//! has arrived and the VMM's inputs are ready. The SMA keeps enough requests
//! in flight to cover the memory latency plus the OIU queue, and starts a
//! stream only once the SXE has begun the VMM `stream_lookahead` streams
//! earlier. VXE operations take `ceil(n / v)` cycles plus a fixed pipeline
//! cost. Synchronizations are resolved by the caller, which sees every
//! device of a ring reach the same receive.

use std::collections::{BTreeSet, HashMap};

use crate::arch::DeviceConfig;
use crate::compiler::{ChainSet, DepKind};
use crate::error::{Error, Result};
use crate::esl::{pack_tasks, sync_timeline, LinkParams};
use crate::isa::{self, Group, Instruction, Opcode, Operand};
use crate::mapper::{tiled_offset, Region, RegionKind};
use crate::sim::numeric::vxe_cycles;
use crate::sim::report::{EngineStats, SimReport, TraceEvent};
use crate::sim::sampler::sort_cycles;

#[derive(Debug, Clone, Copy)]
struct Params {
    cycle: f64,
    /// Seconds one channel needs for one tile.
    tile_time: f64,
    /// Sustained bytes/s of one channel.
    channel_rate: f64,
    latency: f64,
    window: usize,
    lookahead: usize,
    depth: f64,
    vxe_fixed: u64,
    tile_bytes: u64,
    burst: u64,
    peak_bandwidth: f64,
}

impl Params {
    fn new(d: &DeviceConfig) -> Self {
        let t = &d.timing;
        let channel_rate = d.per_channel_bandwidth() * t.hbm_efficiency;
        let tile_time = d.tile_bytes() as f64 / channel_rate;
        let latency = t.hbm_latency_ns * 1e-9;
        // requests needed to keep every channel busy across one round trip
        let per_tile = tile_time / d.num_channels as f64;
        let window = ((latency + tile_time) / per_tile).ceil() as usize + t.oiu_queue_tiles as usize;
        Params {
            cycle: d.cycle_seconds(),
            tile_time,
            channel_rate,
            latency,
            window: window.max(1),
            lookahead: t.stream_lookahead.max(1) as usize,
            depth: t.sxe_pipeline_depth as f64,
            vxe_fixed: t.vxe_fixed_cycles,
            tile_bytes: d.tile_bytes(),
            burst: d.burst_bytes as u64,
            peak_bandwidth: d.hbm_bandwidth,
        }
    }
}

/// A receive waiting for its peers.
#[derive(Debug, Clone)]
pub struct PendingSync {
    /// Completion times of the column tasks of the local partial.
    pub tasks: Vec<f64>,
    pub task_bytes: u64,
    /// When the local partial is complete.
    pub compute_end: f64,
}

#[derive(Debug)]
pub enum Pause {
    Sync(PendingSync),
    Done,
}

/// Streamed operand of one VMM.
struct Stream {
    tiles: Vec<u64>,
    row_tiles: usize,
    cols: usize,
}

pub struct TimingSim<'a> {
    cs: &'a ChainSet,
    block: usize,
    p: Params,
    position: usize,
    preds: Vec<Vec<(usize, DepKind)>>,
    consumer: HashMap<usize, usize>,
    next: usize,
    start: Vec<f64>,
    end: Vec<f64>,
    done: Vec<bool>,
    mem_free: f64,
    sxe_free: f64,
    vxe_free: f64,
    net_free: f64,
    ctrl_free: f64,
    channel_free: Vec<f64>,
    vmm_starts: Vec<f64>,
    colsets: HashMap<usize, Vec<f64>>,
    lens: HashMap<u32, usize>,
    bytes: u64,
    channel_busy: f64,
    sxe: EngineStats,
    vxe: EngineStats,
    sync_exposed: f64,
    max_live: usize,
    trace: Option<Vec<TraceEvent>>,
}

fn engine(inst: &Instruction) -> &'static str {
    match inst.group() {
        Group::Mem => "mem",
        Group::Comp if inst.opcode.is_sxe() => "sxe",
        Group::Comp => "vxe",
        Group::Net => "net",
        Group::Ctrl => "ctrl",
    }
}

impl<'a> TimingSim<'a> {
    pub fn new(cs: &'a ChainSet, device: &DeviceConfig, block: usize, position: usize) -> Result<Self> {
        let b = cs
            .blocks
            .get(block)
            .ok_or_else(|| Error::UnknownBlock(format!("block {block}")))?;
        let n = b.insts.len();
        let preds = b.predecessors();
        let mut consumer = HashMap::new();
        for d in &b.deps {
            if d.kind == DepKind::Stream {
                consumer.insert(d.producer as usize, d.consumer as usize);
            }
        }
        Ok(TimingSim {
            cs,
            block,
            p: Params::new(device),
            position,
            preds,
            consumer,
            next: 0,
            start: vec![0.0; n],
            end: vec![0.0; n],
            done: vec![false; n],
            mem_free: 0.0,
            sxe_free: 0.0,
            vxe_free: 0.0,
            net_free: 0.0,
            ctrl_free: 0.0,
            channel_free: vec![0.0; device.num_channels as usize],
            vmm_starts: Vec::new(),
            colsets: HashMap::new(),
            lens: HashMap::new(),
            bytes: 0,
            channel_busy: 0.0,
            sxe: EngineStats::default(),
            vxe: EngineStats::default(),
            sync_exposed: 0.0,
            max_live: 0,
            trace: None,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    fn insts(&self) -> &'a [Instruction] {
        &self.cs.blocks[self.block].insts
    }

    /// Latest end time over the non-stream predecessors of `i`, and whether
    /// that predecessor is a receive.
    fn ready(&self, i: usize) -> Result<(f64, bool)> {
        let mut t = 0.0f64;
        let mut sync = false;
        for &(p, kind) in &self.preds[i] {
            if kind == DepKind::Stream {
                continue;
            }
            if !self.done[p] {
                return Err(Error::Deadlock(format!(
                    "instruction {i} of block {} waits on {p}, which never issued",
                    self.block
                )));
            }
            if self.end[p] > t {
                t = self.end[p];
                sync = self.insts()[p].opcode == Opcode::RxPart;
            }
        }
        Ok((t, sync))
    }

    fn finish_inst(&mut self, i: usize, start: f64, end: f64) {
        self.start[i] = start;
        self.end[i] = end;
        self.done[i] = true;
        if let Some(tr) = self.trace.as_mut() {
            let inst = &self.cs.blocks[self.block].insts[i];
            tr.push(TraceEvent {
                cycle: start / self.p.cycle,
                engine: engine(inst),
                inst: inst.to_string(),
            });
        }
    }

    fn region(&self, o: Operand) -> Result<&'a Region> {
        let id = o
            .region()
            .ok_or_else(|| Error::DecodeFault(format!("{o} is not a region")))?;
        self.cs.map.region(id)
    }

    fn len(&self, o: Operand) -> usize {
        o.vreg().and_then(|r| self.lens.get(&r).copied()).unwrap_or(1)
    }

    /// Move `bytes` starting at `addr` over the channels, requested at `t`.
    /// Returns the time the last byte is available.
    fn access(&mut self, addr: u64, bytes: u64, t: f64) -> f64 {
        let map = &self.cs.map;
        let tb = self.p.tile_bytes;
        let mut arrival = t;
        let (mut a, end) = (addr, addr + bytes);
        while a < end {
            let chunk_end = ((a / tb + 1) * tb).min(end);
            let moved = (chunk_end - a).div_ceil(self.p.burst) * self.p.burst;
            let ch = map.channel_of(a) as usize;
            let dur = moved as f64 / self.p.channel_rate;
            let s = t.max(self.channel_free[ch]);
            self.channel_free[ch] = s + dur;
            self.channel_busy += dur;
            self.bytes += moved;
            arrival = arrival.max(s + dur + self.p.latency);
            a = chunk_end;
        }
        arrival
    }

    fn stream_of(&self, rd: &Instruction) -> Result<Stream> {
        let map = &self.cs.map;
        let r = self.region(rd.src0)?;
        let tb = map.tile_bytes();
        match (rd.opcode, &r.kind) {
            (Opcode::RdWeight, RegionKind::Matrix { cols, .. }) => Ok(Stream {
                tiles: map.matrix_stream(r),
                row_tiles: map.grid(r).0,
                cols: *cols,
            }),
            (Opcode::RdKv, RegionKind::KvKey { head_dim, .. }) => {
                let len = self.position + 1;
                let (rt, _) = map.grid(r);
                let base = map.kv_head_base(r, rd.imm as usize);
                let n = rt * len.div_ceil(map.l);
                debug_assert!(*head_dim <= rt * map.v);
                Ok(Stream {
                    tiles: (0..n).map(|t| base + t as u64 * tb).collect(),
                    row_tiles: rt,
                    cols: len,
                })
            }
            (Opcode::RdKv, RegionKind::KvValue { head_dim, .. }) => {
                let len = self.position + 1;
                let (rt_max, ct) = map.grid(r);
                let base = map.kv_head_base(r, rd.imm as usize);
                let rows = len.div_ceil(map.v);
                let mut tiles = Vec::with_capacity(rows * ct);
                for c in 0..ct {
                    for row in 0..rows {
                        tiles.push(base + (c * rt_max + row) as u64 * tb);
                    }
                }
                Ok(Stream {
                    tiles,
                    row_tiles: rows,
                    cols: *head_dim,
                })
            }
            _ => Err(Error::DecodeFault(format!("{rd}: cannot stream {}", r.name))),
        }
    }

    /// Simulate a read stream `rd` together with the VMM `vmm` consuming it.
    fn stream(&mut self, rd: usize, vmm: usize) -> Result<()> {
        let insts = self.insts();
        let s = self.stream_of(&insts[rd])?;
        let cyc = self.p.cycle;
        let (rd_deps, _) = self.ready(rd)?;
        let k = self.vmm_starts.len();
        let gate = if k >= self.p.lookahead { self.vmm_starts[k - self.p.lookahead] } else { 0.0 };
        let rd_ready = self.mem_free.max(rd_deps).max(gate);
        let (vmm_deps, vmm_sync) = self.ready(vmm)?;
        let sxe_prev = self.sxe_free;
        let vmm_ready = sxe_prev.max(vmm_deps);

        let n = s.tiles.len();
        let mut consumed = Vec::with_capacity(n);
        let mut colsets = Vec::with_capacity(n.div_ceil(s.row_tiles.max(1)));
        let mut req = rd_ready;
        let mut first_req = rd_ready;
        let mut last_arrival = rd_ready;
        let mut prev = f64::NEG_INFINITY;
        let (mut open, mut live) = (0usize, 0usize);
        for (k, &addr) in s.tiles.iter().enumerate() {
            if k >= self.p.window {
                // a buffer slot frees when its tile is consumed
                req = req.max(consumed[k - self.p.window]);
            }
            if k == 0 {
                first_req = req;
            }
            let ch = self.cs.map.channel_of(addr) as usize;
            let st = req.max(self.channel_free[ch]);
            self.channel_free[ch] = st + self.p.tile_time;
            let arrival = st + self.p.tile_time + self.p.latency;
            last_arrival = last_arrival.max(arrival);
            let c = arrival.max(prev + cyc).max(vmm_ready);
            consumed.push(c);
            prev = c;
            if k % s.row_tiles == 0 {
                open += 1;
                live = live.max(open);
            }
            if (k + 1) % s.row_tiles == 0 || k + 1 == n {
                open -= 1;
                colsets.push(c + cyc + self.p.depth * cyc);
            }
        }
        self.bytes += n as u64 * self.p.tile_bytes;
        self.channel_busy += n as f64 * self.p.tile_time;
        self.max_live = self.max_live.max(live);
        self.mem_free = req;

        let (v_start, last) = match (consumed.first(), consumed.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => (vmm_ready, vmm_ready - cyc),
        };
        let v_end = last + cyc + self.p.depth * cyc;
        self.sxe_free = last + cyc;
        self.vmm_starts.push(v_start);

        let busy = n as f64;
        let span = (last + cyc - vmm_ready) / cyc;
        self.sxe.busy += busy;
        self.sxe.stall_operand += (span - busy).max(0.0);
        let waited = (vmm_deps - sxe_prev).max(0.0) / cyc;
        if vmm_sync {
            self.sxe.stall_sync += waited;
        } else {
            self.sxe.stall_scoreboard += waited;
        }

        let inst = insts[vmm];
        let (_, out_off) = isa::vmm_offsets(inst.imm);
        if let Some(r) = inst.dst.vreg() {
            let len = out_off + s.cols;
            let e = self.lens.entry(r).or_insert(0);
            *e = if inst.imm & isa::VMM_MERGE != 0 { (*e).max(len) } else { len };
        }
        self.colsets.insert(vmm, colsets);
        self.finish_inst(rd, first_req, last_arrival);
        self.finish_inst(vmm, v_start, v_end);
        Ok(())
    }

    fn rd_vec(&mut self, i: usize, inst: &Instruction) -> Result<()> {
        let (deps, _) = self.ready(i)?;
        let start = self.mem_free.max(deps);
        self.mem_free = start + self.p.cycle;
        let mut end = start + self.p.cycle;
        let len;
        if inst.dst.sreg().is_some() {
            len = 0;
        } else if inst.src0.is_none() {
            len = inst.imm as usize;
        } else {
            let map = &self.cs.map;
            let r = self.region(inst.src0)?;
            match r.kind {
                RegionKind::Vector { len: n, .. } => {
                    len = n;
                    end = self.access(r.base, 2 * n as u64, start);
                }
                RegionKind::Table { rows, cols, .. } => {
                    // the row depends on the token; positions are a fair stand-in
                    let row = (self.position % rows) as u64;
                    len = cols;
                    end = self.access(r.base + 2 * row * cols as u64, 2 * cols as u64, start);
                }
                RegionKind::Matrix { rows, .. } => {
                    let (rt, _) = map.grid(r);
                    let (v, l) = (map.v, map.l);
                    len = rows;
                    for t in 0..rows.div_ceil(v) {
                        let a = r.base + tiled_offset(t * v, 0, rt, v, l);
                        let n = (rows - t * v).min(v) as u64;
                        end = end.max(self.access(a, 2 * n, start));
                    }
                }
                _ => return Err(Error::DecodeFault(format!("{inst}: cannot read a KV region as a vector"))),
            }
        }
        if let Some(r) = inst.dst.vreg() {
            self.lens.insert(r, len);
        }
        self.finish_inst(i, start, end);
        Ok(())
    }

    fn wr_kv(&mut self, i: usize, inst: &Instruction) -> Result<()> {
        let (deps, _) = self.ready(i)?;
        let start = self.mem_free.max(deps);
        self.mem_free = start + self.p.cycle;
        let map = &self.cs.map;
        let r = self.region(inst.dst)?;
        let (heads, hd) = match r.kind {
            RegionKind::KvKey { heads, head_dim, .. } | RegionKind::KvValue { heads, head_dim, .. } => (heads, head_dim),
            _ => return Err(Error::DecodeFault(format!("{inst}: not a KV region"))),
        };
        let mut bursts = BTreeSet::new();
        for h in 0..heads {
            for e in 0..hd {
                bursts.insert(map.kv_element_address(r, h, self.position, e)? / self.p.burst);
            }
        }
        let mut end = start + self.p.cycle;
        for b in bursts {
            end = end.max(self.access(b * self.p.burst, self.p.burst, start));
        }
        self.finish_inst(i, start, end);
        Ok(())
    }

    fn vxe_op(&mut self, i: usize, inst: &Instruction) -> Result<()> {
        let (deps, sync) = self.ready(i)?;
        let n = self.len(inst.src0);
        let v = self.cs.map.v;
        let mut issue = n.div_ceil(v) as u64;
        if inst.opcode == Opcode::Sample {
            issue += sort_cycles(n, v);
        }
        let latency = vxe_cycles(n, v, self.p.vxe_fixed) - n.div_ceil(v) as u64 + issue;
        let prev = self.vxe_free;
        let start = prev.max(deps);
        self.vxe_free = start + issue as f64 * self.p.cycle;
        let waited = (deps - prev).max(0.0) / self.p.cycle;
        if sync {
            self.vxe.stall_sync += waited;
        } else {
            self.vxe.stall_scoreboard += waited;
        }
        self.vxe.busy += issue as f64;
        if let Some(r) = inst.dst.vreg() {
            self.lens.insert(r, n);
        }
        self.finish_inst(i, start, start + latency as f64 * self.p.cycle);
        Ok(())
    }

    fn unit(&mut self, i: usize, group: Group) -> Result<()> {
        let (deps, _) = self.ready(i)?;
        let free = match group {
            Group::Mem => &mut self.mem_free,
            Group::Net => &mut self.net_free,
            _ => &mut self.ctrl_free,
        };
        let start = free.max(deps);
        *free = start + self.p.cycle;
        self.finish_inst(i, start, start + self.p.cycle);
        Ok(())
    }

    /// Partial sum sent by the most recent transmit before `rx`.
    fn pending_sync(&self, rx: usize) -> Result<PendingSync> {
        let insts = self.insts();
        let tx = (0..rx)
            .rev()
            .find(|&j| insts[j].opcode == Opcode::TxPart)
            .ok_or_else(|| Error::Deadlock(format!("receive {rx} has no matching transmit")))?;
        let producer = self.preds[tx]
            .iter()
            .find(|&&(_, k)| k == DepKind::Raw)
            .map(|&(p, _)| p)
            .ok_or_else(|| Error::Deadlock(format!("transmit {tx} sends nothing")))?;
        let l = self.cs.map.l;
        let compute_end = self.end[producer];
        let tasks = match self.colsets.get(&producer) {
            Some(c) => c.clone(),
            None => vec![compute_end; self.len(insts[tx].src0).div_ceil(l)],
        };
        Ok(PendingSync {
            tasks,
            task_bytes: 2 * l as u64,
            compute_end,
        })
    }

    /// Advance until the block ends or a receive needs its peers.
    pub fn run(&mut self) -> Result<Pause> {
        let insts = self.insts();
        while self.next < insts.len() {
            let i = self.next;
            if self.done[i] {
                self.next += 1;
                continue;
            }
            let inst = insts[i];
            match inst.opcode {
                Opcode::RdWeight | Opcode::RdKv => {
                    let c = *self
                        .consumer
                        .get(&i)
                        .ok_or_else(|| Error::Deadlock(format!("stream {i} has no consumer")))?;
                    self.stream(i, c)?;
                }
                Opcode::Vmm | Opcode::VmmAcc => {
                    return Err(Error::Deadlock(format!("matrix product {i} has no operand stream")));
                }
                Opcode::RdVec => self.rd_vec(i, &inst)?,
                Opcode::WrKv => self.wr_kv(i, &inst)?,
                Opcode::WrVec => self.unit(i, Group::Mem)?,
                Opcode::TxPart => self.unit(i, Group::Net)?,
                Opcode::RxPart => return Ok(Pause::Sync(self.pending_sync(i)?)),
                op if op.group() == Group::Comp => self.vxe_op(i, &inst)?,
                _ => self.unit(i, Group::Ctrl)?,
            }
            self.next += 1;
        }
        Ok(Pause::Done)
    }

    /// Complete the receive the simulation is paused at.
    pub fn resolve(&mut self, done: f64, exposed: f64) -> Result<()> {
        let i = self.next;
        let inst = self.insts()[i];
        if inst.opcode != Opcode::RxPart {
            return Err(Error::Deadlock(format!("no receive pending at {i}")));
        }
        let (deps, _) = self.ready(i)?;
        let start = self.net_free.max(deps);
        let end = done.max(start) + self.p.cycle;
        self.net_free = start + self.p.cycle;
        if let Some(r) = inst.dst.vreg() {
            let n = self.len(inst.src0);
            self.lens.insert(r, n);
        }
        self.sync_exposed += exposed;
        self.finish_inst(i, start, end);
        self.next += 1;
        Ok(())
    }

    pub fn report(self) -> SimReport {
        let elapsed = self.end.iter().copied().fold(0.0, f64::max);
        let cycles = elapsed / self.p.cycle;
        let channels = self.channel_free.len() as f64;
        let mut sma = EngineStats {
            busy: self.channel_busy / channels / self.p.cycle,
            ..Default::default()
        };
        sma.close(cycles);
        let (mut sxe, mut vxe) = (self.sxe, self.vxe);
        sxe.close(cycles);
        vxe.close(cycles);
        SimReport {
            device: self.cs.device,
            position: self.position,
            seconds: elapsed,
            cycles,
            bytes: self.bytes,
            utilization: if elapsed > 0.0 {
                self.bytes as f64 / (self.p.peak_bandwidth * elapsed)
            } else {
                0.0
            },
            sma,
            sxe,
            vxe,
            sync_exposed: self.sync_exposed,
            max_live_partial_sets: self.max_live,
            token: None,
            trace: self.trace.unwrap_or_default(),
        }
    }
}

/// Time one pass of `block` on every device of a ring. `line` selects a
/// ring without the wrap-around link.
pub fn simulate_ring(
    chains: &[ChainSet],
    device: &DeviceConfig,
    block: usize,
    position: usize,
    line: bool,
    trace: bool,
) -> Result<Vec<SimReport>> {
    let mut sims = chains
        .iter()
        .map(|cs| {
            let s = TimingSim::new(cs, device, block, position)?;
            Ok(if trace { s.with_trace() } else { s })
        })
        .collect::<Result<Vec<_>>>()?;
    let link = LinkParams::from_device(device);
    loop {
        let pauses = sims.iter_mut().map(|s| s.run()).collect::<Result<Vec<_>>>()?;
        let pending: Vec<&PendingSync> = pauses
            .iter()
            .filter_map(|p| match p {
                Pause::Sync(s) => Some(s),
                Pause::Done => None,
            })
            .collect();
        if pending.is_empty() {
            break;
        }
        if pending.len() != sims.len() {
            return Err(Error::Deadlock(format!(
                "{} of {} devices wait at a synchronization",
                pending.len(),
                sims.len()
            )));
        }
        let sends: Vec<_> = pending
            .iter()
            .map(|p| pack_tasks(&p.tasks, p.task_bytes, link.packet_bytes))
            .collect();
        let ends: Vec<f64> = pending.iter().map(|p| p.compute_end).collect();
        let out = sync_timeline(&sends, &ends, line, 0.0, &link)?;
        for (k, s) in sims.iter_mut().enumerate() {
            s.resolve(out.done[k], out.exposed[k])?;
        }
    }
    Ok(sims.into_iter().map(|s| s.report()).collect())
}

/// Time one generated token at KV `position` on a single device. With a
/// functional device whose cache holds positions `0..position`, the token
/// is computed as well.
pub fn simulate_token(
    cs: &ChainSet,
    device: &DeviceConfig,
    position: usize,
    functional: Option<&mut crate::sim::functional::Device>,
) -> Result<SimReport> {
    if cs.n_devices != 1 {
        return Err(Error::InvalidConfig(format!(
            "program is one of {} devices; time it with simulate_ring",
            cs.n_devices
        )));
    }
    let block = crate::codegen::BLOCK_GEN;
    let mut sim = TimingSim::new(cs, device, block, position)?;
    match sim.run()? {
        Pause::Done => {}
        Pause::Sync(_) => return Err(Error::Deadlock("synchronization on a single device".into())),
    }
    let mut report = sim.report();
    if let Some(dev) = functional {
        dev.set_sreg(isa::sreg::POS, position as u64);
        dev.run_block(block)?;
        report.token = Some(dev.sreg(isa::sreg::TOKEN) as u32);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ClusterConfig;
    use crate::compiler::compile_cluster;
    use crate::presets;

    fn setup(model: &str, n: usize) -> (Vec<ChainSet>, DeviceConfig) {
        let c = presets::model(model).unwrap();
        let cl = ClusterConfig::single_ring(presets::device("hbm3-x4").unwrap(), n).unwrap();
        (compile_cluster(&c, &cl).unwrap().chains, cl.device)
    }

    #[test]
    fn single_device_ring_equals_simulate_token() {
        let (cs, dev) = setup("tiny-2l", 1);
        let a = simulate_token(&cs[0], &dev, 40, None).unwrap();
        let b = simulate_ring(&cs, &dev, crate::codegen::BLOCK_GEN, 40, false, false).unwrap();
        assert_eq!(a, b[0]);
        assert_eq!(a.sync_exposed, 0.0);
    }

    #[test]
    fn deterministic_and_accounted() {
        let (cs, dev) = setup("tiny-llama", 2);
        let a = simulate_ring(&cs, &dev, crate::codegen::BLOCK_GEN, 100, false, true).unwrap();
        let b = simulate_ring(&cs, &dev, crate::codegen::BLOCK_GEN, 100, false, true).unwrap();
        assert_eq!(a, b);
        for r in &a {
            for e in [r.sma, r.sxe, r.vxe] {
                assert!((e.total() - r.cycles).abs() < 1e-6 * r.cycles.max(1.0), "{e:?} vs {}", r.cycles);
            }
            assert_eq!(r.max_live_partial_sets, 1);
            assert!(!r.trace.is_empty());
        }
    }

    #[test]
    fn longer_context_reads_more() {
        let (cs, dev) = setup("tiny-2l", 1);
        let a = simulate_token(&cs[0], &dev, 10, None).unwrap();
        let b = simulate_token(&cs[0], &dev, 200, None).unwrap();
        assert!(b.bytes > a.bytes);
        for r in [a, b] {
            assert!(r.seconds >= r.bytes as f64 / dev.hbm_bandwidth);
            assert!(r.utilization <= 1.0);
        }
    }
}
