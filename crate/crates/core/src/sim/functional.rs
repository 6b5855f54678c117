//! Functional execution of compiled programs.
//!
//! Each device owns a byte image of its memory, laid out by the mapper, so
//! weight and KV accesses go through the same addresses the timing model
//! streams. Devices of a cluster run in lockstep and exchange partial sums
//! through per-source FIFO mailboxes.
//!
//! Within a block, instructions run either in program order or in a random
//! order that respects chain order and dependency edges.

use std::collections::{HashMap, VecDeque};

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compiler::ChainSet;
use crate::error::{Error, Result};
use crate::isa::{self, sreg, Cond, Group, Instruction, Opcode, Operand};
use crate::mapper::{read_f16, tiled_offset, write_f16, MemoryMap, RegionKind};
use crate::model::ParamStore;
use crate::sim::numeric::{self, tree_sum, VxeOp};
use crate::sim::sampler::{self, SamplingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Sequential,
    /// Random legal interleaving of the chains, seeded.
    Random(u64),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub sampling: SamplingParams,
    pub schedule: Schedule,
    /// Keep the logits of every generated token.
    pub record_logits: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            sampling: SamplingParams::greedy(),
            schedule: Schedule::Sequential,
            record_logits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub tokens: Vec<u32>,
    /// A NaN was produced somewhere during the run.
    pub nan_seen: bool,
    pub logits: Vec<Vec<f16>>,
}

/// Partial-sum exchange between devices.
#[derive(Debug, Default)]
pub struct Mailbox {
    queues: HashMap<(usize, usize), VecDeque<Vec<f16>>>,
}

impl Mailbox {
    pub fn send(&mut self, from: usize, to: usize, data: Vec<f16>) {
        self.queues.entry((to, from)).or_default().push_back(data);
    }

    fn ready(&self, at: usize, from: usize) -> bool {
        self.queues.get(&(at, from)).is_some_and(|q| !q.is_empty())
    }

    fn take(&mut self, at: usize, from: usize) -> Option<Vec<f16>> {
        self.queues.get_mut(&(at, from)).and_then(|q| q.pop_front())
    }

    pub fn is_empty(&self) -> bool {
        self.queues.values().all(|q| q.is_empty())
    }
}

#[derive(Debug, Clone, Copy)]
struct Stream {
    region: u16,
    head: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exec {
    Done,
    Blocked,
    Branch(usize),
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Advanced,
    Blocked,
    Halted,
}

struct Cursor {
    block: usize,
    done: Vec<bool>,
    chains: [Vec<usize>; 4],
    heads: [usize; 4],
    preds: Vec<Vec<usize>>,
    remaining: usize,
    branch: Option<usize>,
    halt: bool,
}

/// One device's architectural state.
pub struct Device<'a> {
    cs: &'a ChainSet,
    image: Vec<u8>,
    vregs: HashMap<u32, Vec<f16>>,
    sregs: Vec<u64>,
    streams: HashMap<u16, VecDeque<Stream>>,
    input: Vec<u32>,
    sampling: SamplingParams,
    rng: Option<ChaCha8Rng>,
    cursor: Option<Cursor>,
    halted: bool,
    record_logits: bool,
    pub outputs: Vec<u32>,
    pub logits: Vec<Vec<f16>>,
    pub nan_seen: bool,
}

impl<'a> Device<'a> {
    pub fn new(cs: &'a ChainSet, params: &ParamStore, opts: &RunOptions) -> Result<Self> {
        Ok(Device {
            cs,
            image: cs.map.load_image(params)?,
            vregs: HashMap::new(),
            sregs: vec![0; isa::OPERAND_INDEX_MAX as usize + 1],
            streams: HashMap::new(),
            input: Vec::new(),
            sampling: opts.sampling,
            rng: match opts.schedule {
                Schedule::Sequential => None,
                Schedule::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed ^ (cs.device as u64) << 32)),
            },
            cursor: None,
            halted: false,
            record_logits: opts.record_logits,
            outputs: Vec::new(),
            logits: Vec::new(),
            nan_seen: false,
        })
    }

    fn map(&self) -> &'a MemoryMap {
        &self.cs.map
    }

    /// Load the prompt and generation length and restart at the entry block.
    pub fn start(&mut self, input: &[u32], n_out: usize) -> Result<()> {
        if input.is_empty() || n_out == 0 {
            return Err(Error::InvalidConfig("need at least one input and one output token".into()));
        }
        self.input = input.to_vec();
        self.sregs[sreg::N_IN as usize] = input.len() as u64;
        self.sregs[sreg::N_OUT as usize] = n_out as u64;
        self.outputs.clear();
        self.halted = false;
        self.enter(0);
        Ok(())
    }

    pub fn sreg(&self, r: u32) -> u64 {
        self.sregs[r as usize]
    }

    pub fn set_sreg(&mut self, r: u32, x: u64) {
        self.sregs[r as usize] = x;
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    /// Begin executing block `b`.
    pub fn enter(&mut self, b: usize) {
        let Some(block) = self.cs.blocks.get(b) else {
            self.halted = true;
            self.cursor = None;
            return;
        };
        let chains = Group::ALL.map(|g| block.chain(g));
        let mut preds = vec![Vec::new(); block.insts.len()];
        for d in &block.deps {
            preds[d.consumer as usize].push(d.producer as usize);
        }
        self.cursor = Some(Cursor {
            block: b,
            done: vec![false; block.insts.len()],
            chains,
            heads: [0; 4],
            preds,
            remaining: block.insts.len(),
            branch: None,
            halt: false,
        });
    }

    pub fn current_block(&self) -> Option<usize> {
        self.cursor.as_ref().map(|c| c.block)
    }

    /// Execute one instruction (or finish the current block).
    pub fn step(&mut self, net: &mut Mailbox) -> Result<Progress> {
        if self.halted {
            return Ok(Progress::Halted);
        }
        let Some(cur) = self.cursor.as_mut() else {
            self.halted = true;
            return Ok(Progress::Halted);
        };
        if cur.remaining == 0 {
            let (b, branch, halt) = (cur.block, cur.branch, cur.halt);
            if halt {
                self.halted = true;
                self.cursor = None;
                return Ok(Progress::Halted);
            }
            self.enter(branch.unwrap_or(b + 1));
            return Ok(Progress::Advanced);
        }
        // chain heads whose producers have completed
        let ready: Vec<usize> = (0..4)
            .filter_map(|g| cur.chains[g].get(cur.heads[g]).copied())
            .filter(|&i| cur.preds[i].iter().all(|&p| cur.done[p]))
            .collect();
        let pick = match (&mut self.rng, ready.len()) {
            (_, 0) => {
                return Err(Error::Deadlock(format!(
                    "block {} has no ready instruction",
                    self.cs.blocks[cur.block].name
                )))
            }
            (None, _) => *ready.iter().min().unwrap(),
            (Some(rng), n) => ready[rng.gen_range(0..n)],
        };
        let block = cur.block;
        let inst = self.cs.blocks[block].insts[pick];
        let skip = cur.branch.is_some() && inst.group() == Group::Ctrl;
        let result = if skip { Exec::Done } else { self.exec(&inst, net)? };
        let cur = self.cursor.as_mut().expect("cursor");
        match result {
            Exec::Blocked => return Ok(Progress::Blocked),
            Exec::Branch(t) => cur.branch = Some(t),
            Exec::Halt => cur.halt = true,
            Exec::Done => {}
        }
        cur.done[pick] = true;
        cur.remaining -= 1;
        cur.heads[inst.group() as usize] += 1;
        Ok(Progress::Advanced)
    }

    /// Run block `b` to completion with no peers. Returns the next block.
    pub fn run_block(&mut self, b: usize) -> Result<Option<usize>> {
        let mut net = Mailbox::default();
        self.enter(b);
        loop {
            let cur = self.cursor.as_ref().expect("cursor");
            if cur.remaining == 0 {
                let next = if cur.halt { None } else { Some(cur.branch.unwrap_or(b + 1)) };
                return Ok(next);
            }
            if self.step(&mut net)? == Progress::Blocked {
                return Err(Error::Deadlock("receive without peers".into()));
            }
        }
    }

    fn v(&self, o: Operand) -> Result<&Vec<f16>> {
        let r = o.vreg().ok_or_else(|| Error::DecodeFault(format!("{o} is not a vector register")))?;
        self.vregs
            .get(&r)
            .ok_or_else(|| Error::DecodeFault(format!("read of undefined register v{r}")))
    }

    fn s(&self, o: Operand) -> Result<u64> {
        let r = o.sreg().ok_or_else(|| Error::DecodeFault(format!("{o} is not a scalar register")))?;
        Ok(self.sregs[r as usize])
    }

    fn set_v(&mut self, o: Operand, x: Vec<f16>) {
        if x.iter().any(|v| v.is_nan()) {
            self.nan_seen = true;
        }
        self.vregs.insert(o.vreg().expect("vector destination"), x);
    }

    fn set_s(&mut self, o: Operand, x: u64) {
        self.sregs[o.sreg().expect("scalar destination") as usize] = x;
    }

    fn region(&self, o: Operand) -> Result<&'a crate::mapper::Region> {
        let id = o.region().ok_or_else(|| Error::DecodeFault(format!("{o} is not a region")))?;
        self.map().region(id)
    }

    fn vxe(&mut self, inst: &Instruction, op: VxeOp) -> Result<()> {
        let a = self.v(inst.src0)?;
        let b = match inst.src1 {
            Operand::VReg(_) => Some(self.v(inst.src1)?.as_slice()),
            _ => None,
        };
        if let Some(b) = b {
            let need = if op == VxeOp::LayerNorm { 2 * a.len() } else { a.len() };
            if b.len() < need {
                return Err(Error::DecodeFault(format!("{inst}: operand lengths {} and {}", a.len(), b.len())));
            }
        }
        let out = numeric::vxe_exec(op, a, b);
        self.set_v(inst.dst, out);
        Ok(())
    }

    fn exec(&mut self, inst: &Instruction, net: &mut Mailbox) -> Result<Exec> {
        use Opcode::*;
        let pos = self.sregs[sreg::POS as usize] as usize;
        match inst.opcode {
            RdWeight => {
                let r = self.region(inst.src0)?;
                self.streams.entry(inst.tag).or_default().push_back(Stream {
                    region: r.id,
                    head: 0,
                    len: 0,
                });
            }
            RdKv => {
                let r = self.region(inst.src0)?;
                let len = self.s(inst.src1)? as usize + 1;
                self.streams.entry(inst.tag).or_default().push_back(Stream {
                    region: r.id,
                    head: inst.imm as usize,
                    len,
                });
            }
            WrKv => {
                let r = self.region(inst.dst)?;
                let at = self.s(inst.src1)? as usize;
                let x = self.v(inst.src0)?.clone();
                let (heads, hd) = match r.kind {
                    RegionKind::KvKey { heads, head_dim, .. } | RegionKind::KvValue { heads, head_dim, .. } => (heads, head_dim),
                    _ => return Err(Error::DecodeFault(format!("{inst}: not a KV region"))),
                };
                if x.len() < heads * hd {
                    return Err(Error::DecodeFault(format!("{inst}: {} values for {heads} heads", x.len())));
                }
                for h in 0..heads {
                    for e in 0..hd {
                        let addr = self.map().kv_element_address(r, h, at, e)?;
                        write_f16(&mut self.image, addr, x[h * hd + e]);
                    }
                }
            }
            RdVec => self.rd_vec(inst)?,
            WrVec => {
                let t = self.s(inst.src0)?;
                self.outputs.push(t as u32);
            }
            Vmm | VmmAcc => self.vmm(inst)?,
            Softmax => {
                let scale = 1.0 / (inst.imm.max(1) as f32).sqrt();
                self.vxe(inst, VxeOp::Softmax { scale })?;
            }
            LayerNorm => self.vxe(inst, VxeOp::LayerNorm)?,
            RmsNorm => self.vxe(inst, VxeOp::RmsNorm)?,
            Add => self.vxe(inst, VxeOp::Add)?,
            Mul => self.vxe(inst, VxeOp::Mul)?,
            Gelu => self.vxe(inst, VxeOp::Gelu)?,
            Relu => self.vxe(inst, VxeOp::Relu)?,
            Silu => self.vxe(inst, VxeOp::Silu)?,
            Rope => {
                let position = self.s(inst.src1)? as usize;
                let out = numeric::rope(self.v(inst.src0)?, position, inst.imm as usize);
                self.set_v(inst.dst, out);
            }
            Embed => self.vxe(inst, VxeOp::Embed)?,
            Sample => {
                let logits = self.v(inst.src0)?;
                let tok = sampler::sample(logits, &self.sampling, pos)?;
                if self.record_logits {
                    self.logits.push(logits.clone());
                }
                self.set_s(inst.dst, tok as u64);
                self.sregs[sreg::EOS as usize] = (self.sampling.eos_token == Some(tok)) as u64;
            }
            TxPart => {
                let x = self.v(inst.src0)?.clone();
                for to in 0..self.cs.n_devices {
                    if to != self.cs.device {
                        net.send(self.cs.device, to, x.clone());
                    }
                }
            }
            RxPart => {
                let me = self.cs.device;
                let n = self.cs.n_devices;
                if !(0..n).all(|src| src == me || net.ready(me, src)) {
                    return Ok(Exec::Blocked);
                }
                let own = self.v(inst.src0)?.clone();
                let mut acc = vec![0f32; own.len()];
                for src in 0..n {
                    let part = if src == me { own.clone() } else { net.take(me, src).expect("checked ready") };
                    if part.len() != acc.len() {
                        return Err(Error::DecodeFault(format!("partial of {} values from device {src}", part.len())));
                    }
                    for (a, p) in acc.iter_mut().zip(&part) {
                        *a += p.to_f32();
                    }
                }
                self.set_v(inst.dst, acc.into_iter().map(f16::from_f32).collect());
            }
            Br => {
                let (target, cond) = isa::br_fields(inst.imm)?;
                let a = self.s(inst.src0)?;
                let taken = match cond {
                    Cond::Lt => a < self.s(inst.src1)?,
                    Cond::Ge => a >= self.s(inst.src1)?,
                    Cond::Nz => a != 0,
                };
                if taken {
                    return Ok(Exec::Branch(target));
                }
            }
            Jmp => return Ok(Exec::Branch(inst.imm as usize)),
            Addi => {
                let a = self.s(inst.src0)? as i64;
                self.set_s(inst.dst, a.wrapping_add(isa::imm_signed(inst.imm)) as u64);
            }
            Movs => self.set_s(inst.dst, inst.imm),
            Hlt => return Ok(Exec::Halt),
        }
        Ok(Exec::Done)
    }

    fn rd_vec(&mut self, inst: &Instruction) -> Result<()> {
        if let Operand::SReg(_) = inst.dst {
            let i = self.s(inst.src1)? as usize;
            let t = *self
                .input
                .get(i)
                .ok_or_else(|| Error::IndexOutOfRange(format!("input token {i}")))?;
            self.set_s(inst.dst, t as u64);
            return Ok(());
        }
        if inst.src0.is_none() {
            self.set_v(inst.dst, vec![f16::ZERO; inst.imm as usize]);
            return Ok(());
        }
        let m = self.map();
        let r = self.region(inst.src0)?;
        let out: Vec<f16> = match r.kind {
            RegionKind::Vector { len, .. } => (0..len).map(|i| read_f16(&self.image, r.base + 2 * i as u64)).collect(),
            RegionKind::Table { rows, cols, .. } => {
                let row = self.s(inst.src1)? as usize;
                if row >= rows {
                    return Err(Error::IndexOutOfRange(format!("row {row} of {}", r.name)));
                }
                (0..cols)
                    .map(|c| read_f16(&self.image, r.base + 2 * (row * cols + c) as u64))
                    .collect()
            }
            RegionKind::Matrix { rows, cols, .. } => {
                let col = self.s(inst.src1)? as usize;
                if col >= cols {
                    return Err(Error::IndexOutOfRange(format!("column {col} of {}", r.name)));
                }
                let (rt, _) = m.grid(r);
                (0..rows)
                    .map(|row| read_f16(&self.image, r.base + tiled_offset(row, col, rt, m.v, m.l)))
                    .collect()
            }
            _ => return Err(Error::DecodeFault(format!("{inst}: cannot read a KV region as a vector"))),
        };
        self.set_v(inst.dst, out);
        Ok(())
    }

    fn vmm(&mut self, inst: &Instruction) -> Result<()> {
        let m = self.map();
        let stream = self
            .streams
            .get_mut(&inst.tag)
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::DecodeFault(format!("{inst}: no operand stream with tag {}", inst.tag)))?;
        let r = m.region(stream.region)?;
        let (rt_total, _) = m.grid(r);
        let (base, rows, cols) = match r.kind {
            RegionKind::Matrix { rows, cols, .. } => (r.base, rows, cols),
            RegionKind::KvKey { head_dim, .. } => (m.kv_head_base(r, stream.head), head_dim, stream.len),
            RegionKind::KvValue { head_dim, .. } => (m.kv_head_base(r, stream.head), stream.len, head_dim),
            _ => return Err(Error::DecodeFault(format!("{inst}: stream over non-matrix region"))),
        };
        let (in_off, out_off) = isa::vmm_offsets(inst.imm);
        let x = self.v(inst.src0)?;
        if x.len() < in_off + rows {
            return Err(Error::DecodeFault(format!(
                "{inst}: input of {} values, need {}",
                x.len(),
                in_off + rows
            )));
        }
        let x = &x[in_off..in_off + rows];
        let (v, l) = (m.v, m.l);
        let mut acc = vec![0f32; cols];
        let mut lanes = vec![0f32; v];
        for ct in 0..cols.div_ceil(l) {
            for rt in 0..rows.div_ceil(v) {
                let tile = base + ((ct * rt_total + rt) * v * l) as u64 * 2;
                for j in 0..l.min(cols - ct * l) {
                    for (i, lane) in lanes.iter_mut().enumerate() {
                        let row = rt * v + i;
                        *lane = if row < rows {
                            x[row].to_f32() * read_f16(&self.image, tile + ((j * v + i) * 2) as u64).to_f32()
                        } else {
                            0.0
                        };
                    }
                    acc[ct * l + j] += tree_sum(&mut lanes);
                }
            }
        }
        if inst.opcode == Opcode::VmmAcc {
            let b = self.v(inst.src1)?;
            if b.len() < cols {
                return Err(Error::DecodeFault(format!("{inst}: bias of {} values", b.len())));
            }
            for (a, b) in acc.iter_mut().zip(b) {
                *a += b.to_f32();
            }
        }
        let merge = inst.imm & isa::VMM_MERGE != 0;
        let mut out = if merge {
            self.v(inst.dst).cloned().unwrap_or_default()
        } else {
            Vec::new()
        };
        if out.len() < out_off + cols {
            out.resize(out_off + cols, f16::ZERO);
        }
        for (c, a) in acc.into_iter().enumerate() {
            out[out_off + c] = f16::from_f32(a);
        }
        self.set_v(inst.dst, out);
        Ok(())
    }
}

/// Run a cluster of device programs to completion in lockstep.
pub fn interpret_cluster(
    chains: &[ChainSet],
    params: &ParamStore,
    input: &[u32],
    n_out: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    opts.sampling.validate()?;
    let mut devices = chains
        .iter()
        .map(|cs| Device::new(cs, params, opts))
        .collect::<Result<Vec<_>>>()?;
    for d in &mut devices {
        d.start(input, n_out)?;
    }
    let mut net = Mailbox::default();
    loop {
        let mut advanced = false;
        let mut all_halted = true;
        for d in &mut devices {
            // run each device until it blocks or halts
            loop {
                match d.step(&mut net)? {
                    Progress::Advanced => advanced = true,
                    Progress::Blocked => {
                        all_halted = false;
                        break;
                    }
                    Progress::Halted => break,
                }
            }
        }
        if all_halted {
            break;
        }
        if !advanced {
            return Err(Error::Deadlock("no device can make progress".into()));
        }
    }
    let first = &devices[0];
    for d in &devices[1..] {
        if d.outputs != first.outputs || d.logits != first.logits {
            return Err(Error::DecodeFault(format!(
                "device {} diverged from device 0",
                d.cs.device
            )));
        }
    }
    Ok(RunOutput {
        tokens: first.outputs.clone(),
        nan_seen: devices.iter().any(|d| d.nan_seen),
        logits: first.logits.clone(),
    })
}

/// Run a single-device program.
pub fn interpret(
    chains: &ChainSet,
    params: &ParamStore,
    input: &[u32],
    n_out: usize,
    opts: &RunOptions,
) -> Result<RunOutput> {
    interpret_cluster(std::slice::from_ref(chains), params, input, n_out, opts)
}
