//! Splitting a program into per-group instruction chains linked by
//! dependency edges.

use std::collections::{HashMap, VecDeque};

use crate::codegen::Program;
use crate::error::{Error, Result};
use crate::isa::{Group, Instruction, Operand};
use crate::mapper::MemoryMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DepKind {
    /// Consumer reads a value the producer writes.
    Raw = 0,
    /// Consumer overwrites a register the producer reads.
    War = 1,
    /// Consumer overwrites a register the producer writes.
    Waw = 2,
    /// Consumer takes the operand stream the producer issues.
    Stream = 3,
}

impl DepKind {
    pub fn from_code(c: u8) -> Option<DepKind> {
        match c {
            0 => Some(DepKind::Raw),
            1 => Some(DepKind::War),
            2 => Some(DepKind::Waw),
            3 => Some(DepKind::Stream),
            _ => None,
        }
    }
}

/// `consumer` may not proceed before `producer` (program-order indices
/// within one block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dep {
    pub consumer: u32,
    pub producer: u32,
    pub kind: DepKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainedBlock {
    pub name: String,
    /// Instructions in program order; each belongs to the chain of its group.
    pub insts: Vec<Instruction>,
    pub deps: Vec<Dep>,
}

impl ChainedBlock {
    /// Program-order indices of one chain.
    pub fn chain(&self, group: Group) -> Vec<usize> {
        (0..self.insts.len())
            .filter(|&i| self.insts[i].group() == group)
            .collect()
    }

    /// Producers each instruction waits for.
    pub fn predecessors(&self) -> Vec<Vec<(usize, DepKind)>> {
        let mut out = vec![Vec::new(); self.insts.len()];
        for d in &self.deps {
            out[d.consumer as usize].push((d.producer as usize, d.kind));
        }
        out
    }

    /// Check that chain order plus dependency edges admit a schedule.
    pub fn check_acyclic(&self) -> Result<()> {
        let n = self.insts.len();
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut indeg = vec![0usize; n];
        for g in Group::ALL {
            let c = self.chain(g);
            for w in c.windows(2) {
                succ[w[0]].push(w[1]);
                indeg[w[1]] += 1;
            }
        }
        for d in &self.deps {
            let (p, c) = (d.producer as usize, d.consumer as usize);
            if p >= n || c >= n {
                return Err(Error::MalformedBinary(format!("dependency {p}->{c} out of range")));
            }
            succ[p].push(c);
            indeg[c] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &s in &succ[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if seen == n {
            Ok(())
        } else {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            Err(Error::CyclicDependency(stuck))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSet {
    pub device: usize,
    pub n_devices: usize,
    pub map: MemoryMap,
    pub blocks: Vec<ChainedBlock>,
}

impl ChainSet {
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    /// Instruction count per chain, in `Group::ALL` order.
    pub fn chain_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for i in self.instructions() {
            c[i.group() as usize] += 1;
        }
        c
    }

    pub fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }
}

fn reg_key(o: Operand) -> Option<(u8, u32)> {
    match o {
        Operand::VReg(r) => Some((0, r)),
        Operand::SReg(r) => Some((1, r)),
        _ => None,
    }
}

/// Dependency edges of a straight-line block.
pub fn block_deps(insts: &[Instruction]) -> Vec<Dep> {
    let mut deps = Vec::new();
    let mut last_write: HashMap<(u8, u32), usize> = HashMap::new();
    let mut readers: HashMap<(u8, u32), Vec<usize>> = HashMap::new();
    let mut open_streams: HashMap<u16, VecDeque<usize>> = HashMap::new();
    let push = |deps: &mut Vec<Dep>, c: usize, p: usize, kind| {
        let d = Dep {
            consumer: c as u32,
            producer: p as u32,
            kind,
        };
        if !deps.contains(&d) {
            deps.push(d);
        }
    };
    for (i, inst) in insts.iter().enumerate() {
        let mut local = Vec::new();
        if inst.opcode.consumes_stream() {
            if let Some(p) = open_streams.get_mut(&inst.tag).and_then(|q| q.pop_front()) {
                push(&mut local, i, p, DepKind::Stream);
            }
        }
        let uses: Vec<_> = inst.uses().into_iter().filter_map(reg_key).collect();
        let defs: Vec<_> = inst.defs().into_iter().filter_map(reg_key).collect();
        for u in &uses {
            if let Some(&w) = last_write.get(u) {
                push(&mut local, i, w, DepKind::Raw);
            }
        }
        for d in &defs {
            if let Some(&w) = last_write.get(d) {
                push(&mut local, i, w, DepKind::Waw);
            }
            for &r in readers.get(d).map(Vec::as_slice).unwrap_or(&[]) {
                if r != i {
                    push(&mut local, i, r, DepKind::War);
                }
            }
        }
        for u in uses {
            readers.entry(u).or_default().push(i);
        }
        for d in defs {
            last_write.insert(d, i);
            readers.remove(&d);
        }
        if inst.opcode.produces_stream() {
            open_streams.entry(inst.tag).or_default().push_back(i);
        }
        deps.extend(local);
    }
    deps
}

/// Split a register-allocated program into chains.
pub fn chain_instructions(program: &Program) -> Result<ChainSet> {
    let blocks = program
        .blocks
        .iter()
        .map(|b| {
            let cb = ChainedBlock {
                name: b.name.clone(),
                insts: b.insts.clone(),
                deps: block_deps(&b.insts),
            };
            cb.check_acyclic()?;
            Ok(cb)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainSet {
        device: program.device,
        n_devices: program.n_devices,
        map: program.map.clone(),
        blocks,
    })
}
