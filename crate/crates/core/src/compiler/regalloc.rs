//! Linear-scan allocation of LMU registers.
//!
//! Vector and scalar registers come from separate pools. Live ranges are
//! computed per block in program order; a register is reused only after
//! the previous value's last reader, never by that reader itself, since a
//! streaming consumer may still be reading its input while writing output.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::arch::FP16_BYTES;
use crate::codegen::Program;
use crate::error::{Error, Result};
use crate::isa::{sreg, Instruction, Operand};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Interval {
    reg: u32,
    start: usize,
    end: usize,
}

fn intervals(insts: &[Instruction], pick: impl Fn(Operand) -> Option<u32>) -> Vec<Interval> {
    let mut span: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (i, inst) in insts.iter().enumerate() {
        for o in inst.uses().into_iter().chain(inst.defs()) {
            if let Some(r) = pick(o) {
                span.entry(r).and_modify(|s| s.1 = i).or_insert((i, i));
            }
        }
    }
    let mut out: Vec<Interval> = span
        .into_iter()
        .map(|(reg, (start, end))| Interval { reg, start, end })
        .collect();
    out.sort_by_key(|iv| (iv.start, iv.reg));
    out
}

/// Assign physical registers to `intervals` from a pool of `available`.
/// `weight` gives the LMU bytes of a virtual register; `budget` caps the
/// bytes live at once.
fn scan(
    ivs: &[Interval],
    available: usize,
    class: &'static str,
    weight: impl Fn(u32) -> u64,
    budget: Option<u64>,
) -> Result<HashMap<u32, u32>> {
    let mut free: BTreeSet<u32> = (0..available as u32).collect();
    let mut active: Vec<Interval> = Vec::new();
    let mut assign = HashMap::with_capacity(ivs.len());
    let mut live_bytes = 0u64;
    for iv in ivs {
        active.retain(|a| {
            if a.end < iv.start {
                free.insert(assign[&a.reg]);
                live_bytes -= weight(a.reg);
                false
            } else {
                true
            }
        });
        let Some(&phys) = free.iter().next() else {
            return Err(Error::RegisterPressureExceeded {
                class,
                needed: active.len() + 1,
                available,
            });
        };
        free.remove(&phys);
        live_bytes += weight(iv.reg);
        if let Some(b) = budget {
            if live_bytes > b {
                return Err(Error::RegisterPressureExceeded {
                    class: "lmu byte",
                    needed: live_bytes as usize,
                    available: b as usize,
                });
            }
        }
        assign.insert(iv.reg, phys);
        active.push(*iv);
    }
    Ok(assign)
}

fn rename(o: Operand, v: &HashMap<u32, u32>, s: &HashMap<u32, u32>) -> Operand {
    match o {
        Operand::VReg(r) => Operand::VReg(v[&r]),
        Operand::SReg(r) if r >= sreg::RESERVED => Operand::SReg(s[&r] + sreg::RESERVED),
        other => other,
    }
}

/// Replace virtual registers with physical ones. `vector_regs` and
/// `scalar_regs` are the pool sizes; control registers are excluded from
/// the scalar pool.
pub fn allocate_registers(
    program: &Program,
    vector_regs: usize,
    scalar_regs: usize,
    lmu_bytes: u64,
) -> Result<Program> {
    let mut out = program.clone();
    let mut phys_lens: BTreeMap<u32, u32> = BTreeMap::new();
    let scalar_pool = scalar_regs.saturating_sub(sreg::RESERVED as usize);
    for block in &mut out.blocks {
        let vivs = intervals(&block.insts, Operand::vreg);
        let sivs = intervals(&block.insts, |o| o.sreg().filter(|&r| r >= sreg::RESERVED));
        let len = |r: u32| program.vreg_lens.get(&r).copied().unwrap_or(0) as u64 * FP16_BYTES;
        let vmap = scan(&vivs, vector_regs, "vector", len, Some(lmu_bytes))?;
        let smap = scan(&sivs, scalar_pool, "scalar", |_| 0, None)?;
        for inst in &mut block.insts {
            inst.dst = rename(inst.dst, &vmap, &smap);
            inst.src0 = rename(inst.src0, &vmap, &smap);
            inst.src1 = rename(inst.src1, &vmap, &smap);
        }
        for (v, p) in &vmap {
            let l = program.vreg_lens.get(v).copied().unwrap_or(0);
            let e = phys_lens.entry(*p).or_insert(0);
            *e = (*e).max(l);
        }
    }
    out.vreg_lens = phys_lens;
    Ok(out)
}

/// Number of distinct vector registers referenced by a program.
pub fn vector_registers_used(program: &Program) -> usize {
    let mut set = BTreeSet::new();
    for i in program.instructions() {
        for o in [i.dst, i.src0, i.src1] {
            if let Some(r) = o.vreg() {
                set.insert(r);
            }
        }
    }
    set.len()
}
