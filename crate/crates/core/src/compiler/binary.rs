//! `.lpubin` encoding.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   "LPUB" version:u16 flags:u16 device:u16 n_devices:u16
//!          v:u32 l:u32 channels:u32 burst:u32 total_bytes:u64
//!          regions:u32 blocks:u32
//! region   key_layer:u32 key_role:u8 name_len:u16 name kind:u8 base:u64 bytes:u64 payload
//! block    name_len:u16 name counts:[u32; 4]
//!          MEM, COMP, NET, CTRL instruction words (128 bit each)
//!          order:[u8; n]   chain id of each program-order slot
//!          deps:u32 (consumer:u32 producer:u32 kind:u8)*
//! ```
//!
//! Instruction word bit fields, least significant first: group 4, opcode 8,
//! dst 16, src0 16, src1 16, imm 48, chain 8, tag 12.

use std::fmt::Write as _;

use crate::compiler::chain::{ChainSet, ChainedBlock, Dep, DepKind};
use crate::error::{Error, Result};
use crate::isa::{Group, Instruction, Opcode, Operand, IMM_MASK, TAG_MAX};
use crate::mapper::{MatrixSource, MemoryMap, Region, RegionKind};
use crate::model::{Role, TensorId};

pub const MAGIC: &[u8; 4] = b"LPUB";
pub const VERSION: u16 = 1;
pub const WORD_BYTES: usize = 16;

const NO_LAYER: u32 = u32::MAX;
const NO_ROLE: u8 = u8::MAX;

pub fn encode_instruction(i: &Instruction) -> Result<u128> {
    if i.tag > TAG_MAX {
        return Err(Error::MalformedBinary(format!("tag {} exceeds 12 bits", i.tag)));
    }
    let g = i.group() as u128;
    Ok(g
        | (i.opcode.code() as u128) << 4
        | (i.dst.encode()? as u128) << 12
        | (i.src0.encode()? as u128) << 28
        | (i.src1.encode()? as u128) << 44
        | ((i.imm & IMM_MASK) as u128) << 60
        | g << 108
        | (i.tag as u128) << 116)
}

pub fn decode_instruction(w: u128) -> Result<Instruction> {
    let field = |lo: u32, bits: u32| ((w >> lo) & ((1u128 << bits) - 1)) as u64;
    let code = field(4, 8) as u8;
    let opcode = Opcode::from_code(code).ok_or_else(|| Error::MalformedBinary(format!("unknown opcode {code:#x}")))?;
    let group = field(0, 4) as u8;
    let chain = field(108, 8) as u8;
    if group != opcode.group() as u8 || chain != group {
        return Err(Error::MalformedBinary(format!(
            "{} encoded with group {group} chain {chain}",
            opcode.mnemonic()
        )));
    }
    Ok(Instruction {
        opcode,
        dst: Operand::decode(field(12, 16) as u16)?,
        src0: Operand::decode(field(28, 16) as u16)?,
        src1: Operand::decode(field(44, 16) as u16)?,
        imm: field(60, 48),
        tag: field(116, 12) as u16,
    })
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u16(&mut self, x: u16) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn usize32(&mut self, x: usize) -> Result<()> {
        let v = u32::try_from(x).map_err(|_| Error::MalformedBinary(format!("{x} does not fit 32 bits")))?;
        self.u32(v);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::MalformedBinary("name too long".into()))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn tensor(&mut self, t: Option<TensorId>) {
        match t {
            Some(t) => {
                self.u32(t.layer.unwrap_or(NO_LAYER));
                self.u8(t.role.index());
            }
            None => {
                self.u32(NO_LAYER);
                self.u8(NO_ROLE);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::MalformedBinary(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::MalformedBinary("name is not utf-8".into()))
    }
    fn tensor(&mut self) -> Result<Option<TensorId>> {
        let layer = self.u32()?;
        let role = self.u8()?;
        if role == NO_ROLE {
            return Ok(None);
        }
        let role = Role::from_index(role).ok_or_else(|| Error::MalformedBinary(format!("unknown role {role}")))?;
        Ok(Some(TensorId {
            layer: (layer != NO_LAYER).then_some(layer),
            role,
        }))
    }
    fn some_tensor(&mut self) -> Result<TensorId> {
        self.tensor()?
            .ok_or_else(|| Error::MalformedBinary("region without source tensor".into()))
    }
}

fn write_region(w: &mut Writer, r: &Region) -> Result<()> {
    w.tensor(r.key);
    w.str(&r.name)?;
    let kind = match r.kind {
        RegionKind::Matrix { .. } => 0,
        RegionKind::Vector { .. } => 1,
        RegionKind::Table { .. } => 2,
        RegionKind::KvKey { .. } => 3,
        RegionKind::KvValue { .. } => 4,
    };
    w.u8(kind);
    w.u64(r.base);
    w.u64(r.bytes);
    match r.kind {
        RegionKind::Matrix { rows, cols, src } => {
            w.usize32(rows)?;
            w.usize32(cols)?;
            w.tensor(Some(src.tensor));
            w.usize32(src.row_off)?;
            w.usize32(src.col_off)?;
            w.u8(src.transpose as u8);
        }
        RegionKind::Vector { len, tensor, offset } => {
            w.usize32(len)?;
            w.tensor(Some(tensor));
            w.usize32(offset)?;
        }
        RegionKind::Table { rows, cols, tensor } => {
            w.usize32(rows)?;
            w.usize32(cols)?;
            w.tensor(Some(tensor));
        }
        RegionKind::KvKey { heads, head_dim, max_seq } | RegionKind::KvValue { heads, head_dim, max_seq } => {
            w.usize32(heads)?;
            w.usize32(head_dim)?;
            w.usize32(max_seq)?;
        }
    }
    Ok(())
}

fn read_region(r: &mut Reader, id: u16) -> Result<Region> {
    let key = r.tensor()?;
    let name = r.str()?;
    let kind_code = r.u8()?;
    let base = r.u64()?;
    let bytes = r.u64()?;
    let kind = match kind_code {
        0 => {
            let rows = r.usize()?;
            let cols = r.usize()?;
            let tensor = r.some_tensor()?;
            let row_off = r.usize()?;
            let col_off = r.usize()?;
            let transpose = match r.u8()? {
                0 => false,
                1 => true,
                x => return Err(Error::MalformedBinary(format!("bad transpose flag {x}"))),
            };
            RegionKind::Matrix {
                rows,
                cols,
                src: MatrixSource {
                    tensor,
                    row_off,
                    col_off,
                    transpose,
                },
            }
        }
        1 => RegionKind::Vector {
            len: r.usize()?,
            tensor: r.some_tensor()?,
            offset: r.usize()?,
        },
        2 => RegionKind::Table {
            rows: r.usize()?,
            cols: r.usize()?,
            tensor: r.some_tensor()?,
        },
        3 | 4 => {
            let heads = r.usize()?;
            let head_dim = r.usize()?;
            let max_seq = r.usize()?;
            if kind_code == 3 {
                RegionKind::KvKey { heads, head_dim, max_seq }
            } else {
                RegionKind::KvValue { heads, head_dim, max_seq }
            }
        }
        k => return Err(Error::MalformedBinary(format!("unknown region kind {k}"))),
    };
    Ok(Region {
        id,
        key,
        name,
        kind,
        base,
        bytes,
    })
}

pub fn emit_binary(chains: &ChainSet) -> Result<Vec<u8>> {
    let m = &chains.map;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u16(0);
    let dev16 = |x: usize| u16::try_from(x).map_err(|_| Error::MalformedBinary(format!("device {x}")));
    w.u16(dev16(chains.device)?);
    w.u16(dev16(chains.n_devices)?);
    w.usize32(m.v)?;
    w.usize32(m.l)?;
    w.u32(m.num_channels);
    w.u32(m.burst_bytes as u32);
    w.u64(m.total_bytes);
    w.usize32(m.regions.len())?;
    w.usize32(chains.blocks.len())?;
    for r in &m.regions {
        write_region(&mut w, r)?;
    }
    for b in &chains.blocks {
        w.str(&b.name)?;
        let chains: Vec<Vec<usize>> = Group::ALL.iter().map(|&g| b.chain(g)).collect();
        for c in &chains {
            w.usize32(c.len())?;
        }
        for c in &chains {
            for &i in c {
                w.0.extend_from_slice(&encode_instruction(&b.insts[i])?.to_le_bytes());
            }
        }
        for i in &b.insts {
            w.u8(i.group() as u8);
        }
        w.usize32(b.deps.len())?;
        for d in &b.deps {
            w.u32(d.consumer);
            w.u32(d.producer);
            w.u8(d.kind as u8);
        }
    }
    Ok(w.0)
}

pub fn disassemble(bytes: &[u8]) -> Result<ChainSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::MalformedBinary("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::MalformedBinary(format!("unsupported version {version}")));
    }
    let _flags = r.u16()?;
    let device = r.u16()? as usize;
    let n_devices = r.u16()? as usize;
    let v = r.usize()?;
    let l = r.usize()?;
    let channels = r.u32()?;
    let burst = r.u32()? as u64;
    let total_bytes = r.u64()?;
    let n_regions = r.usize()?;
    let n_blocks = r.usize()?;
    if v == 0 || l == 0 || channels == 0 {
        return Err(Error::MalformedBinary("zero tile geometry".into()));
    }
    let mut regions = Vec::with_capacity(n_regions.min(1 << 14));
    for id in 0..n_regions {
        let id = u16::try_from(id).map_err(|_| Error::MalformedBinary("too many regions".into()))?;
        regions.push(read_region(&mut r, id)?);
    }
    let map = MemoryMap::from_regions(device, v, l, channels, burst, regions, total_bytes)?;
    let mut blocks = Vec::with_capacity(n_blocks.min(64));
    for _ in 0..n_blocks {
        let name = r.str()?;
        let mut counts = [0usize; 4];
        for c in &mut counts {
            *c = r.usize()?;
        }
        let mut chains: Vec<Vec<Instruction>> = Vec::with_capacity(4);
        for (g, &n) in counts.iter().enumerate() {
            let mut c = Vec::with_capacity(n.min(bytes.len() / WORD_BYTES));
            for _ in 0..n {
                let inst = decode_instruction(r.u128()?)?;
                if inst.group() as usize != g {
                    return Err(Error::MalformedBinary(format!("{inst} in chain {g}")));
                }
                c.push(inst);
            }
            chains.push(c);
        }
        let total: usize = counts.iter().sum();
        let order = r.take(total)?;
        let mut next = [0usize; 4];
        let mut insts = Vec::with_capacity(total);
        for &g in order {
            let g = g as usize;
            let inst = chains
                .get(g)
                .and_then(|c| c.get(next[g]))
                .ok_or_else(|| Error::MalformedBinary(format!("order references chain {g} past its end")))?;
            insts.push(*inst);
            next[g] += 1;
        }
        let n_deps = r.usize()?;
        let mut deps = Vec::with_capacity(n_deps.min(bytes.len() / 9));
        for _ in 0..n_deps {
            let consumer = r.u32()?;
            let producer = r.u32()?;
            let k = r.u8()?;
            let kind = DepKind::from_code(k).ok_or_else(|| Error::MalformedBinary(format!("bad dependency kind {k}")))?;
            deps.push(Dep {
                consumer,
                producer,
                kind,
            });
        }
        let block = ChainedBlock { name, insts, deps };
        block.check_acyclic()?;
        blocks.push(block);
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedBinary(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ChainSet {
        device,
        n_devices,
        map,
        blocks,
    })
}

/// Assembly listing: one line per instruction, blocks introduced by labels.
pub fn to_asm(chains: &ChainSet) -> String {
    let mut s = String::new();
    for (bi, b) in chains.blocks.iter().enumerate() {
        let _ = writeln!(s, "{bi}.{}:", b.name);
        for i in &b.insts {
            let _ = writeln!(s, "  {i}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{vmm_imm, Opcode};

    #[test]
    fn hlt_encoding() {
        let w = encode_instruction(&Instruction::new(Opcode::Hlt)).unwrap();
        assert_eq!(w, 3 | (0x34u128 << 4) | (3u128 << 108));
    }

    #[test]
    fn word_round_trip() {
        let i = Instruction::new(Opcode::VmmAcc)
            .dst(Operand::VReg(255))
            .src0(Operand::VReg(1))
            .src1(Operand::VReg(16383))
            .imm(vmm_imm(4096, 65535, 1))
            .tag(4095);
        assert_eq!(decode_instruction(encode_instruction(&i).unwrap()).unwrap(), i);
    }

    #[test]
    fn rejects_bad_words() {
        let w = encode_instruction(&Instruction::new(Opcode::Hlt)).unwrap();
        assert!(decode_instruction(w & !0xf).is_err());
        assert!(decode_instruction(w | (0xffu128 << 4)).is_err());
    }
}
