//! Instruction set: groups, opcodes, operands and the assembly text form.
//!
//! Operands are 16-bit fields once encoded: a 2-bit kind and a 14-bit index.
//! Before register allocation indices are virtual and may exceed 14 bits.
//!
//! Scalar registers `0..8` are control registers with fixed meaning; see
//! [`sreg`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Mem = 0,
    Comp = 1,
    Net = 2,
    Ctrl = 3,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Mem, Group::Comp, Group::Net, Group::Ctrl];

    pub fn name(self) -> &'static str {
        match self {
            Group::Mem => "MEM",
            Group::Comp => "COMP",
            Group::Net => "NET",
            Group::Ctrl => "CTRL",
        }
    }

    pub fn from_index(i: u8) -> Option<Group> {
        Group::ALL.get(i as usize).copied()
    }
}

macro_rules! opcodes {
    ($($name:ident = $code:literal, $group:ident, $text:literal;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Opcode { $($name),* }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name),*];

            pub fn code(self) -> u8 {
                match self { $(Opcode::$name => $code),* }
            }

            pub fn group(self) -> Group {
                match self { $(Opcode::$name => Group::$group),* }
            }

            pub fn mnemonic(self) -> &'static str {
                match self { $(Opcode::$name => $text),* }
            }

            pub fn from_code(code: u8) -> Option<Opcode> {
                match code { $($code => Some(Opcode::$name),)* _ => None }
            }

            pub fn from_mnemonic(s: &str) -> Option<Opcode> {
                match s { $($text => Some(Opcode::$name),)* _ => None }
            }
        }
    };
}

opcodes! {
    RdWeight = 0x00, Mem, "rd_weight";
    RdKv = 0x01, Mem, "rd_kv";
    WrKv = 0x02, Mem, "wr_kv";
    RdVec = 0x03, Mem, "rd_vec";
    WrVec = 0x04, Mem, "wr_vec";
    Vmm = 0x10, Comp, "vmm";
    VmmAcc = 0x11, Comp, "vmm_acc";
    Softmax = 0x12, Comp, "softmax";
    LayerNorm = 0x13, Comp, "layernorm";
    RmsNorm = 0x14, Comp, "rmsnorm";
    Add = 0x15, Comp, "add";
    Mul = 0x16, Comp, "mul";
    Gelu = 0x17, Comp, "gelu";
    Relu = 0x18, Comp, "relu";
    Silu = 0x19, Comp, "silu";
    Rope = 0x1a, Comp, "rope";
    Embed = 0x1b, Comp, "embed";
    Sample = 0x1c, Comp, "sample";
    TxPart = 0x20, Net, "tx_part";
    RxPart = 0x21, Net, "rx_part";
    Br = 0x30, Ctrl, "br";
    Jmp = 0x31, Ctrl, "jmp";
    Addi = 0x32, Ctrl, "addi";
    Movs = 0x33, Ctrl, "movs";
    Hlt = 0x34, Ctrl, "hlt";
}

impl Opcode {
    /// Executes on the SXE (matrix engine) rather than the VXE.
    pub fn is_sxe(self) -> bool {
        matches!(self, Opcode::Vmm | Opcode::VmmAcc)
    }

    /// Reads an operand stream from the SMA.
    pub fn consumes_stream(self) -> bool {
        self.is_sxe()
    }

    /// Produces an operand stream for a COMP consumer.
    pub fn produces_stream(self) -> bool {
        matches!(self, Opcode::RdWeight | Opcode::RdKv)
    }
}

/// Fixed scalar control registers.
pub mod sreg {
    /// Current sequence position.
    pub const POS: u32 = 0;
    /// Tokens generated so far.
    pub const CNT: u32 = 1;
    /// End-of-sequence flag written by the sampler.
    pub const EOS: u32 = 2;
    /// Number of input tokens (set by the host).
    pub const N_IN: u32 = 3;
    /// Number of tokens to generate (set by the host).
    pub const N_OUT: u32 = 4;
    /// Current token id.
    pub const TOKEN: u32 = 5;
    /// Scratch.
    pub const TMP: u32 = 6;
    pub const RESERVED: u32 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Operand {
    #[default]
    None,
    VReg(u32),
    SReg(u32),
    Region(u16),
}

pub const OPERAND_INDEX_BITS: u32 = 14;
pub const OPERAND_INDEX_MAX: u32 = (1 << OPERAND_INDEX_BITS) - 1;

impl Operand {
    pub fn encode(self) -> Result<u16> {
        let (kind, idx) = match self {
            Operand::None => (0u16, 0u32),
            Operand::VReg(i) => (1, i),
            Operand::SReg(i) => (2, i),
            Operand::Region(i) => (3, i as u32),
        };
        if idx > OPERAND_INDEX_MAX {
            return Err(Error::MalformedBinary(format!("operand index {idx} exceeds 14 bits")));
        }
        Ok(kind << OPERAND_INDEX_BITS | idx as u16)
    }

    pub fn decode(word: u16) -> Result<Operand> {
        let idx = (word as u32) & OPERAND_INDEX_MAX;
        Ok(match word >> OPERAND_INDEX_BITS {
            0 if idx == 0 => Operand::None,
            0 => return Err(Error::MalformedBinary(format!("empty operand with index {idx}"))),
            1 => Operand::VReg(idx),
            2 => Operand::SReg(idx),
            _ => Operand::Region(idx as u16),
        })
    }

    pub fn vreg(self) -> Option<u32> {
        match self {
            Operand::VReg(r) => Some(r),
            _ => None,
        }
    }

    pub fn sreg(self) -> Option<u32> {
        match self {
            Operand::SReg(r) => Some(r),
            _ => None,
        }
    }

    pub fn region(self) -> Option<u16> {
        match self {
            Operand::Region(r) => Some(r),
            _ => None,
        }
    }

    pub fn is_none(self) -> bool {
        self == Operand::None
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::None => write!(f, "-"),
            Operand::VReg(i) => write!(f, "v{i}"),
            Operand::SReg(i) => write!(f, "s{i}"),
            Operand::Region(i) => write!(f, "r{i}"),
        }
    }
}

impl FromStr for Operand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad operand `{s}`"));
        if s == "-" {
            return Ok(Operand::None);
        }
        let (k, n) = s.split_at(1);
        let n: u32 = n.parse().map_err(|_| bad())?;
        match k {
            "v" => Ok(Operand::VReg(n)),
            "s" => Ok(Operand::SReg(n)),
            "r" => u16::try_from(n).map(Operand::Region).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Branch conditions carried in the upper immediate bits of `br`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    /// `src0 < src1`
    Lt = 0,
    /// `src0 >= src1`
    Ge = 1,
    /// `src0 != 0`
    Nz = 2,
}

impl Cond {
    pub fn from_code(c: u64) -> Option<Cond> {
        match c {
            0 => Some(Cond::Lt),
            1 => Some(Cond::Ge),
            2 => Some(Cond::Nz),
            _ => None,
        }
    }
}

pub const IMM_BITS: u32 = 48;
pub const IMM_MASK: u64 = (1 << IMM_BITS) - 1;
pub const TAG_BITS: u32 = 12;
pub const TAG_MAX: u16 = (1 << TAG_BITS) - 1;

/// VMM flag: keep the rest of the destination register (slice write).
pub const VMM_MERGE: u64 = 1;

/// VMM immediate: input offset, output offset, flags (16 bits each).
pub fn vmm_imm(in_off: usize, out_off: usize, flags: u64) -> u64 {
    debug_assert!(in_off < 1 << 16 && out_off < 1 << 16);
    (in_off as u64) << 32 | (out_off as u64) << 16 | (flags & 0xffff)
}

pub fn vmm_offsets(imm: u64) -> (usize, usize) {
    ((imm >> 32 & 0xffff) as usize, (imm >> 16 & 0xffff) as usize)
}

/// Branch immediate: target block and condition.
pub fn br_imm(target: usize, cond: Cond) -> u64 {
    (cond as u64) << 16 | target as u64
}

pub fn br_fields(imm: u64) -> Result<(usize, Cond)> {
    let cond = Cond::from_code(imm >> 16 & 0xff)
        .ok_or_else(|| Error::DecodeFault(format!("bad branch condition in {imm:#x}")))?;
    Ok(((imm & 0xffff) as usize, cond))
}

/// Sign-extend a 48-bit immediate.
pub fn imm_signed(imm: u64) -> i64 {
    ((imm << 16) as i64) >> 16
}

pub fn imm_from_signed(x: i64) -> u64 {
    x as u64 & IMM_MASK
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: Opcode,
    pub dst: Operand,
    pub src0: Operand,
    pub src1: Operand,
    pub imm: u64,
    /// Stream pairing tag; `0` when unused.
    pub tag: u16,
}

impl Instruction {
    pub fn new(opcode: Opcode) -> Self {
        Instruction {
            opcode,
            dst: Operand::None,
            src0: Operand::None,
            src1: Operand::None,
            imm: 0,
            tag: 0,
        }
    }

    pub fn dst(mut self, o: Operand) -> Self {
        self.dst = o;
        self
    }

    pub fn src0(mut self, o: Operand) -> Self {
        self.src0 = o;
        self
    }

    pub fn src1(mut self, o: Operand) -> Self {
        self.src1 = o;
        self
    }

    pub fn imm(mut self, imm: u64) -> Self {
        self.imm = imm & IMM_MASK;
        self
    }

    pub fn tag(mut self, tag: u16) -> Self {
        self.tag = tag;
        self
    }

    pub fn group(&self) -> Group {
        self.opcode.group()
    }

    /// Registers read, including implicit control registers.
    pub fn uses(&self) -> Vec<Operand> {
        let mut out = Vec::with_capacity(3);
        for o in [self.src0, self.src1] {
            if matches!(o, Operand::VReg(_) | Operand::SReg(_)) {
                out.push(o);
            }
        }
        match self.opcode {
            // partial writes keep the rest of the destination
            Opcode::Vmm | Opcode::VmmAcc if self.imm & VMM_MERGE != 0 => out.push(self.dst),
            Opcode::Sample => out.push(Operand::SReg(sreg::POS)),
            _ => {}
        }
        out
    }

    /// Registers written, including implicit control registers.
    pub fn defs(&self) -> Vec<Operand> {
        let mut out = Vec::with_capacity(2);
        if matches!(self.dst, Operand::VReg(_) | Operand::SReg(_)) {
            out.push(self.dst);
        }
        if self.opcode == Opcode::Sample {
            out.push(Operand::SReg(sreg::EOS));
        }
        out
    }

    /// Basic operand shape check against the opcode signature.
    pub fn check(&self) -> Result<()> {
        use Opcode::*;
        let bad = |why: &str| Err(Error::DecodeFault(format!("{self}: {why}")));
        let v = |o: Operand| matches!(o, Operand::VReg(_));
        let s = |o: Operand| matches!(o, Operand::SReg(_));
        let r = |o: Operand| matches!(o, Operand::Region(_));
        let n = |o: Operand| o.is_none();
        let ok = match self.opcode {
            RdWeight => n(self.dst) && r(self.src0) && n(self.src1) && self.tag != 0,
            RdKv => n(self.dst) && r(self.src0) && s(self.src1) && self.tag != 0,
            WrKv => r(self.dst) && v(self.src0) && s(self.src1),
            RdVec => (v(self.dst) || s(self.dst)) && (r(self.src0) || n(self.src0)) && (s(self.src1) || n(self.src1)),
            WrVec => n(self.dst) && s(self.src0),
            Vmm => v(self.dst) && v(self.src0) && n(self.src1) && self.tag != 0,
            VmmAcc => v(self.dst) && v(self.src0) && v(self.src1) && self.tag != 0,
            Softmax | Gelu | Relu | Silu => v(self.dst) && v(self.src0) && n(self.src1),
            LayerNorm | RmsNorm | Add | Mul => v(self.dst) && v(self.src0) && v(self.src1),
            Rope => v(self.dst) && v(self.src0) && s(self.src1),
            Embed => v(self.dst) && v(self.src0) && (v(self.src1) || n(self.src1)),
            Sample => s(self.dst) && v(self.src0),
            TxPart => n(self.dst) && v(self.src0),
            RxPart => v(self.dst) && v(self.src0),
            Br => n(self.dst) && s(self.src0) && (s(self.src1) || n(self.src1)),
            Jmp | Hlt => n(self.dst) && n(self.src0) && n(self.src1),
            Addi => s(self.dst) && s(self.src0),
            Movs => s(self.dst) && n(self.src0),
        };
        if ok {
            Ok(())
        } else {
            bad("operands do not match opcode signature")
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} {} {}, {}, {}, {:#x}",
            self.group() as u8,
            self.group().name(),
            self.opcode.mnemonic(),
            self.dst,
            self.src0,
            self.src1,
            self.imm
        )?;
        if self.tag != 0 {
            write!(f, " @{}", self.tag)?;
        }
        Ok(())
    }
}

impl FromStr for Instruction {
    type Err = Error;

    /// Parse one line of the assembly form produced by `Display`.
    fn from_str(line: &str) -> Result<Self> {
        let bad = |why: &str| Error::Parse(format!("{why}: `{line}`"));
        let line = line.trim();
        let (head, rest) = line.split_once(' ').ok_or_else(|| bad("missing opcode"))?;
        let (chain, group) = head.split_once(':').ok_or_else(|| bad("missing chain"))?;
        let (mnemonic, rest) = rest.trim().split_once(' ').ok_or_else(|| bad("missing operands"))?;
        let opcode = Opcode::from_mnemonic(mnemonic).ok_or_else(|| bad("unknown opcode"))?;
        if group != opcode.group().name() || chain.parse::<u8>().ok() != Some(opcode.group() as u8) {
            return Err(bad("group does not match opcode"));
        }
        let (fields, tag) = match rest.split_once(" @") {
            Some((f, t)) => (f, t.parse::<u16>().map_err(|_| bad("bad tag"))?),
            None => (rest, 0),
        };
        let parts: Vec<&str> = fields.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(bad("expected four fields"));
        }
        let imm = u64::from_str_radix(parts[3].trim_start_matches("0x"), 16).map_err(|_| bad("bad immediate"))?;
        Ok(Instruction {
            opcode,
            dst: parts[0].parse()?,
            src0: parts[1].parse()?,
            src1: parts[2].parse()?,
            imm,
            tag,
        })
    }
}
