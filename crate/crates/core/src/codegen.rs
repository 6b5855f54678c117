//! Instruction generation from a model, its memory map and partition.
//!
//! A program is a list of straight-line blocks. Control flows to the next
//! block unless a `br`/`jmp` at the end of a block is taken:
//!
//! ```text
//! entry     init control registers, skip prefill for a single input token
//! prefill   input_load, token_embed, decoder x L            (loops)
//! gen_init  input_load of the last input token
//! gen       token_embed, decoder x L, lmhead, output_store  (loops)
//! exit      hlt
//! ```
//!
//! Register operands are virtual here; [`crate::compiler`] assigns physical
//! LMU registers.

use std::collections::BTreeMap;

use crate::arch::ClusterConfig;
use crate::error::{Error, Result};
use crate::isa::{self, sreg, Cond, Instruction, Opcode, Operand};
use crate::mapper::{MemoryMap, Partition, Region, RegionKind};
use crate::model::{Activation, ModelConfig, NormKind, PosEncoding, Role, TensorId};

pub const BLOCK_ENTRY: usize = 0;
pub const BLOCK_PREFILL: usize = 1;
pub const BLOCK_GEN_INIT: usize = 2;
pub const BLOCK_GEN: usize = 3;
pub const BLOCK_EXIT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub insts: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub device: usize,
    pub n_devices: usize,
    pub blocks: Vec<Block>,
    pub map: MemoryMap,
    /// Element count of each virtual vector register.
    pub vreg_lens: BTreeMap<u32, u32>,
}

impl Program {
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }

    pub fn count(&self, pred: impl Fn(&Instruction) -> bool) -> usize {
        self.instructions().filter(|i| pred(i)).count()
    }

    /// Weight tiles streamed by the `rd_weight` instructions of one block.
    pub fn weight_tile_reads(&self, block: usize) -> u64 {
        self.blocks[block]
            .insts
            .iter()
            .filter(|i| i.opcode == Opcode::RdWeight)
            .map(|i| i.imm)
            .sum()
    }
}

/// Names accepted by [`Emitter::expand`].
pub fn block_library() -> &'static [&'static str] {
    &["input_load", "token_embed", "decoder", "lmhead", "output_store", "sync", "hlt"]
}

/// Appends instructions for one block while handing out virtual registers
/// and stream tags.
pub struct Emitter<'a> {
    config: &'a ModelConfig,
    map: &'a MemoryMap,
    partition: &'a Partition,
    device: usize,
    pub insts: Vec<Instruction>,
    next_vreg: u32,
    next_tag: u32,
    pub vreg_lens: BTreeMap<u32, u32>,
    /// Residual stream register.
    x: Option<Operand>,
}

impl<'a> Emitter<'a> {
    pub fn new(config: &'a ModelConfig, map: &'a MemoryMap, partition: &'a Partition) -> Self {
        Emitter {
            config,
            map,
            partition,
            device: map.device,
            insts: Vec::new(),
            next_vreg: 0,
            next_tag: 0,
            vreg_lens: BTreeMap::new(),
            x: None,
        }
    }

    fn vreg(&mut self, len: usize) -> Operand {
        let r = self.next_vreg;
        self.next_vreg += 1;
        self.vreg_lens.insert(r, len as u32);
        Operand::VReg(r)
    }

    fn tag(&mut self) -> u16 {
        // tags pair a stream with its consumer; only a handful are in flight
        let t = (self.next_tag % isa::TAG_MAX as u32) as u16 + 1;
        self.next_tag += 1;
        t
    }

    fn push(&mut self, i: Instruction) {
        self.insts.push(i);
    }

    fn region(&self, id: TensorId) -> Result<&'a Region> {
        self.map
            .region_for(id)
            .ok_or_else(|| Error::UnmappedTensor(id.to_string()))
    }

    fn reg_op(r: &Region) -> Operand {
        Operand::Region(r.id)
    }

    fn load_vec(&mut self, id: TensorId) -> Result<Operand> {
        let r = self.region(id)?;
        let RegionKind::Vector { len, .. } = r.kind else {
            return Err(Error::UnmappedTensor(format!("{id} is not a vector region")));
        };
        let dst = self.vreg(len);
        self.push(Instruction::new(Opcode::RdVec).dst(dst).src0(Self::reg_op(r)));
        Ok(dst)
    }

    fn zeros(&mut self, len: usize) -> Operand {
        let dst = self.vreg(len);
        self.push(Instruction::new(Opcode::RdVec).dst(dst).imm(len as u64));
        dst
    }

    /// `rd_weight` + `vmm`/`vmm_acc` over a weight matrix region.
    fn matmul(&mut self, weight: TensorId, input: Operand, bias: Option<TensorId>) -> Result<Operand> {
        let bias = match bias {
            Some(b) if self.map.region_for(b).is_some() => Some(self.load_vec(b)?),
            _ => None,
        };
        let r = self.region(weight)?;
        let RegionKind::Matrix { cols, .. } = r.kind else {
            return Err(Error::UnmappedTensor(format!("{weight} is not a matrix region")));
        };
        let (rt, ct) = self.map.grid(r);
        let tag = self.tag();
        self.push(
            Instruction::new(Opcode::RdWeight)
                .src0(Self::reg_op(r))
                .imm((rt * ct) as u64)
                .tag(tag),
        );
        let dst = self.vreg(cols);
        let op = match bias {
            Some(b) => Instruction::new(Opcode::VmmAcc).src1(b),
            None => Instruction::new(Opcode::Vmm),
        };
        self.push(op.dst(dst).src0(input).imm(isa::vmm_imm(0, 0, 0)).tag(tag));
        Ok(dst)
    }

    fn norm(&mut self, x: Operand, params: TensorId) -> Result<Operand> {
        let p = self.load_vec(params)?;
        let op = match self.config.norm_kind {
            NormKind::LayerNorm => Opcode::LayerNorm,
            NormKind::RmsNorm => Opcode::RmsNorm,
        };
        let dst = self.vreg(self.config.d_model);
        self.push(Instruction::new(op).dst(dst).src0(x).src1(p));
        Ok(dst)
    }

    fn unary(&mut self, op: Opcode, x: Operand, len: usize, imm: u64) -> Operand {
        let dst = self.vreg(len);
        self.push(Instruction::new(op).dst(dst).src0(x).imm(imm));
        dst
    }

    fn binary(&mut self, op: Opcode, a: Operand, b: Operand, len: usize) -> Operand {
        let dst = self.vreg(len);
        self.push(Instruction::new(op).dst(dst).src0(a).src1(b));
        dst
    }

    fn residual(&self) -> Result<Operand> {
        self.x.ok_or_else(|| Error::UnknownBlock("decoder before token_embed".into()))
    }

    /// Expand one library block. `layer` is required by `decoder`.
    pub fn expand(&mut self, name: &str, layer: Option<usize>) -> Result<()> {
        match name {
            "input_load" => {
                self.push(
                    Instruction::new(Opcode::RdVec)
                        .dst(Operand::SReg(sreg::TOKEN))
                        .src1(Operand::SReg(sreg::POS)),
                );
            }
            "token_embed" => self.token_embed()?,
            "decoder" => {
                let layer = layer.ok_or_else(|| Error::UnknownBlock("decoder without layer".into()))?;
                self.decoder(layer)?;
            }
            "lmhead" => self.lmhead()?,
            "output_store" => {
                self.push(Instruction::new(Opcode::WrVec).src0(Operand::SReg(sreg::TOKEN)));
            }
            "sync" => {
                let x = self.residual()?;
                let y = self.sync(x);
                self.x = Some(y);
            }
            "hlt" => self.push(Instruction::new(Opcode::Hlt)),
            other => return Err(Error::UnknownBlock(other.to_string())),
        }
        Ok(())
    }

    fn token_embed(&mut self) -> Result<()> {
        let d = self.config.d_model;
        let tok = self.vreg(d);
        let table = if self.config.tie_embeddings {
            self.region(TensorId::global(Role::LmHead))?
        } else {
            self.region(TensorId::global(Role::Embed))?
        };
        self.push(
            Instruction::new(Opcode::RdVec)
                .dst(tok)
                .src0(Self::reg_op(table))
                .src1(Operand::SReg(sreg::TOKEN)),
        );
        let pos = match self.config.pos_encoding {
            PosEncoding::Learned => {
                let r = self.region(TensorId::global(Role::Pos))?;
                let p = self.vreg(d);
                self.push(
                    Instruction::new(Opcode::RdVec)
                        .dst(p)
                        .src0(Self::reg_op(r))
                        .src1(Operand::SReg(sreg::POS)),
                );
                p
            }
            PosEncoding::Rotary => Operand::None,
        };
        let x = self.vreg(d);
        self.push(Instruction::new(Opcode::Embed).dst(x).src0(tok).src1(pos));
        self.x = Some(x);
        Ok(())
    }

    /// Transmit a partial sum and receive the cluster-wide reduction.
    fn sync(&mut self, partial: Operand) -> Operand {
        if self.partition.n_devices == 1 {
            return partial;
        }
        let len = partial.vreg().map(|r| self.vreg_lens[&r]).unwrap_or(0) as usize;
        self.push(Instruction::new(Opcode::TxPart).src0(partial));
        let full = self.vreg(len);
        self.push(Instruction::new(Opcode::RxPart).dst(full).src0(partial));
        full
    }

    fn decoder(&mut self, layer: usize) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::IndexOutOfRange(format!("layer {layer}")));
        }
        let c = self.config;
        let d = c.d_model;
        let hd = c.head_dim();
        let t = |role| TensorId::layer(layer, role);
        let x = self.residual()?;
        let heads = self.partition.heads[self.device].len();

        let h = self.norm(x, t(Role::Norm1))?;
        let attn_partial = if heads > 0 {
            let q = self.matmul(t(Role::Q), h, Some(t(Role::QBias)))?;
            let k = self.matmul(t(Role::K), h, Some(t(Role::KBias)))?;
            let v = self.matmul(t(Role::V), h, Some(t(Role::VBias)))?;
            let (q, k) = if c.pos_encoding == PosEncoding::Rotary {
                let pos = Operand::SReg(sreg::POS);
                let q2 = self.vreg(heads * hd);
                self.push(Instruction::new(Opcode::Rope).dst(q2).src0(q).src1(pos).imm(hd as u64));
                let k2 = self.vreg(heads * hd);
                self.push(Instruction::new(Opcode::Rope).dst(k2).src0(k).src1(pos).imm(hd as u64));
                (q2, k2)
            } else {
                (q, k)
            };
            let (kc, vc) = self.map.kv_regions(layer)?;
            let (kc, vc) = (Self::reg_op(kc), Self::reg_op(vc));
            let pos = Operand::SReg(sreg::POS);
            self.push(Instruction::new(Opcode::WrKv).dst(kc).src0(k).src1(pos));
            self.push(Instruction::new(Opcode::WrKv).dst(vc).src0(v).src1(pos));

            let max_seq = c.max_seq;
            let ctx = self.vreg(heads * hd);
            let mut probs = Vec::with_capacity(heads);
            // score of head h+1 is issued before the context of head h so the
            // SXE has work while the VXE runs softmax
            for step in 0..=heads {
                if step < heads {
                    let tag = self.tag();
                    self.push(Instruction::new(Opcode::RdKv).src0(kc).src1(pos).imm(step as u64).tag(tag));
                    let s = self.vreg(max_seq);
                    self.push(
                        Instruction::new(Opcode::Vmm)
                            .dst(s)
                            .src0(q)
                            .imm(isa::vmm_imm(step * hd, 0, 0))
                            .tag(tag),
                    );
                    let p = self.unary(Opcode::Softmax, s, max_seq, hd as u64);
                    probs.push(p);
                }
                if step > 0 {
                    let h = step - 1;
                    let tag = self.tag();
                    self.push(Instruction::new(Opcode::RdKv).src0(vc).src1(pos).imm(h as u64).tag(tag));
                    let flags = if h > 0 { isa::VMM_MERGE } else { 0 };
                    self.push(
                        Instruction::new(Opcode::Vmm)
                            .dst(ctx)
                            .src0(probs[h])
                            .imm(isa::vmm_imm(0, h * hd, flags))
                            .tag(tag),
                    );
                }
            }
            self.matmul(t(Role::O), ctx, Some(t(Role::OBias)))?
        } else {
            self.zeros(d)
        };
        let attn = self.sync(attn_partial);
        let x1 = self.binary(Opcode::Add, x, attn, d);

        let h2 = self.norm(x1, t(Role::Norm2))?;
        let f = self.matmul(t(Role::Fc1), h2, Some(t(Role::Fc1Bias)))?;
        let flen = self.partition.ffn[self.device].len();
        let act = match c.activation {
            Activation::Relu => Opcode::Relu,
            Activation::Gelu => Opcode::Gelu,
            Activation::Silu => Opcode::Silu,
        };
        let f = self.unary(act, f, flen, 0);
        let y = self.matmul(t(Role::Fc2), f, Some(t(Role::Fc2Bias)))?;
        let y = self.sync(y);
        let x2 = self.binary(Opcode::Add, x1, y, d);
        self.x = Some(x2);
        Ok(())
    }

    fn lmhead(&mut self) -> Result<()> {
        let x = self.residual()?;
        let z = self.norm(x, TensorId::global(Role::FinalNorm))?;
        let logits = self.matmul(TensorId::global(Role::LmHead), z, None)?;
        self.push(
            Instruction::new(Opcode::Sample)
                .dst(Operand::SReg(sreg::TOKEN))
                .src0(logits),
        );
        Ok(())
    }

    fn forward(&mut self) -> Result<()> {
        self.expand("token_embed", None)?;
        for layer in 0..self.config.num_layers {
            self.expand("decoder", Some(layer))?;
        }
        Ok(())
    }

    fn take(&mut self, name: &str) -> Block {
        self.x = None;
        Block {
            name: name.to_string(),
            insts: std::mem::take(&mut self.insts),
        }
    }
}

fn ctrl(op: Opcode, dst: u32, src0: Option<u32>, imm: i64) -> Instruction {
    let mut i = Instruction::new(op).dst(Operand::SReg(dst)).imm(isa::imm_from_signed(imm));
    if let Some(s) = src0 {
        i = i.src0(Operand::SReg(s));
    }
    i
}

fn branch(a: u32, b: Option<u32>, cond: Cond, target: usize) -> Instruction {
    Instruction::new(Opcode::Br)
        .src0(Operand::SReg(a))
        .src1(b.map(Operand::SReg).unwrap_or(Operand::None))
        .imm(isa::br_imm(target, cond))
}

/// Instructions of one decoder layer, using fresh virtual registers. The
/// residual input is a placeholder register `v0`.
pub fn expand_decoder_block(
    layer: usize,
    config: &ModelConfig,
    map: &MemoryMap,
    partition: &Partition,
) -> Result<Vec<Instruction>> {
    let mut e = Emitter::new(config, map, partition);
    let x = e.vreg(config.d_model);
    e.x = Some(x);
    e.expand("decoder", Some(layer))?;
    Ok(e.insts)
}

/// Generate the full program for the device the memory map belongs to.
pub fn generate_program(
    config: &ModelConfig,
    map: &MemoryMap,
    partition: &Partition,
    cluster: &ClusterConfig,
) -> Result<Program> {
    if cluster.devices_per_ring() != partition.n_devices || map.device >= partition.n_devices {
        return Err(Error::InvalidConfig(format!(
            "ring of {} devices does not match partition of {} (device {})",
            cluster.devices_per_ring(), partition.n_devices, map.device
        )));
    }
    let mut e = Emitter::new(config, map, partition);
    let mut blocks = Vec::with_capacity(5);

    e.push(ctrl(Opcode::Movs, sreg::POS, None, 0));
    e.push(ctrl(Opcode::Movs, sreg::CNT, None, 0));
    e.push(ctrl(Opcode::Movs, sreg::EOS, None, 0));
    e.push(ctrl(Opcode::Addi, sreg::TMP, Some(sreg::N_IN), -1));
    e.push(branch(sreg::POS, Some(sreg::TMP), Cond::Ge, BLOCK_GEN_INIT));
    blocks.push(e.take("entry"));

    e.expand("input_load", None)?;
    e.forward()?;
    e.push(ctrl(Opcode::Addi, sreg::POS, Some(sreg::POS), 1));
    e.push(branch(sreg::POS, Some(sreg::TMP), Cond::Lt, BLOCK_PREFILL));
    blocks.push(e.take("prefill"));

    e.expand("input_load", None)?;
    blocks.push(e.take("gen_init"));

    e.forward()?;
    e.expand("lmhead", None)?;
    e.expand("output_store", None)?;
    e.push(ctrl(Opcode::Addi, sreg::POS, Some(sreg::POS), 1));
    e.push(ctrl(Opcode::Addi, sreg::CNT, Some(sreg::CNT), 1));
    e.push(branch(sreg::EOS, None, Cond::Nz, BLOCK_EXIT));
    e.push(branch(sreg::CNT, Some(sreg::N_OUT), Cond::Lt, BLOCK_GEN));
    blocks.push(e.take("gen"));

    e.expand("hlt", None)?;
    blocks.push(e.take("exit"));

    for i in blocks.iter().flat_map(|b| b.insts.iter()) {
        i.check()?;
    }
    Ok(Program {
        device: map.device,
        n_devices: partition.n_devices,
        blocks,
        map: map.clone(),
        vreg_lens: e.vreg_lens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{map_device, partition_model};
    use crate::presets;

    fn setup(model: &str, n: usize, dev: usize) -> (ModelConfig, MemoryMap, Partition, ClusterConfig) {
        let c = presets::model(model).unwrap();
        let d = presets::device("hbm3-x4").unwrap();
        let p = partition_model(&c, n).unwrap();
        let m = map_device(&p, &c, &d, dev).unwrap();
        let cl = ClusterConfig::single_ring(d, n).unwrap();
        (c, m, p, cl)
    }

    #[test]
    fn library_blocks() {
        let (c, m, p, _) = setup("tiny-2l", 1, 0);
        let mut e = Emitter::new(&c, &m, &p);
        e.expand("hlt", None).unwrap();
        assert_eq!(e.insts, vec![Instruction::new(Opcode::Hlt)]);
        assert!(matches!(e.expand("softmax_block", None), Err(Error::UnknownBlock(_))));
        let mut e = Emitter::new(&c, &m, &p);
        e.x = Some(Operand::VReg(0));
        e.expand("sync", None).unwrap();
        assert!(e.insts.is_empty());
        for name in block_library() {
            let mut e = Emitter::new(&c, &m, &p);
            e.x = Some(Operand::VReg(0));
            e.vreg_lens.insert(0, 64);
            e.next_vreg = 1;
            e.expand(name, Some(0)).unwrap();
        }
    }

    #[test]
    fn single_device_has_no_net() {
        let (c, m, p, cl) = setup("tiny-2l", 1, 0);
        let prog = generate_program(&c, &m, &p, &cl).unwrap();
        assert_eq!(prog.count(|i| i.group() == isa::Group::Net), 0);
        assert_eq!(prog.blocks.len(), 5);
        assert_eq!(prog.blocks[BLOCK_EXIT].insts, vec![Instruction::new(Opcode::Hlt)]);
    }

    #[test]
    fn two_devices_sync_twice_per_layer() {
        let (c, m, p, cl) = setup("tiny-2l", 2, 1);
        let prog = generate_program(&c, &m, &p, &cl).unwrap();
        let gen = &prog.blocks[BLOCK_GEN].insts;
        let tx = gen.iter().filter(|i| i.opcode == Opcode::TxPart).count();
        let rx = gen.iter().filter(|i| i.opcode == Opcode::RxPart).count();
        assert_eq!(tx, 2 * c.num_layers);
        assert_eq!(rx, tx);
    }

    #[test]
    fn rotary_inserts_rope() {
        let (c, m, p, _) = setup("tiny-llama", 1, 0);
        let insts = expand_decoder_block(0, &c, &m, &p).unwrap();
        assert_eq!(insts.iter().filter(|i| i.opcode == Opcode::Rope).count(), 2);
        let (c, m, p, _) = setup("tiny-2l", 1, 0);
        let insts = expand_decoder_block(0, &c, &m, &p).unwrap();
        assert_eq!(insts.iter().filter(|i| i.opcode == Opcode::Rope).count(), 0);
    }

    #[test]
    fn every_stream_consumer_follows_its_producer() {
        let (c, m, p, cl) = setup("tiny-2l", 1, 0);
        let prog = generate_program(&c, &m, &p, &cl).unwrap();
        for b in &prog.blocks {
            for (i, inst) in b.insts.iter().enumerate() {
                if inst.opcode.consumes_stream() {
                    let prev = &b.insts[i - 1];
                    assert!(prev.opcode.produces_stream() && prev.tag == inst.tag, "{inst}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (c, m, p, cl) = setup("tiny-2l", 2, 0);
        assert_eq!(generate_program(&c, &m, &p, &cl).unwrap(), generate_program(&c, &m, &p, &cl).unwrap());
    }
}
