use lpu_core::arch::ClusterConfig;
use lpu_core::codegen::{generate_program, BLOCK_GEN};
use lpu_core::compiler::{compile_cluster, compile_program, disassemble, emit_binary, to_asm};
use lpu_core::isa::{Group, Instruction, Opcode};
use lpu_core::mapper::{map_device, partition_model};
use lpu_core::model::{tensor_shapes, Role};
use lpu_core::{presets, Error};

fn cluster(arch: &str, n: usize) -> ClusterConfig {
    ClusterConfig::single_ring(presets::device(arch).unwrap(), n).unwrap()
}

#[test]
fn weight_reads_cover_every_streamed_tile() {
    let c = presets::model("opt-1.3b").unwrap();
    let cl = cluster("hbm3-x4", 1);
    let p = partition_model(&c, 1).unwrap();
    let m = map_device(&p, &c, &cl.device, 0).unwrap();
    let prog = generate_program(&c, &m, &p, &cl).unwrap();

    let (v, l) = (64u64, 32u64);
    let mut expect = 0u64;
    for (id, s) in tensor_shapes(&c) {
        let (rows, cols) = match id.role {
            Role::Embed => (s.cols, s.rows),
            r if r.is_matrix() => (s.rows, s.cols),
            _ => continue,
        };
        expect += (rows as u64).div_ceil(v) * (cols as u64).div_ceil(l);
    }
    assert_eq!(prog.weight_tile_reads(BLOCK_GEN), expect);
}

#[test]
fn lmhead_tile_reads() {
    let c = presets::model("opt-1.3b").unwrap();
    let cl = cluster("hbm3-x4", 1);
    let p = partition_model(&c, 1).unwrap();
    let m = map_device(&p, &c, &cl.device, 0).unwrap();
    let prog = generate_program(&c, &m, &p, &cl).unwrap();
    let lm = m.lm_head_region().unwrap().id;
    let reads: Vec<&Instruction> = prog.blocks[BLOCK_GEN]
        .insts
        .iter()
        .filter(|i| i.opcode == Opcode::RdWeight && i.src0.region() == Some(lm))
        .collect();
    assert_eq!(reads.len(), 1);
    assert_eq!(reads[0].imm, 32 * 1571);
}

#[test]
fn net_counts_match_across_devices() {
    let c = presets::model("opt-66b").unwrap();
    let compiled = compile_cluster(&c, &cluster("hbm3-x4", 2)).unwrap();
    let counts: Vec<[usize; 4]> = compiled.chains.iter().map(|cs| cs.chain_counts()).collect();
    assert!(counts[0][Group::Net as usize] > 0);
    assert_eq!(counts[0][Group::Net as usize], counts[1][Group::Net as usize]);
}

#[test]
fn single_device_capacity_rejects_opt_66b() {
    let c = presets::model("opt-66b").unwrap();
    assert!(matches!(
        compile_cluster(&c, &cluster("hbm3-x4", 1)),
        Err(Error::CapacityExceeded { .. })
    ));
}

#[test]
fn binary_round_trip_small_models() {
    for model in ["tiny-2l", "tiny-llama"] {
        for n in [1, 2, 4] {
            let c = presets::model(model).unwrap();
            let compiled = compile_cluster(&c, &cluster("hbm3-x4", n)).unwrap();
            for cs in &compiled.chains {
                let bytes = emit_binary(cs).unwrap();
                let back = disassemble(&bytes).unwrap();
                assert_eq!(&back, cs);
                assert_eq!(emit_binary(&back).unwrap(), bytes);
            }
        }
    }
}

#[test]
fn truncated_binary_is_malformed() {
    let c = presets::model("tiny-2l").unwrap();
    let compiled = compile_cluster(&c, &cluster("hbm3-x4", 1)).unwrap();
    let bytes = emit_binary(&compiled.chains[0]).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(disassemble(&bytes[..cut]), Err(Error::MalformedBinary(_))), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(disassemble(&extra), Err(Error::MalformedBinary(_))));
}

#[test]
fn asm_listing_parses_back() {
    let c = presets::model("tiny-2l").unwrap();
    let compiled = compile_cluster(&c, &cluster("hbm3-x4", 2)).unwrap();
    let cs = &compiled.chains[0];
    let text = to_asm(cs);
    let parsed: Vec<Instruction> = text
        .lines()
        .filter(|l| l.starts_with("  "))
        .map(|l| l.parse().unwrap())
        .collect();
    let direct: Vec<Instruction> = cs.instructions().copied().collect();
    assert_eq!(parsed, direct);
}

#[test]
fn dependencies_respect_topological_order() {
    // independent oracle: every edge goes from an earlier to a later
    // program slot, and every stream consumer has a stream producer edge
    let c = presets::model("tiny-2l").unwrap();
    let cl = cluster("hbm3-x4", 1);
    let p = partition_model(&c, 1).unwrap();
    let m = map_device(&p, &c, &cl.device, 0).unwrap();
    let prog = generate_program(&c, &m, &p, &cl).unwrap();
    let cs = compile_program(&prog, &cl.device).unwrap();
    for b in &cs.blocks {
        for d in &b.deps {
            assert!(d.producer < d.consumer);
        }
        for (i, inst) in b.insts.iter().enumerate() {
            if inst.opcode.consumes_stream() {
                assert!(b.deps.iter().any(|d| d.consumer as usize == i
                    && b.insts[d.producer as usize].opcode.produces_stream()));
            }
        }
    }
}
