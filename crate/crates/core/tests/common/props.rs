//! Property checks shared by the proptest suites and the acceptance run.

use std::collections::HashSet;

use half::f16;
use lpu_core::arch::ClusterConfig;
use lpu_core::codegen::BLOCK_GEN;
use lpu_core::compiler::{compile_cluster, disassemble, emit_binary};
use lpu_core::esl::{sync_timeline, LinkParams, Packet};
use lpu_core::mapper::{map_device, partition_model};
use lpu_core::model::{synth_params, tensor_shapes, Activation, ModelConfig, NormKind, PosEncoding};
use lpu_core::presets;
use lpu_core::sim::{interpret_cluster, simulate_ring, RunOptions, Schedule};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub type Check = std::result::Result<(), TestCaseError>;

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn cluster(n: usize) -> ClusterConfig {
    ClusterConfig::single_ring(presets::device("hbm3-x4").unwrap(), n).unwrap()
}

pub fn small_model() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..=2,
        prop_oneof![Just(1usize), Just(2), Just(4)],
        prop_oneof![Just(32usize), Just(64)],
        16usize..300,
        8usize..200,
        32usize..160,
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(layers, heads, hd, ffn, vocab, max_seq, rotary, tie, biases)| ModelConfig {
            name: "prop".into(),
            num_layers: layers,
            d_model: heads * hd,
            num_heads: heads,
            ffn_dim: ffn,
            vocab_size: vocab,
            max_seq,
            pos_encoding: if rotary { PosEncoding::Rotary } else { PosEncoding::Learned },
            norm_kind: if rotary { NormKind::RmsNorm } else { NormKind::LayerNorm },
            activation: if rotary { Activation::Silu } else { Activation::Gelu },
            tie_embeddings: tie,
            biases,
        })
}

fn devices() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(2), Just(4)]
}

/// Keys written token by token come back as `K^T` tiles, bit for bit.
pub fn kv_transpose(n: usize, head_pick: usize, len: usize, bits: Vec<u16>) -> Check {
    let c = presets::model("tiny-2l").unwrap();
    let cl = cluster(n);
    let part = partition_model(&c, n).unwrap();
    let map = map_device(&part, &c, &cl.device, 0).unwrap();
    let heads = part.heads[0].len();
    if heads == 0 {
        return Ok(());
    }
    let head = head_pick % heads;
    let hd = c.head_dim();
    let len = len.clamp(1, c.max_seq);
    let key = |p: usize, e: usize| {
        let x = f16::from_bits(bits[(p * hd + e) % bits.len()]);
        if x.is_nan() { f16::ZERO } else { x }
    };
    let mut image = vec![0u8; map.total_bytes as usize];
    for p in 0..len {
        for e in 0..hd {
            let a = map.kv_key_address(0, head, p, e).unwrap() as usize;
            image[a..a + 2].copy_from_slice(&key(p, e).to_le_bytes());
        }
    }
    let (v, l) = (map.v, map.l);
    let rt = hd.div_ceil(v);
    for (t, &base) in map.key_stream(0, head, len).unwrap().iter().enumerate() {
        let (ct, rtile) = (t / rt, t % rt);
        for j in 0..l {
            for i in 0..v {
                let (row, col) = (rtile * v + i, ct * l + j);
                if row >= hd || col >= len {
                    continue;
                }
                let a = base as usize + 2 * (j * v + i);
                let got = u16::from_le_bytes([image[a], image[a + 1]]);
                if got != key(col, row).to_bits() {
                    return Err(fail(format!("K^T[{row}][{col}] mismatch")));
                }
            }
        }
    }
    Ok(())
}

/// Every parameter element has a distinct, in-bounds address on its device,
/// inside a region, and every element is placed somewhere.
pub fn map_bijection(c: ModelConfig, n: usize) -> Check {
    let cl = cluster(n);
    let part = partition_model(&c, n).map_err(|e| fail(e.to_string()))?;
    let mut placed = HashSet::new();
    for dev in 0..n {
        let map = map_device(&part, &c, &cl.device, dev).map_err(|e| fail(e.to_string()))?;
        let mut spans: Vec<(u64, u64)> = map.regions.iter().map(|r| (r.base, r.base + r.bytes)).collect();
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(fail("regions overlap".into()));
        }
        let mut seen = HashSet::new();
        for (id, row, col, addr) in map.element_addresses() {
            let i = spans.partition_point(|s| s.0 <= addr);
            let inside = i > 0 && addr + 2 <= spans[i - 1].1;
            if addr % 2 != 0 || !inside || addr + 2 > map.total_bytes {
                return Err(fail(format!("{id}[{row},{col}] at {addr} outside its region")));
            }
            if !seen.insert(addr) {
                return Err(fail(format!("address {addr} used twice on device {dev}")));
            }
            placed.insert((id, row, col));
        }
    }
    let total: usize = tensor_shapes(&c).iter().map(|(_, s)| s.numel()).sum();
    if placed.len() != total {
        return Err(fail(format!("{} of {total} elements placed", placed.len())));
    }
    Ok(())
}

/// Random legal interleavings of the chains compute what program order does.
pub fn chaining_sound(model: &str, n: usize, schedule_seed: u64) -> Check {
    let c = presets::model(model).unwrap();
    let comp = compile_cluster(&c, &cluster(n)).unwrap();
    let p = synth_params(&c, 11).unwrap();
    let input = [3, 1, 4, 1, 5];
    let base = RunOptions {
        record_logits: true,
        ..Default::default()
    };
    let seq = interpret_cluster(&comp.chains, &p, &input, 6, &base).map_err(|e| fail(e.to_string()))?;
    let rnd = RunOptions {
        schedule: Schedule::Random(schedule_seed),
        ..base
    };
    let got = interpret_cluster(&comp.chains, &p, &input, 6, &rnd).map_err(|e| fail(e.to_string()))?;
    if got != seq {
        return Err(fail(format!("schedule {schedule_seed} changed the result")));
    }
    Ok(())
}

fn link() -> LinkParams {
    LinkParams::from_device(&presets::device("hbm3-x4").unwrap())
}

/// Every packet reaches every other member exactly once, and the finish time
/// lies between the compute-only and fully serialized bounds.
pub fn esl_conservation(ring: usize, line: bool, sends: Vec<Vec<(f64, u64)>>) -> Check {
    let sends: Vec<Vec<Packet>> = sends[..ring]
        .iter()
        .map(|s| s.iter().map(|&(ready, bytes)| Packet { ready, bytes }).collect())
        .collect();
    let ends: Vec<f64> = sends.iter().map(|s| s.iter().map(|p| p.ready).fold(0.0, f64::max)).collect();
    let l = LinkParams {
        buffer_bytes: u64::MAX,
        ..link()
    };
    let out = sync_timeline(&sends, &ends, line, 0.0, &l).map_err(|e| fail(e.to_string()))?;
    for (s, row) in out.delivered.iter().enumerate() {
        for (d, &k) in row.iter().enumerate() {
            let want = if s == d { 0 } else { sends[s].len() };
            if k != want {
                return Err(fail(format!("{s}->{d}: {k} of {want} packets")));
            }
        }
    }
    let compute_only = ends.iter().copied().fold(0.0, f64::max);
    let all_bytes: u64 = sends.iter().flatten().map(|p| p.bytes).sum();
    let packets: usize = sends.iter().map(Vec::len).sum();
    let serial = ring as f64 * (l.serialization(all_bytes) + ring as f64 * l.hop_latency)
        + packets as f64 * ring as f64 * l.accumulate;
    let finish = out.finish();
    if finish + 1e-15 < compute_only || finish > compute_only + serial + 1e-12 {
        return Err(fail(format!("finish {finish} outside [{compute_only}, {}]", compute_only + serial)));
    }
    let has_traffic = sends.iter().any(|s| !s.is_empty());
    if ring > 1 && has_traffic {
        let first = sends.iter().flatten().map(|p| p.ready).fold(f64::INFINITY, f64::min);
        let comm_only = first + l.hop_latency + l.accumulate;
        if finish + 1e-15 < comm_only {
            return Err(fail(format!("finish {finish} before any packet could arrive")));
        }
    }
    Ok(())
}

/// Back-to-back FCs: when each column task's share of link time fits in its
/// compute time, the partial sums of the first FC arrive while the second FC
/// is still running.
pub fn esl_hiding(ring: usize, tasks: usize, slack: f64, next_tasks: usize) -> Check {
    let l = link();
    let ser = l.serialization(l.packet_bytes);
    // busiest link carries one packet from each of the ceil(n/2) upstream sources
    let per_link = ring.div_ceil(2) as f64 * ser;
    let c = per_link * (1.0 + slack);
    let sends: Vec<Vec<Packet>> = (0..ring)
        .map(|_| {
            (0..tasks)
                .map(|k| Packet {
                    ready: (k + 1) as f64 * c,
                    bytes: l.packet_bytes,
                })
                .collect()
        })
        .collect();
    let end = tasks as f64 * c;
    let tail = ring as f64 * (l.hop_latency + 2.0 * ser) + ring as f64 * l.accumulate;
    let window = (next_tasks as f64 * c).max(tail);
    let out = sync_timeline(&sends, &vec![end; ring], false, window, &l).map_err(|e| fail(e.to_string()))?;
    if out.max_exposed() > 0.0 {
        return Err(fail(format!("{} s exposed with window {window}", out.max_exposed())));
    }
    Ok(())
}

/// Utilization never exceeds one and a token never beats the bandwidth bound.
pub fn timing_bounds(model: &str, n: usize, position: usize) -> Check {
    let c = presets::model(model).unwrap();
    let cl = cluster(n);
    let comp = compile_cluster(&c, &cl).unwrap();
    let pos = position % c.max_seq;
    let reports = simulate_ring(&comp.chains, &cl.device, BLOCK_GEN, pos, false, false).map_err(|e| fail(e.to_string()))?;
    for r in reports {
        let floor = r.bytes as f64 / cl.device.hbm_bandwidth;
        if r.utilization > 1.0 || r.seconds < floor {
            return Err(fail(format!("{model} x{n} @{pos}: {} s for {} B", r.seconds, r.bytes)));
        }
        for e in [r.sma, r.sxe, r.vxe] {
            if (e.total() - r.cycles).abs() > 1e-6 * r.cycles {
                return Err(fail(format!("engine accounting {e:?} vs {} cycles", r.cycles)));
            }
        }
    }
    Ok(())
}

/// emit -> disassemble -> emit is the identity.
pub fn binary_round_trip(c: ModelConfig, n: usize) -> Check {
    let comp = compile_cluster(&c, &cluster(n)).map_err(|e| fail(e.to_string()))?;
    for cs in &comp.chains {
        let a = emit_binary(cs).map_err(|e| fail(e.to_string()))?;
        let back = disassemble(&a).map_err(|e| fail(e.to_string()))?;
        if &back != cs || emit_binary(&back).map_err(|e| fail(e.to_string()))? != a {
            return Err(fail("round trip changed the program".into()));
        }
    }
    Ok(())
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn packets() -> impl Strategy<Value = Vec<Vec<(f64, u64)>>> {
    prop::collection::vec(
        prop::collection::vec((0.0f64..5e-6, prop_oneof![Just(64u64), Just(128), Just(256)]), 0..12),
        8,
    )
}

/// Run one named property for `cases` generated inputs.
pub fn run_property(name: &str, cases: u32) -> std::result::Result<(), String> {
    let mut r = runner(cases);
    let out = match name {
        "kv_transpose" => r.run(
            &(devices(), 0usize..8, 1usize..256, prop::collection::vec(any::<u16>(), 1..512)),
            |(n, h, len, bits)| kv_transpose(n, h, len, bits),
        )
        .map_err(|e| e.to_string()),
        "map_bijection" => r.run(&(small_model(), devices()), |(c, n)| map_bijection(c, n)).map_err(|e| e.to_string()),
        "chaining" => r.run(
            &(prop_oneof![Just("tiny-2l"), Just("tiny-llama")], prop_oneof![Just(1usize), Just(2)], any::<u64>()),
            |(m, n, s)| chaining_sound(m, n, s),
        )
        .map_err(|e| e.to_string()),
        "esl_conservation" => r.run(
            &(prop_oneof![Just(2usize), Just(4), Just(8)], any::<bool>(), packets()),
            |(ring, line, sends)| esl_conservation(ring, line, sends),
        )
        .map_err(|e| e.to_string()),
        "esl_hiding" => r.run(
            &(prop_oneof![Just(2usize), Just(4), Just(8)], 1usize..64, 0.0f64..4.0, 1usize..64),
            |(ring, t, slack, next)| esl_hiding(ring, t, slack, next),
        )
        .map_err(|e| e.to_string()),
        "timing_bounds" => r.run(
            &(prop_oneof![Just("tiny-2l"), Just("tiny-llama")], devices(), 0usize..4096),
            |(m, n, p)| timing_bounds(m, n, p),
        )
        .map_err(|e| e.to_string()),
        "binary_round_trip" => r.run(&(small_model(), devices()), |(c, n)| binary_round_trip(c, n)).map_err(|e| e.to_string()),
        other => return Err(format!("unknown property {other}")),
    };
    out
}
