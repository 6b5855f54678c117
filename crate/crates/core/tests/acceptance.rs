//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{greedy, rel_err, Oracle};
use lpu_core::arch::{derive_mac_trees, validate_fit, ClusterConfig};
use lpu_core::bench::{self, per_doubling_gain, ExperimentSpec, RunResult};
use lpu_core::compiler::{compile_cluster, disassemble, emit_binary};
use lpu_core::model::{kv_bytes, model_bytes, synth_params};
use lpu_core::presets;
use lpu_core::sim::{interpret_cluster, RunOptions};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

const ARCH: &str = "hbm3-x4";

fn run(model: &str, devices: usize) -> Result<RunResult, String> {
    bench::run(&ExperimentSpec::new(model, ARCH, devices)).map_err(|e| format!("{model}: {e}"))
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want
}

struct Timing {
    opt13: RunResult,
    opt67: RunResult,
    opt30: RunResult,
    opt66: RunResult,
}

fn timing() -> Result<Timing, String> {
    Ok(Timing {
        opt13: run("opt-1.3b", 1)?,
        opt67: run("opt-6.7b", 1)?,
        opt30: run("opt-30b", 1)?,
        opt66: run("opt-66b", 2)?,
    })
}

fn latency(t: &Timing) -> Outcome {
    let rows = [
        ("opt-1.3b", &t.opt13, 1.25),
        ("opt-6.7b", &t.opt67, 4.62),
        ("opt-66b x2", &t.opt66, 22.2),
    ];
    let detail: Vec<String> = rows
        .iter()
        .map(|(n, r, w)| format!("{n} {:.2} ms (target {w})", r.ms_per_token))
        .collect();
    let detail = detail.join(", ");
    if rows.iter().all(|(_, r, w)| within(r.ms_per_token, *w, 0.2)) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn utilization(t: &Timing) -> Outcome {
    let u = [t.opt13.utilization, t.opt67.utilization, t.opt30.utilization, t.opt66.utilization];
    let detail = format!(
        "1.3b {:.3}, 6.7b {:.3}, 30b {:.3}, 66b x2 {:.3}",
        u[0], u[1], u[2], u[3]
    );
    let ok = u[2] >= 0.85 && u[3] >= 0.85 && (0.5..=0.75).contains(&u[0]) && u.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scaling() -> Outcome {
    let rows = bench::sweep(&ExperimentSpec::new("gpt3-20b", ARCH, 1), &[1, 2, 4, 8]).map_err(|e| e.to_string())?;
    let gain = per_doubling_gain(&rows).ok_or("no doublings")?;
    let s8 = rows.last().map(|r| r.speedup).unwrap_or(0.0);
    let speedups: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}x", r.devices, r.speedup)).collect();
    let detail = format!("{}, per doubling {gain:.3}", speedups.join(" "));
    let monotone = rows.windows(2).all(|w| w[1].ms_per_token < w[0].ms_per_token);
    if s8 >= 5.0 && (1.6..=1.9).contains(&gain) && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mac_trees() -> Outcome {
    let points = [(819e9, 1e9, 8), (1.64e12, 1e9, 16), (3.28e12, 1e9, 32), (460e9, 220e6, 16)];
    let got: Vec<u32> = points.iter().map(|&(bw, f, _)| derive_mac_trees(bw, 64, f)).collect();
    let detail = format!("{got:?}");
    if points.iter().zip(&got).all(|(p, g)| p.2 == *g) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn footprint() -> Outcome {
    let c = presets::model("opt-66b").map_err(|e| e.to_string())?;
    let (m, kv) = (model_bytes(&c), kv_bytes(&c, 2048));
    let dev = presets::device(ARCH).map_err(|e| e.to_string())?;
    let fits = |n| {
        ClusterConfig::single_ring(dev.clone(), n)
            .and_then(|cl| validate_fit(m, kv, &cl))
            .is_ok()
    };
    let (gb_m, gb_kv) = (m as f64 / 1e9, kv as f64 / 1e9);
    let detail = format!("model {gb_m:.1} GB, kv {gb_kv:.2} GB, 1 device fits: {}, 2 fit: {}", fits(1), fits(2));
    if (130.0..=134.0).contains(&gb_m) && (4.5..=5.5).contains(&gb_kv) && !fits(1) && fits(2) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const SEEDS: u64 = 10;
const PROMPT: usize = 8;
const GENERATED: usize = 64;
const REL_TOL: f64 = 1.0 / 128.0;

fn oracle() -> Outcome {
    let c = presets::model("tiny-2l").map_err(|e| e.to_string())?;
    let dev = presets::device(ARCH).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for n in [1, 2] {
        let cl = ClusterConfig::single_ring(dev.clone(), n).map_err(|e| e.to_string())?;
        let chains = compile_cluster(&c, &cl).map_err(|e| e.to_string())?.chains;
        for seed in 0..SEEDS {
            let p = synth_params(&c, seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prompt: Vec<u32> = (0..PROMPT).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect();
            let got = interpret_cluster(&chains, &p, &prompt, GENERATED, &RunOptions::default())
                .map_err(|e| e.to_string())?
                .tokens;
            let want = greedy(&p, &prompt, GENERATED, true);
            if got != want {
                return Err(format!("{n} device(s), seed {seed}: token streams differ"));
            }

            // teacher-forced: every prefix of prompt + output predicts one token
            let seq: Vec<u32> = prompt.iter().chain(&got).copied().collect();
            let mut o = Oracle::new(&p, false);
            let opts = RunOptions {
                record_logits: true,
                ..RunOptions::default()
            };
            for k in 1..seq.len() {
                let want = o.step(seq[k - 1], k - 1);
                let out = interpret_cluster(&chains, &p, &seq[..k], 1, &opts).map_err(|e| e.to_string())?;
                let logits: Vec<f64> = out.logits[0].iter().map(|x| x.to_f64()).collect();
                let e = rel_err(&logits, &want);
                worst = worst.max(e);
                if e > REL_TOL {
                    return Err(format!("{n} device(s), seed {seed}, prefix {k}: rel err {e:.2e}"));
                }
            }
        }
    }
    Ok(format!(
        "{SEEDS} seeds x {GENERATED} tokens match at 1 and 2 devices, worst logit rel err {worst:.2e}"
    ))
}

fn properties() -> Outcome {
    let suites = [
        ("kv_transpose", 64),
        ("map_bijection", 48),
        ("chaining", 100),
        ("esl_conservation", 128),
        ("esl_hiding", 128),
        ("timing_bounds", 32),
        ("binary_round_trip", 32),
    ];
    for (name, cases) in suites {
        common::props::run_property(name, cases).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} suites", suites.len()))
}

fn binaries() -> Outcome {
    let mut count = 0;
    for model in presets::model_names() {
        let c = presets::model(model).map_err(|e| e.to_string())?;
        let n = if model == "opt-66b" { 2 } else { 1 };
        let cl = ClusterConfig::single_ring(presets::device(ARCH).map_err(|e| e.to_string())?, n)
            .map_err(|e| e.to_string())?;
        let compiled = compile_cluster(&c, &cl).map_err(|e| format!("{model}: {e}"))?;
        for cs in &compiled.chains {
            let a = emit_binary(cs).map_err(|e| format!("{model}: {e}"))?;
            let b = emit_binary(&disassemble(&a).map_err(|e| format!("{model}: {e}"))?)
                .map_err(|e| format!("{model}: {e}"))?;
            if a != b {
                return Err(format!("{model} device {}: re-emitted binary differs", cs.device));
            }
            count += 1;
        }
    }
    Ok(format!("{count} binaries byte-identical"))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let t = timing();
    let shared = start.elapsed().as_secs_f64();
    let cases: Vec<Criterion> = vec![
        ("latency", Box::new(|| t.as_ref().map_err(Clone::clone).and_then(latency))),
        ("utilization", Box::new(|| t.as_ref().map_err(Clone::clone).and_then(utilization))),
        ("scaling", Box::new(scaling)),
        ("mac trees", Box::new(mac_trees)),
        ("footprint", Box::new(footprint)),
        ("oracle", Box::new(oracle)),
        ("properties", Box::new(properties)),
        ("binary round trip", Box::new(binaries)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in cases.iter().enumerate() {
        let start = Instant::now();
        let out = f();
        // the first two criteria share the model runs
        let secs = start.elapsed().as_secs_f64() + if i == 0 { shared } else { 0.0 };
        match out {
            Ok(d) => println!("criterion {} {name}: PASS ({d}) [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({d}) [{secs:.1}s]", i + 1)
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
