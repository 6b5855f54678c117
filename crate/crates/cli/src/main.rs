//! `lpu`: compile presets, run timing experiments and device sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use lpu_core::arch::{validate_fit, ClusterConfig, RingPartition};
use lpu_core::bench::{self, per_doubling_gain, ExperimentSpec, RunResult, ScalingRow};
use lpu_core::compiler::{compile_cluster, disassemble, emit_binary, to_asm};
use lpu_core::isa::Group;
use lpu_core::model::{kv_bytes, model_bytes, synth_params};
use lpu_core::presets;
use lpu_core::sim::reference::generate;
use lpu_core::sim::{interpret_cluster, RunOptions, SamplingParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest model the functional paths will synthesize weights for.
const FUNCTIONAL_LIMIT_BYTES: u64 = 1 << 30;

#[derive(Parser)]
#[command(name = "lpu", version, about = "LPU compiler and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a model and write one binary and memory map per device.
    Compile {
        #[command(flatten)]
        target: Target,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Simulate per-token latency.
    Run {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        decode: Decode,
        /// Comma-separated KV positions to simulate.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<usize>>,
        /// Simulate every generated position instead of a sample.
        #[arg(long)]
        full_decode: bool,
        /// Also decode with synthetic weights and compare against the
        /// reference model.
        #[arg(long)]
        oracle: bool,
        /// Write per-position results as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Latency over several device counts.
    Sweep {
        #[arg(long, default_value = "gpt3-20b")]
        model: String,
        #[arg(long, default_value = "hbm3-x4")]
        arch: String,
        /// Comma-separated device counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        devices: Vec<usize>,
        #[arg(long, default_value_t = bench::DEFAULT_INPUT_TOKENS)]
        in_tokens: usize,
        #[arg(long, default_value_t = bench::DEFAULT_OUTPUT_TOKENS)]
        out_tokens: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the assembly of an `.lpubin` file.
    Disasm { file: PathBuf },
    /// Quick end-to-end check on a tiny model.
    Selftest,
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "hbm3-x4")]
    arch: String,
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// Ring partition label such as `1x8` or `2x4`.
    #[arg(long)]
    partition: Option<String>,
}

impl Target {
    fn partition(&self) -> Result<Option<RingPartition>> {
        Ok(self.partition.as_deref().map(RingPartition::parse).transpose()?)
    }

    fn cluster(&self) -> Result<ClusterConfig> {
        let p = match self.partition()? {
            Some(p) => p,
            None => RingPartition::single_ring(self.devices)?,
        };
        Ok(ClusterConfig::new(presets::device(&self.arch)?, self.devices, p)?)
    }
}

#[derive(Args)]
struct Decode {
    #[arg(long, default_value_t = bench::DEFAULT_INPUT_TOKENS)]
    in_tokens: usize,
    #[arg(long, default_value_t = bench::DEFAULT_OUTPUT_TOKENS)]
    out_tokens: usize,
    /// Seed for synthetic weights, the prompt and sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `0` decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = usize::MAX)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    top_p: f32,
}

impl Decode {
    fn sampling(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            seed: self.seed,
            eos_token: None,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Compile { target, out } => compile(&target, &out),
        Command::Run {
            target,
            decode,
            positions,
            full_decode,
            oracle,
            report,
        } => {
            let spec = ExperimentSpec {
                partition: target.partition()?,
                input_tokens: decode.in_tokens,
                output_tokens: decode.out_tokens,
                positions,
                full_decode,
                sampling: decode.sampling(),
                seed: decode.seed,
                ..ExperimentSpec::new(&target.model, &target.arch, target.devices)
            };
            let r = bench::run(&spec)?;
            print_run(&r);
            if let Some(path) = report {
                write_run_csv(&r, &path)?;
            }
            if oracle {
                check_oracle(&target, &decode)?;
            }
            Ok(())
        }
        Command::Sweep {
            model,
            arch,
            devices,
            in_tokens,
            out_tokens,
            report,
        } => {
            let base = ExperimentSpec {
                input_tokens: in_tokens,
                output_tokens: out_tokens,
                ..ExperimentSpec::new(&model, &arch, devices.first().copied().unwrap_or(1))
            };
            let rows = bench::sweep(&base, &devices)?;
            print_sweep(&rows);
            if let Some(path) = report {
                write_sweep_csv(&rows, &path)?;
            }
            Ok(())
        }
        Command::Disasm { file } => {
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            print!("{}", to_asm(&disassemble(&bytes)?));
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

fn compile(target: &Target, out: &Path) -> Result<()> {
    let config = presets::model(&target.model)?;
    let cluster = target.cluster()?;
    validate_fit(model_bytes(&config), kv_bytes(&config, config.max_seq), &cluster)?;
    let compiled = compile_cluster(&config, &cluster)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for cs in &compiled.chains {
        let stem = format!("{}.dev{}", target.model, cs.device);
        let bin = out.join(format!("{stem}.lpubin"));
        fs::write(&bin, emit_binary(cs)?).with_context(|| format!("writing {}", bin.display()))?;
        cs.map.write_csv(fs::File::create(out.join(format!("{stem}.tiles.csv")))?)?;
        cs.map.write_region_csv(fs::File::create(out.join(format!("{stem}.regions.csv")))?)?;
        let counts = cs.chain_counts();
        let per: Vec<String> = Group::ALL
            .iter()
            .zip(counts)
            .map(|(g, n)| format!("{} {n}", g.name()))
            .collect();
        println!("{}: {}", bin.display(), per.join(", "));
    }
    Ok(())
}

fn print_run(r: &RunResult) {
    println!(
        "{} on {} x{} ({}): {:.3} ms/token, utilization {:.1}%, exposed sync {:.2} us",
        r.model,
        r.arch,
        r.devices,
        r.partition,
        r.ms_per_token,
        r.utilization * 100.0,
        r.exposed_sync_us
    );
    for p in &r.positions {
        println!("  pos {:>5}: {:.4} ms, {} bytes", p.position, p.seconds * 1e3, p.bytes);
    }
}

fn write_run_csv(r: &RunResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["model", "arch", "devices", "partition", "position", "seconds", "bytes", "sync_exposed"])?;
    for p in &r.positions {
        w.write_record([
            r.model.clone(),
            r.arch.clone(),
            r.devices.to_string(),
            r.partition.clone(),
            p.position.to_string(),
            p.seconds.to_string(),
            p.bytes.to_string(),
            p.sync_exposed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_sweep(rows: &[ScalingRow]) {
    println!("devices  partition  ms/token  speedup  util   exposed us");
    for r in rows {
        println!(
            "{:>7}  {:>9}  {:>8.3}  {:>6.2}x  {:>4.1}%  {:>10.2}",
            r.devices,
            r.partition,
            r.ms_per_token,
            r.speedup,
            r.utilization * 100.0,
            r.exposed_sync_us
        );
    }
    if let Some(g) = per_doubling_gain(rows) {
        println!("per doubling: {g:.3}x");
    }
}

fn write_sweep_csv(rows: &[ScalingRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn prompt(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n.max(1)).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Decode with synthetic weights on the compiled programs and on the
/// reference model; fails if the token streams differ.
fn check_oracle(target: &Target, decode: &Decode) -> Result<()> {
    let config = presets::model(&target.model)?;
    ensure!(
        model_bytes(&config) <= FUNCTIONAL_LIMIT_BYTES,
        "{} is too large for functional decoding",
        target.model
    );
    ensure!(
        decode.in_tokens + decode.out_tokens <= config.max_seq,
        "prompt plus output exceeds max_seq {}",
        config.max_seq
    );
    let params = synth_params(&config, decode.seed)?;
    let input = prompt(decode.in_tokens, config.vocab_size, decode.seed);
    let compiled = compile_cluster(&config, &target.cluster()?)?;
    let opts = RunOptions {
        sampling: decode.sampling(),
        ..RunOptions::default()
    };
    let got = interpret_cluster(&compiled.chains, &params, &input, decode.out_tokens, &opts)?;
    let want = generate(&params, &input, decode.out_tokens, &opts.sampling)?;
    let same = got.tokens.iter().zip(&want).take_while(|(a, b)| a == b).count();
    println!("oracle: {same}/{} tokens agree", want.len());
    if got.tokens != want {
        bail!("token streams diverge at output {same}");
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let target = Target {
        model: "tiny-2l".into(),
        arch: "hbm3-x4".into(),
        devices: 2,
        partition: None,
    };
    let decode = Decode {
        in_tokens: 4,
        out_tokens: 16,
        seed: 1,
        temperature: 0.0,
        top_k: usize::MAX,
        top_p: 1.0,
    };
    check_oracle(&target, &decode)?;
    let compiled = compile_cluster(&presets::model(&target.model)?, &target.cluster()?)?;
    for cs in &compiled.chains {
        let a = emit_binary(cs)?;
        ensure!(emit_binary(&disassemble(&a)?)? == a, "binary round trip failed");
    }
    println!("binary round trip: ok");
    let mut spec = ExperimentSpec::new("tiny-2l", "hbm3-x4", 1);
    spec.input_tokens = 4;
    spec.output_tokens = 60;
    let r = bench::run(&spec)?;
    ensure!(r.utilization > 0.0 && r.utilization <= 1.0, "utilization {} out of range", r.utilization);
    println!("timing: {:.4} ms/token", r.ms_per_token);
    println!("selftest passed");
    Ok(())
}
