use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use unr::engine::EndpointConfig;
use unr_bench::run::{run_bench, RunOptions};
use unr_bench::spec::{parse_sizes, BenchSpec, Benchmark, ComputeSpec, TransportKind};

/// Run a benchmark and print one JSON metric record per message size.
///
/// Exits 0 when every payload checksum matched and no synchronization or
/// overflow warning was raised, 1 when an invariant failed and 2 on errors.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Cli {
    benchmark: Benchmark,
    #[arg(long, value_enum, default_value_t = TransportKind::Simnet)]
    transport: TransportKind,
    /// Channel capability preset (glex, verbs, utofu, ugni, level4, ...).
    #[arg(long, default_value = "glex")]
    preset: String,
    /// Sizes such as `4K..4M` (powers of two), `1K,64K` or `1M`.
    #[arg(long, default_value = "4K..4M")]
    sizes: String,
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    /// `none`, `fixed:T` or `normal:T,SD` (microseconds or virtual units).
    #[arg(long, default_value = "none")]
    compute: ComputeSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// This process's rank (tcp); overrides the config file.
    #[arg(long)]
    rank: Option<u32>,
    /// Endpoint configuration file (tcp).
    #[arg(long, env = "UNR_CONFIG")]
    config: Option<PathBuf>,
    /// Ranks in an in-process loopback world or simulated halo line.
    #[arg(long, default_value_t = 2)]
    ranks: u32,
    /// Concurrent ping-pong pairs (pingpong_compute).
    #[arg(long, default_value_t = 2)]
    pairs: usize,
    /// Messages circulating per pair (pingpong_compute).
    #[arg(long, default_value_t = 2)]
    tokens: usize,
    /// Simulated halo only: iterations whose receiver re-arms too late.
    #[arg(long, default_value_t = 0)]
    inject_faults: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let sizes = match parse_sizes(&cli.sizes) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let spec = BenchSpec {
        benchmark: cli.benchmark,
        sizes,
        iterations: cli.iters,
        warmup: cli.warmup,
        compute: cli.compute,
        transport: cli.transport,
        preset: cli.preset,
        seed: cli.seed,
    };
    let config = match cli.config.map(EndpointConfig::load).transpose() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        rank: cli.rank,
        config,
        ranks: cli.ranks,
        pairs: cli.pairs,
        tokens: cli.tokens,
        inject: cli.inject_faults,
        ..RunOptions::default()
    };
    match run_bench(&spec, &opts) {
        Ok(records) => {
            let mut ok = true;
            for r in &records {
                println!("{}", r.to_json());
                ok &= r.ok();
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("bench: integrity or warning invariant violated");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(2)
        }
    }
}
