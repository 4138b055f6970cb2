//! Benchmark dispatch and metric records.

use std::collections::BTreeSet;
use std::thread;

use serde::Serialize;
use thiserror::Error;
use unr::engine::{Endpoint, EngineError, EndpointConfig};
use unr::simnet::{sim_run, SimDelivery, SimError, SimEventTrace};
use unr::transport::{classify_level, ChannelCapability, TransportError};

use crate::payload::checksum;
use crate::simbench::{early_arrival_workload, halo_workload, notified_put, put_then_sync, PingPongCompute, SimParams};
use crate::skeleton::{self, SkeletonError, SkeletonParams, SkeletonStats};
use crate::spec::{BenchSpec, Benchmark, SpecError, TransportKind};
use crate::world::{loopback_world, WorldOptions};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{0}")]
    Unsupported(String),
}

/// Comparison run reported next to the main measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Baseline {
    pub name: &'static str,
    pub median_latency: f64,
    pub throughput: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub benchmark: Benchmark,
    pub size: u64,
    pub transport: TransportKind,
    pub level: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
    /// `us` for wall-clock runs, `virtual` for simulated ones.
    pub time_unit: &'static str,
    pub iterations: u64,
    pub median_latency: f64,
    pub avg_latency: f64,
    /// Completed iterations (round trips for ping-pongs) per time unit.
    pub throughput: f64,
    pub sync_warnings: u64,
    pub overflows: u64,
    pub checksum: u64,
    pub checksum_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    /// Relative gain over the baseline throughput, or latency reduction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement: Option<f64>,
}

impl MetricRecord {
    /// Integrity and warning invariants.
    pub fn ok(&self) -> bool {
        self.checksum_ok && self.sync_warnings == 0 && self.overflows == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Knobs that only some benchmarks read.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub rank: Option<u32>,
    pub config: Option<EndpointConfig>,
    /// Ranks in an in-process loopback world.
    pub ranks: u32,
    pub pairs: usize,
    pub tokens: usize,
    /// Number of deliberately late resets in the simulated fault-injection run.
    pub inject: u64,
    pub sim: SimParams,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            rank: None,
            config: None,
            ranks: 2,
            pairs: 2,
            tokens: 2,
            inject: 0,
            sim: SimParams::default(),
        }
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn preset(spec: &BenchSpec) -> Result<(ChannelCapability, u8), BenchError> {
    let cap = ChannelCapability::preset(&spec.preset)
        .ok_or_else(|| SpecError(format!("unknown preset {:?}", spec.preset)))?;
    Ok((cap, classify_level(&cap)?.as_u8()))
}

pub fn run_bench(spec: &BenchSpec, opts: &RunOptions) -> Result<Vec<MetricRecord>, BenchError> {
    spec.validate()?;
    match spec.transport {
        TransportKind::Simnet => run_simnet(spec, opts),
        TransportKind::Loopback => run_loopback(spec, opts),
        TransportKind::Tcp => run_tcp(spec, opts),
    }
}

fn skeleton_fn(b: Benchmark) -> Result<fn(&Endpoint, SkeletonParams) -> Result<SkeletonStats, SkeletonError>, BenchError> {
    Ok(match b {
        Benchmark::Pingpong => skeleton::pingpong,
        Benchmark::Halo2d => skeleton::halo2d,
        Benchmark::TransposePipeline => skeleton::transpose_pipeline,
        Benchmark::SendrecvPipeline => skeleton::sendrecv_pipeline,
        Benchmark::PingpongCompute | Benchmark::LatencyVsSync => {
            return Err(BenchError::Unsupported(format!("{b} runs only on the simnet transport")))
        }
    })
}

fn params(spec: &BenchSpec, size: u64) -> SkeletonParams {
    SkeletonParams {
        size,
        iters: spec.iterations,
        warmup: spec.warmup,
        compute: spec.compute,
        seed: spec.seed,
        ..SkeletonParams::default()
    }
}

fn wall_record(spec: &BenchSpec, size: u64, level: u8, rank: Option<u32>, stats: &[SkeletonStats]) -> MetricRecord {
    let lead = &stats[0];
    let avg = mean(&lead.samples_us);
    MetricRecord {
        benchmark: spec.benchmark,
        size,
        transport: spec.transport,
        level,
        rank,
        time_unit: "us",
        iterations: spec.iterations,
        median_latency: median(&lead.samples_us),
        avg_latency: avg,
        throughput: 1e6 / if spec.benchmark == Benchmark::Pingpong { 2.0 * avg } else { avg },
        sync_warnings: stats.iter().map(|s| s.warnings).sum(),
        overflows: stats.iter().map(|s| s.overflows + s.queue_overflows).sum(),
        checksum: stats.iter().fold(0, |a, s| a.rotate_left(7) ^ s.checksum),
        // every payload was compared with its golden value or the run aborted
        checksum_ok: stats.iter().all(|s| s.verified > 0 || s.samples_us.is_empty()),
        frames: None,
        baseline: None,
        improvement: None,
    }
}

fn run_loopback(spec: &BenchSpec, opts: &RunOptions) -> Result<Vec<MetricRecord>, BenchError> {
    let f = skeleton_fn(spec.benchmark)?;
    let (cap, level) = preset(spec)?;
    let mut out = Vec::new();
    for &size in &spec.sizes {
        let eps = loopback_world(opts.ranks, WorldOptions { cap, ..Default::default() })?;
        let p = params(spec, size);
        let stats = thread::scope(|s| {
            let hs: Vec<_> = eps.iter().map(|ep| s.spawn(move || f(ep, p))).collect();
            hs.into_iter()
                .map(|h| h.join().expect("skeleton thread panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?;
        out.push(wall_record(spec, size, level, None, &stats));
    }
    Ok(out)
}

fn run_tcp(spec: &BenchSpec, opts: &RunOptions) -> Result<Vec<MetricRecord>, BenchError> {
    let f = skeleton_fn(spec.benchmark)?;
    let mut cfg = opts
        .config
        .clone()
        .ok_or_else(|| BenchError::Unsupported("the tcp transport needs --config".into()))?;
    if let Some(r) = opts.rank {
        cfg.rank = r;
    }
    let ep = cfg.connect()?;
    let level = ep.channel_level(0).map_or(0, |l| l.as_u8());
    let mut out = Vec::new();
    for &size in &spec.sizes {
        let stats = f(&ep, params(spec, size))?;
        out.push(wall_record(spec, size, level, Some(ep.rank()), &[stats]));
    }
    Ok(out)
}

fn sim_params(spec: &BenchSpec, opts: &RunOptions) -> Result<(SimParams, u8), BenchError> {
    let (cap, level) = preset(spec)?;
    let mut p = opts.sim;
    p.seed = spec.seed;
    if cap.hw_atomic_apply {
        p.delivery = SimDelivery::InlineAtomic;
    }
    Ok((p, level))
}

fn sim_record(spec: &BenchSpec, size: u64, level: u8, trace: &SimEventTrace) -> MetricRecord {
    MetricRecord {
        benchmark: spec.benchmark,
        size,
        transport: TransportKind::Simnet,
        level,
        rank: None,
        time_unit: "virtual",
        iterations: spec.iterations,
        median_latency: f64::NAN,
        avg_latency: f64::NAN,
        throughput: f64::NAN,
        sync_warnings: trace.early_arrivals,
        overflows: trace.overflows,
        // payloads are not modelled; fingerprint the trace instead
        checksum: checksum(trace.to_json_lines().as_bytes()),
        checksum_ok: true,
        frames: Some(trace.frames),
        baseline: None,
        improvement: None,
    }
}

fn run_simnet(spec: &BenchSpec, opts: &RunOptions) -> Result<Vec<MetricRecord>, BenchError> {
    let (sim, level) = sim_params(spec, opts)?;
    let warmup = spec.warmup as usize;
    let mut out = Vec::new();
    for &size in &spec.sizes {
        let rec = match spec.benchmark {
            Benchmark::Pingpong => {
                let pp = PingPongCompute {
                    pairs: 1,
                    nics: 1,
                    tokens: 1,
                    bytes: size,
                    iters: spec.iterations,
                    compute: spec.compute,
                    shared: false,
                };
                let (x, trace) = pp.throughput(&sim, warmup)?;
                MetricRecord {
                    median_latency: 0.5 / x,
                    avg_latency: 0.5 / x,
                    throughput: x,
                    ..sim_record(spec, size, level, &trace)
                }
            }
            Benchmark::PingpongCompute => {
                if level < 2 {
                    return Err(BenchError::Unsupported(format!(
                        "preset {} (level {level}) cannot stripe one message over several NICs",
                        spec.preset
                    )));
                }
                let pp = PingPongCompute {
                    pairs: opts.pairs,
                    nics: 2,
                    tokens: opts.tokens,
                    bytes: size,
                    iters: spec.iterations,
                    compute: spec.compute,
                    shared: true,
                };
                let (x, trace) = pp.throughput(&sim, warmup)?;
                let (ex, ex_trace) = PingPongCompute { shared: false, ..pp }.throughput(&sim, warmup)?;
                let mut r = sim_record(spec, size, level, &trace);
                r.sync_warnings += ex_trace.early_arrivals;
                r.overflows += ex_trace.overflows;
                MetricRecord {
                    median_latency: 1.0 / x,
                    avg_latency: 1.0 / x,
                    throughput: x,
                    baseline: Some(Baseline {
                        name: "exclusive_nic",
                        median_latency: 1.0 / ex,
                        throughput: ex,
                        frames: Some(ex_trace.frames),
                    }),
                    improvement: Some(x / ex - 1.0),
                    ..r
                }
            }
            Benchmark::LatencyVsSync => {
                let n = notified_put(size, &sim)?;
                let b = put_then_sync(size, &sim)?;
                MetricRecord {
                    benchmark: spec.benchmark,
                    size,
                    transport: TransportKind::Simnet,
                    level,
                    rank: None,
                    time_unit: "virtual",
                    iterations: 1,
                    median_latency: n.latency,
                    avg_latency: n.latency,
                    throughput: 1.0 / n.latency,
                    sync_warnings: 0,
                    overflows: 0,
                    checksum: 0,
                    checksum_ok: true,
                    frames: Some(n.frames),
                    baseline: Some(Baseline {
                        name: "put_then_sync",
                        median_latency: b.latency,
                        throughput: 1.0 / b.latency,
                        frames: Some(b.frames),
                    }),
                    improvement: Some(1.0 - n.latency / b.latency),
                }
            }
            Benchmark::Halo2d => {
                let w = if opts.inject > 0 {
                    let injected: BTreeSet<u64> = (0..opts.inject).map(|k| k * spec.iterations / opts.inject).collect();
                    early_arrival_workload(spec.iterations, &injected, size, 100.0 * sim.base_latency)
                } else {
                    halo_workload(opts.ranks, size, spec.iterations, spec.compute)
                };
                let trace = sim_run(&sim.config(1), &w)?;
                let per_iter = trace.end_time / spec.iterations as f64;
                MetricRecord {
                    median_latency: per_iter,
                    avg_latency: per_iter,
                    throughput: 1.0 / per_iter,
                    ..sim_record(spec, size, level, &trace)
                }
            }
            b => return Err(BenchError::Unsupported(format!("{b} has no simnet model; use loopback or tcp"))),
        };
        out.push(rec);
    }
    Ok(out)
}
