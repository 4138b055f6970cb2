//! Benchmarks expressed as simnet workloads. All times are virtual.

use std::collections::BTreeSet;

use unr::simnet::{sim_run, ComputeModel, Op, SimConfig, SimDelivery, SimError, SimEventTrace, Transfer, Workload};

use crate::spec::ComputeSpec;

/// Label marked by the initiating side each time a token returns.
pub const RT_MARK: &str = "rt";
/// Label marked by a receiver when its notification fires.
pub const NOTIFY_MARK: &str = "notified";

/// NIC and agent parameters shared by all simnet benchmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub base_latency: f64,
    pub per_byte: f64,
    pub per_fragment_overhead: f64,
    pub poll_delay: f64,
    pub delivery: SimDelivery,
    pub seed: u64,
}

impl Default for SimParams {
    /// Microsecond units: 1.5 us latency, 10 GB/s per NIC.
    fn default() -> Self {
        Self {
            base_latency: 1.5,
            per_byte: 1e-4,
            per_fragment_overhead: 0.0,
            poll_delay: 0.0,
            delivery: SimDelivery::Queued,
            seed: 0,
        }
    }
}

impl SimParams {
    pub fn config(&self, nics: usize) -> SimConfig {
        let mut c = SimConfig::uniform(nics, self.base_latency, self.per_byte);
        c.per_fragment_overhead = self.per_fragment_overhead;
        c.poll_delay = self.poll_delay;
        c.delivery_mode = self.delivery;
        c.seed = self.seed;
        c
    }
}

fn compute_op(c: ComputeSpec) -> Option<Op> {
    match c {
        ComputeSpec::None => None,
        ComputeSpec::Fixed(t) => Some(Op::Compute(ComputeModel::Fixed(t))),
        ComputeSpec::Normal { mean, sd } => Some(Op::Compute(ComputeModel::Normal { mean, sd })),
    }
}

/// Concurrent ping-pongs between two nodes.
///
/// Pair `i` runs between rank `i` on node 0 and rank `pairs + i` on node 1.
/// Each pair circulates `tokens` messages; even tokens start on node 0.
/// Exclusive mode pins pair `i` to NIC `i % nics`; shared mode stripes every
/// message over all NICs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PingPongCompute {
    pub pairs: usize,
    pub nics: usize,
    pub tokens: usize,
    pub bytes: u64,
    pub iters: u64,
    pub compute: ComputeSpec,
    pub shared: bool,
}

impl PingPongCompute {
    pub fn workload(&self) -> Workload {
        let mut w = Workload::new();
        let p = self.pairs as u32;
        for i in 0..p {
            let (a, b) = (i, p + i);
            w.rank(a, 0).rank(b, 1);
            for j in 0..self.tokens {
                let name = format!("in{j}");
                w.signal(a, &name, 1).signal(b, &name, 1);
            }
            let send = |peer: u32, j: usize| {
                let t = Transfer::new(peer, self.bytes).remote(&format!("in{j}")).tag(j as u64);
                if self.shared {
                    Op::Put(t.striped(self.nics as u64, (0..self.nics).collect()))
                } else {
                    Op::Put(t.striped(1, vec![i as usize % self.nics]))
                }
            };
            for (me, peer, first) in [(a, b, 0), (b, a, 1)] {
                let mine = (0..self.tokens).filter(|j| j % 2 == first);
                let theirs = (0..self.tokens).filter(|j| j % 2 != first);
                let mut prog: Vec<Op> = mine.clone().map(|j| send(peer, j)).collect();
                let mut body = Vec::new();
                for j in theirs.chain(mine) {
                    let name = format!("in{j}");
                    body.push(Op::Wait(name.clone()));
                    body.push(Op::Reset(name));
                    if me == a {
                        body.push(Op::Mark(RT_MARK.into()));
                    }
                    body.extend(compute_op(self.compute));
                    body.push(send(peer, j));
                }
                prog.push(Op::Loop(self.iters, body));
                w.program(me, prog);
            }
        }
        w
    }

    /// Round trips per unit time per pair, skipping the first `warmup` marks.
    pub fn throughput(&self, params: &SimParams, warmup: usize) -> Result<(f64, SimEventTrace), SimError> {
        let trace = sim_run(&params.config(self.nics), &self.workload())?;
        let x = trace.throughput(RT_MARK, warmup)? / self.pairs as f64;
        Ok((x, trace))
    }

    /// Shared over exclusive throughput, minus one.
    pub fn improvement(&self, params: &SimParams, warmup: usize) -> Result<f64, SimError> {
        let ex = Self { shared: false, ..*self }.throughput(params, warmup)?.0;
        let sh = Self { shared: true, ..*self }.throughput(params, warmup)?.0;
        Ok(sh / ex - 1.0)
    }
}

/// Receiver notification latency and the frames it took.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotifyLatency {
    pub latency: f64,
    pub frames: u64,
}

fn notify_latency(w: &Workload, params: &SimParams) -> Result<NotifyLatency, SimError> {
    let trace = sim_run(&params.config(1), w)?;
    let latency = *trace
        .mark_times(NOTIFY_MARK)
        .first()
        .ok_or(SimError::Throughput { label: NOTIFY_MARK.into(), found: 0, need: 1 })?;
    Ok(NotifyLatency { latency, frames: trace.frames })
}

/// One put whose arrival notifies the receiver directly.
pub fn notified_put(bytes: u64, params: &SimParams) -> Result<NotifyLatency, SimError> {
    let mut w = Workload::new();
    w.rank(0, 0).rank(1, 1).signal(1, "in", 1);
    w.program(0, vec![Op::Put(Transfer::new(1, bytes).remote("in"))]);
    w.program(1, vec![Op::Wait("in".into()), Op::Mark(NOTIFY_MARK.into())]);
    notify_latency(&w, params)
}

/// A silent put, a wait for local completion, then an empty sync message.
pub fn put_then_sync(bytes: u64, params: &SimParams) -> Result<NotifyLatency, SimError> {
    let mut w = Workload::new();
    w.rank(0, 0).rank(1, 1).signal(0, "done", 1).signal(1, "sync", 1);
    w.program(
        0,
        vec![
            Op::Put(Transfer::new(1, bytes).local("done")),
            Op::Wait("done".into()),
            Op::Put(Transfer::new(1, 0).remote("sync")),
        ],
    );
    w.program(1, vec![Op::Wait("sync".into()), Op::Mark(NOTIFY_MARK.into())]);
    notify_latency(&w, params)
}

/// Double-buffered neighbour exchange on a line of `ranks` nodes.
///
/// Each iteration puts one halo to every neighbour into buffer `iter % 2`,
/// waits for the matching receive signal and re-arms it before computing.
pub fn halo_workload(ranks: u32, bytes: u64, iters: u64, compute: ComputeSpec) -> Workload {
    let mut w = Workload::new();
    for r in 0..ranks {
        let nbrs: Vec<u32> = [r.checked_sub(1), Some(r + 1).filter(|&n| n < ranks)]
            .into_iter()
            .flatten()
            .collect();
        w.rank(r, r as usize);
        for b in 0..2 {
            w.signal(r, &format!("recv{b}"), nbrs.len().max(1) as i64);
        }
        w.signal(r, "sent", nbrs.len().max(1) as i64);
        let half = |b: u32| {
            let recv = format!("recv{b}");
            let mut ops = Vec::new();
            for &n in &nbrs {
                ops.push(Op::Put(Transfer::new(n, bytes).remote(&recv).local("sent").tag(r as u64)));
            }
            if !nbrs.is_empty() {
                ops.push(Op::Wait("sent".into()));
                ops.push(Op::Reset("sent".into()));
                ops.push(Op::Wait(recv.clone()));
                ops.push(Op::Reset(recv));
            }
            ops.push(Op::Mark("iter".into()));
            ops.extend(compute_op(compute));
            ops
        };
        let mut prog = vec![Op::Loop(iters / 2, [half(0), half(1)].concat())];
        if iters % 2 == 1 {
            prog.extend(half(0));
        }
        w.program(r, prog);
    }
    w
}

/// Request/acknowledge loop in which the receiver re-arms its signal late on
/// the `injected` iterations, after the sender has already issued an extra
/// put. Each injected iteration produces exactly one early arrival.
pub fn early_arrival_workload(iters: u64, injected: &BTreeSet<u64>, bytes: u64, delay: f64) -> Workload {
    let mut w = Workload::new();
    w.rank(0, 0).rank(1, 1).signal(0, "ack", 1).signal(1, "in", 1);
    let mut p0 = Vec::new();
    let mut p1 = Vec::new();
    for i in 0..iters {
        let bad = injected.contains(&i);
        p0.push(Op::Put(Transfer::new(1, bytes).remote("in").tag(i)));
        if bad {
            p0.push(Op::Put(Transfer::new(1, bytes).remote("in").tag(i)));
        }
        p0.push(Op::Wait("ack".into()));
        p0.push(Op::Reset("ack".into()));

        p1.push(Op::Wait("in".into()));
        if bad {
            p1.push(Op::Compute(ComputeModel::Fixed(delay)));
        }
        p1.push(Op::Reset("in".into()));
        p1.push(Op::Put(Transfer::new(0, 0).remote("ack")));
    }
    w.program(0, p0).program(1, p1);
    w
}
