//! Communication skeletons run on live endpoints.
//!
//! Every skeleton fills its outgoing buffers with a pattern derived from
//! `(rank, iteration, lane)` and checks what it receives against the pattern
//! the sender must have used. Receive buffers and signals alternate between
//! two sets so that each iteration's traffic is the pre-synchronization for
//! the one after next.

use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;
use unr::engine::{Endpoint, EngineError, SignalHandle, TransferPlan};
use unr::memory::{Rank, RegisteredRegion, SharedBuffer};
use unr::transport::TransportError;

use crate::convert::{convert_alltoallv, convert_sendrecv, BufSpec, ConvertError, ConvertSession, Geometry};
use crate::payload::{checksum, fill, golden, stream_seed};
use crate::spec::ComputeSpec;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("iteration {iter}: timed out waiting for {what}")]
    Timeout { iter: u64, what: &'static str },
    #[error("iteration {iter}: payload from rank {from} (lane {lane}) has checksum {found:#x}, expected {expected:#x}")]
    Integrity { iter: u64, from: Rank, lane: u64, found: u64, expected: u64 },
    #[error("{0}")]
    Topology(String),
}

#[derive(Debug, Clone, Copy)]
pub struct SkeletonParams {
    /// Bytes per message (per neighbour, per peer block).
    pub size: u64,
    pub iters: u64,
    pub warmup: u64,
    pub compute: ComputeSpec,
    pub seed: u64,
    pub timeout: Duration,
}

impl Default for SkeletonParams {
    fn default() -> Self {
        Self {
            size: 4096,
            iters: 100,
            warmup: 10,
            compute: ComputeSpec::None,
            seed: 0,
            timeout: Duration::from_secs(20),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SkeletonStats {
    /// Wall-clock microseconds per measured iteration (half round trip for ping-pong).
    pub samples_us: Vec<f64>,
    /// Combined checksum of every verified payload.
    pub checksum: u64,
    pub verified: u64,
    pub warnings: u64,
    pub overflows: u64,
    pub queue_overflows: u64,
}

struct Ctx<'a> {
    ep: &'a Endpoint,
    p: SkeletonParams,
    rng: StdRng,
    stats: SkeletonStats,
}

impl<'a> Ctx<'a> {
    fn new(ep: &'a Endpoint, p: SkeletonParams) -> Self {
        Self {
            ep,
            p,
            rng: StdRng::seed_from_u64(p.seed ^ (u64::from(ep.rank()) << 32)),
            stats: SkeletonStats::default(),
        }
    }

    fn wait(&mut self, s: &SignalHandle, iter: u64, what: &'static str) -> Result<(), SkeletonError> {
        let o = s.wait(Some(self.p.timeout)).map_err(|_| SkeletonError::Timeout { iter, what })?;
        if o.overflow {
            self.stats.overflows += 1;
        }
        s.reset();
        Ok(())
    }

    fn compute(&mut self) {
        let us = match self.p.compute {
            ComputeSpec::None => return,
            ComputeSpec::Fixed(t) => t,
            ComputeSpec::Normal { mean, sd } => Normal::new(mean, sd)
                .map(|d| d.sample(&mut self.rng))
                .unwrap_or(mean)
                .max(0.0),
        };
        let end = Instant::now() + Duration::from_secs_f64(us * 1e-6);
        while Instant::now() < end {
            std::hint::spin_loop();
        }
    }

    fn verify(&mut self, region: &RegisteredRegion, offset: u64, len: u64, iter: u64, from: Rank, lane: u64) -> Result<(), SkeletonError> {
        let found = region.buffer().with_slice(|s| checksum(&s[offset as usize..(offset + len) as usize]));
        let expected = golden(stream_seed(from, iter, lane), len as usize);
        if found != expected {
            return Err(SkeletonError::Integrity { iter, from, lane, found, expected });
        }
        self.stats.checksum = self.stats.checksum.rotate_left(5) ^ found;
        self.stats.verified += 1;
        Ok(())
    }

    fn fill(&self, region: &RegisteredRegion, offset: u64, len: u64, iter: u64, lane: u64) {
        let seed = stream_seed(self.ep.rank(), iter, lane);
        let buf = region.buffer();
        let mut tmp = vec![0u8; len as usize];
        fill(seed, 0, &mut tmp);
        buf.write(offset as usize, &tmp).expect("fill stays inside the registered buffer");
    }

    fn sample(&mut self, iter: u64, t: Duration, div: f64) {
        if iter >= self.p.warmup {
            self.stats.samples_us.push(t.as_secs_f64() * 1e6 / div);
        }
    }

    fn barrier(&self) -> Result<(), SkeletonError> {
        if let Some(b) = self.ep.bootstrap() {
            b.barrier(self.p.timeout)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SkeletonStats, SkeletonError> {
        self.barrier()?;
        let d = self.ep.diagnostics();
        self.stats.warnings = d.total();
        self.stats.queue_overflows = self.ep.queue_overflows();
        Ok(self.stats)
    }
}

fn world_size(ep: &Endpoint) -> Result<u32, SkeletonError> {
    ep.bootstrap()
        .map(|b| b.world_size())
        .ok_or_else(|| SkeletonError::Topology("skeletons need a bootstrap exchange".into()))
}

fn region(ep: &Endpoint, len: u64) -> Result<RegisteredRegion, SkeletonError> {
    Ok(ep.register(&SharedBuffer::new(len.max(1) as usize))?)
}

/// Two ranks bounce one message; samples are half round trips seen by rank 0.
pub fn pingpong(ep: &Endpoint, p: SkeletonParams) -> Result<SkeletonStats, SkeletonError> {
    if world_size(ep)? != 2 {
        return Err(SkeletonError::Topology("ping-pong needs exactly two ranks".into()));
    }
    let me = ep.rank();
    let peer = 1 - me;
    let mut cx = Ctx::new(ep, p);
    let send = region(ep, p.size)?;
    let recv = region(ep, p.size)?;
    let got = ep.signal_create(1)?;
    let sent = ep.signal_create(1)?;
    let mut s = ConvertSession::new(ep);
    s.irecv(&recv, 0, p.size, 1, peer, 0, &got)?;
    s.isend(&send, 0, p.size, 1, peer, 0, Some(&sent))?;
    let plan = ep.plan_record(s.commit()?)?;
    cx.barrier()?;

    cx.fill(&send, 0, p.size, 0, 0);
    for i in 0..p.iters {
        if me == 0 {
            let t0 = Instant::now();
            ep.plan_start(&plan);
            cx.wait(&got, i, "pong")?;
            cx.sample(i, t0.elapsed(), 2.0);
            cx.wait(&sent, i, "ping send completion")?;
            cx.verify(&recv, 0, p.size, i, peer, 0)?;
        } else {
            cx.wait(&got, i, "ping")?;
            cx.verify(&recv, 0, p.size, i, peer, 0)?;
            ep.plan_start(&plan);
            cx.wait(&sent, i, "pong send completion")?;
        }
        cx.compute();
        cx.fill(&send, 0, p.size, i + 1, 0);
    }
    cx.finish()
}

/// Process grid `px * py` closest to square.
pub fn grid(n: u32) -> (u32, u32) {
    let py = (1..=n).filter(|d| n % d == 0 && d * d <= n).max().unwrap_or(1);
    (n / py, py)
}

/// West, east, south, north neighbours on a non-periodic grid.
pub fn halo_neighbours(rank: Rank, n: u32) -> [Option<Rank>; 4] {
    let (px, py) = grid(n);
    let (x, y) = (rank % px, rank / px);
    [
        (x > 0).then(|| rank - 1),
        (x + 1 < px).then(|| rank + 1),
        (y > 0).then(|| rank - px),
        (y + 1 < py).then(|| rank + px),
    ]
}

const fn opposite(d: usize) -> usize {
    d ^ 1
}

/// Double-buffered 2D halo exchange.
pub fn halo2d(ep: &Endpoint, p: SkeletonParams) -> Result<SkeletonStats, SkeletonError> {
    let n = world_size(ep)?;
    let me = ep.rank();
    let nbrs = halo_neighbours(me, n);
    let count = nbrs.iter().flatten().count() as i64;
    let mut cx = Ctx::new(ep, p);
    let sz = p.size;
    let send = region(ep, 4 * sz)?;
    let recv = region(ep, 8 * sz)?;
    let slot = |b: u64, d: usize| (b * 4 + d as u64) * sz;
    if count == 0 {
        return cx.finish();
    }
    let got = [ep.signal_create(count)?, ep.signal_create(count)?];
    let sent = ep.signal_create(count)?;
    let mut plans: Vec<TransferPlan> = Vec::new();
    for b in 0..2u64 {
        let mut s = ConvertSession::new(ep);
        for (d, nb) in nbrs.iter().enumerate() {
            if let Some(nb) = *nb {
                s.irecv(&recv, slot(b, d), sz, 1, nb, b * 4 + d as u64, &got[b as usize])?;
                s.isend(&send, d as u64 * sz, sz, 1, nb, b * 4 + opposite(d) as u64, Some(&sent))?;
            }
        }
        plans.push(ep.plan_record(s.commit()?)?);
    }
    cx.barrier()?;

    for i in 0..p.iters {
        let b = i % 2;
        let t0 = Instant::now();
        for (d, nb) in nbrs.iter().enumerate() {
            if nb.is_some() {
                cx.fill(&send, d as u64 * sz, sz, i, d as u64);
            }
        }
        ep.plan_start(&plans[b as usize]);
        cx.wait(&sent, i, "halo send completion")?;
        cx.wait(&got[b as usize], i, "halos")?;
        for (d, nb) in nbrs.iter().enumerate() {
            if let Some(nb) = *nb {
                cx.verify(&recv, slot(b, d), sz, i, nb, opposite(d) as u64)?;
            }
        }
        cx.compute();
        cx.sample(i, t0.elapsed(), 1.0);
    }
    cx.finish()
}

const SLABS: u64 = 4;

/// Pipelined all-to-all transpose: each slab is sent once it is filled and
/// consumed as soon as it lands.
pub fn transpose_pipeline(ep: &Endpoint, p: SkeletonParams) -> Result<SkeletonStats, SkeletonError> {
    let n = world_size(ep)?;
    let me = ep.rank();
    let group: Vec<Rank> = (0..n).collect();
    let sz = p.size;
    let mut cx = Ctx::new(ep, p);
    let send = region(ep, n as u64 * sz)?;
    let recv = [region(ep, n as u64 * sz)?, region(ep, n as u64 * sz)?];
    let counts = vec![sz; n as usize];
    let displs: Vec<u64> = (0..n as u64).map(|q| q * sz).collect();
    let geo = |r| Geometry { region: r, counts: &counts, displs: &displs };
    let a2a = [
        convert_alltoallv(ep, geo(&send), geo(&recv[0]), 1, &group, SLABS)?,
        convert_alltoallv(ep, geo(&send), geo(&recv[1]), 1, &group, SLABS)?,
    ];
    cx.barrier()?;

    for i in 0..p.iters {
        let b = (i % 2) as usize;
        let t0 = Instant::now();
        for (s, slab) in a2a[b].slabs.iter().enumerate() {
            for q in 0..n as u64 {
                let (off, len) = crate::convert::slab_range(sz, SLABS, s as u64);
                if len > 0 {
                    let seed = stream_seed(me, i, q);
                    let mut tmp = vec![0u8; len as usize];
                    fill(seed, off, &mut tmp);
                    send.write(q * sz + off, &tmp).map_err(EngineError::from)?;
                }
            }
            slab.start(ep)?;
        }
        for slab in &a2a[b].slabs {
            if let Some(r) = &slab.recv {
                cx.wait(r, i, "transpose slab")?;
            }
        }
        for slab in &a2a[b].slabs {
            if let Some(s) = &slab.sent {
                cx.wait(s, i, "transpose send completion")?;
            }
        }
        for q in 0..n {
            cx.verify(&recv[b], q as u64 * sz, sz, i, q, me as u64)?;
        }
        cx.compute();
        cx.sample(i, t0.elapsed(), 1.0);
    }
    cx.finish()
}

/// Ring exchange with both neighbours through converted send/receive pairs.
pub fn sendrecv_pipeline(ep: &Endpoint, p: SkeletonParams) -> Result<SkeletonStats, SkeletonError> {
    let n = world_size(ep)?;
    let me = ep.rank();
    let up = (me + n - 1) % n;
    let down = (me + 1) % n;
    let sz = p.size;
    let mut cx = Ctx::new(ep, p);
    // lane 0 travels downwards, lane 1 upwards
    let send = region(ep, 2 * sz)?;
    let recv = region(ep, 4 * sz)?;
    let got = [ep.signal_create(2)?, ep.signal_create(2)?];
    let sent = ep.signal_create(2)?;
    let mut plans = Vec::new();
    for b in 0..2u64 {
        let spec = |r, off| BufSpec { region: r, offset: off, count: sz };
        let downward = convert_sendrecv(ep, spec(&send, 0), down, spec(&recv, (b * 2) * sz), up, 1, b * 2, Some(&sent), &got[b as usize])?;
        let upward = convert_sendrecv(ep, spec(&send, sz), up, spec(&recv, (b * 2 + 1) * sz), down, 1, b * 2 + 1, Some(&sent), &got[b as usize])?;
        plans.push(ep.plan_record(vec![downward, upward])?);
    }
    cx.barrier()?;

    for i in 0..p.iters {
        let b = i % 2;
        let t0 = Instant::now();
        cx.fill(&send, 0, sz, i, 0);
        cx.fill(&send, sz, sz, i, 1);
        ep.plan_start(&plans[b as usize]);
        cx.wait(&sent, i, "ring send completion")?;
        cx.wait(&got[b as usize], i, "ring neighbours")?;
        cx.verify(&recv, (b * 2) * sz, sz, i, up, 0)?;
        cx.verify(&recv, (b * 2 + 1) * sz, sz, i, down, 1)?;
        cx.compute();
        cx.sample(i, t0.elapsed(), 1.0);
    }
    cx.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(grid(1), (1, 1));
        assert_eq!(grid(2), (2, 1));
        assert_eq!(grid(6), (3, 2));
        assert_eq!(grid(16), (4, 4));
        assert_eq!(halo_neighbours(0, 2), [None, Some(1), None, None]);
        assert_eq!(halo_neighbours(4, 6), [Some(3), Some(5), Some(1), None]);
    }

    #[test]
    fn neighbour_relation_is_symmetric() {
        for n in 1..=12 {
            for r in 0..n {
                for (d, nb) in halo_neighbours(r, n).iter().enumerate() {
                    if let Some(nb) = nb {
                        assert_eq!(halo_neighbours(*nb, n)[opposite(d)], Some(r));
                    }
                }
            }
        }
    }
}
