use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::stripe;
use crate::memory::Rank;
use crate::signal::{encode_addends, Addend, LayoutConfig, Signal, SignalId};

use super::script::{ComputeModel, Op, Transfer, Workload};
use super::trace::{SimEventTrace, TraceKind, TraceRecord};
use super::{SimConfig, SimDelivery, SimError};

#[derive(Debug, Clone, Copy)]
enum Instr {
    LoopStart { count: u64, end: usize },
    LoopEnd { start: usize },
    Put(usize),
    Get(usize),
    Wait(usize),
    Reset(usize),
    Compute(ComputeModel),
    Barrier,
    Mark(usize),
}

#[derive(Debug, Clone)]
struct Resolved {
    peer: usize,
    bytes: u64,
    local: Option<usize>,
    remote: Option<usize>,
    frags: u64,
    nics: Vec<usize>,
    tag: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PState {
    Ready,
    Busy,
    Waiting(usize),
    Barrier,
    Done,
}

struct Proc {
    rank: Rank,
    node: usize,
    code: Vec<Instr>,
    transfers: Vec<Resolved>,
    labels: Vec<String>,
    pc: usize,
    loops: Vec<u64>,
    state: PState,
    rng: ChaCha8Rng,
    signals: Vec<Signal>,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Resume(usize),
    /// A fragment's effect reaches `at`; `frame` is false for local completions.
    Land { at: usize, sig: Option<usize>, addend: i64, frame: bool, tag: u64 },
    Apply { at: usize, sig: usize, addend: i64 },
    /// A GET request reaches its target.
    Serve { target: usize, requester: usize, nic: usize, len: u64, local: Option<usize>, remote: Option<usize>, addend: i64, tag: u64 },
}

struct Scheduled {
    time: f64,
    key: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest
    fn cmp(&self, o: &Self) -> Ordering {
        o.time
            .total_cmp(&self.time)
            .then(o.key.cmp(&self.key))
            .then(o.seq.cmp(&self.seq))
    }
}

fn compile(w: &Workload, rank_idx: &HashMap<Rank, usize>, cfg: &SimConfig, r: Rank) -> Result<(Vec<Instr>, Vec<Resolved>, Vec<String>), SimError> {
    struct Out<'a> {
        w: &'a Workload,
        idx: &'a HashMap<Rank, usize>,
        nics: usize,
        r: Rank,
        code: Vec<Instr>,
        transfers: Vec<Resolved>,
        labels: Vec<String>,
    }
    impl Out<'_> {
        fn sig(&self, rank: Rank, name: &str) -> Result<usize, SimError> {
            self.w
                .signal_id(rank, name)
                .map(|i| i as usize)
                .ok_or_else(|| SimError::Workload(format!("undeclared signal {name:?} on rank {rank}")))
        }

        fn transfer(&mut self, t: &Transfer) -> Result<usize, SimError> {
            let peer = *self
                .idx
                .get(&t.peer)
                .ok_or_else(|| SimError::Workload(format!("undeclared rank {}", t.peer)))?;
            let nics = if t.nics.is_empty() { vec![0] } else { t.nics.clone() };
            if let Some(n) = nics.iter().find(|&&n| n >= self.nics) {
                return Err(SimError::Workload(format!("rank {} uses NIC {n} of {}", self.r, self.nics)));
            }
            self.transfers.push(Resolved {
                peer,
                bytes: t.bytes,
                local: t.local.as_deref().map(|s| self.sig(self.r, s)).transpose()?,
                remote: t.remote.as_deref().map(|s| self.sig(t.peer, s)).transpose()?,
                frags: t.frags.max(1),
                nics,
                tag: t.tag,
            });
            Ok(self.transfers.len() - 1)
        }

        fn ops(&mut self, ops: &[Op]) -> Result<(), SimError> {
            for op in ops {
                let ins = match op {
                    Op::Put(t) => Instr::Put(self.transfer(t)?),
                    Op::Get(t) => Instr::Get(self.transfer(t)?),
                    Op::Wait(s) => Instr::Wait(self.sig(self.r, s)?),
                    Op::Reset(s) => Instr::Reset(self.sig(self.r, s)?),
                    Op::Compute(m) => Instr::Compute(*m),
                    Op::Barrier => Instr::Barrier,
                    Op::Mark(l) => {
                        let i = match self.labels.iter().position(|x| x == l) {
                            Some(i) => i,
                            None => {
                                self.labels.push(l.clone());
                                self.labels.len() - 1
                            }
                        };
                        Instr::Mark(i)
                    }
                    Op::Loop(n, body) => {
                        let start = self.code.len();
                        self.code.push(Instr::LoopStart { count: *n, end: 0 });
                        self.ops(body)?;
                        let end = self.code.len();
                        self.code.push(Instr::LoopEnd { start });
                        self.code[start] = Instr::LoopStart { count: *n, end };
                        continue;
                    }
                };
                self.code.push(ins);
            }
            Ok(())
        }
    }
    let mut o = Out {
        w,
        idx: rank_idx,
        nics: cfg.nics_per_node,
        r,
        code: Vec::new(),
        transfers: Vec::new(),
        labels: Vec::new(),
    };
    o.ops(&w.ranks[&r].program)?;
    Ok((o.code, o.transfers, o.labels))
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    layout: LayoutConfig,
    procs: Vec<Proc>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    nic_free: HashMap<(usize, usize), f64>,
    net_rng: ChaCha8Rng,
    out: SimEventTrace,
}

impl Sim<'_> {
    fn schedule_keyed(&mut self, time: f64, key: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            key,
            seq: self.seq,
            ev,
        });
    }

    fn schedule(&mut self, time: f64, ev: Ev) {
        let key = if self.cfg.reorder { self.net_rng.gen() } else { 0 };
        self.schedule_keyed(time, key, ev);
    }

    fn record(&mut self, p: usize, kind: TraceKind, signal: Option<usize>, counter_after: Option<i64>, detail: Option<String>) {
        self.out.records.push(TraceRecord {
            time: self.now,
            endpoint: self.procs[p].rank,
            kind,
            signal: signal.map(|s| s as u64),
            counter_after,
            detail,
        });
    }

    /// Send `len` bytes through `nic` of `node`; returns (transmission end, arrival).
    fn transmit(&mut self, node: usize, nic: usize, len: u64) -> (f64, f64) {
        let m = self.cfg.nics[nic];
        let free = self.nic_free.entry((node, nic)).or_insert(0.0);
        let start = free.max(self.now);
        let end = start + self.cfg.per_fragment_overhead + m.per_byte * len as f64;
        *free = end;
        let mut arrive = end + m.base_latency;
        if self.cfg.reorder && self.cfg.jitter > 0.0 {
            arrive += self.net_rng.gen_range(0.0..self.cfg.jitter);
        }
        (end, arrive)
    }

    fn satisfied(&self, p: usize, s: usize) -> bool {
        let sig = &self.procs[p].signals[s];
        let c = sig.counter();
        c == 0 || sig.probe() || self.layout.overflow_set(c)
    }

    fn issue(&mut self, p: usize, t: usize, get: bool) -> Result<(), SimError> {
        let tr = self.procs[p].transfers[t].clone();
        let node = self.procs[p].node;
        let segs = stripe::stripe(tr.bytes, &tr.nics, tr.frags, self.layout.max_fragments());
        let addends = encode_addends(segs.len() as u64, self.layout).map_err(|e| SimError::Workload(e.to_string()))?;
        self.record(p, TraceKind::Issue, tr.local, None, Some(tr.tag.to_string()));
        for (i, seg) in segs.iter().enumerate() {
            let addend = addends.get(i as u64).0;
            if get {
                let (_, at) = self.transmit(node, seg.channel, 0);
                self.schedule(
                    at,
                    Ev::Serve {
                        target: tr.peer,
                        requester: p,
                        nic: seg.channel,
                        len: seg.len,
                        local: tr.local,
                        remote: tr.remote,
                        addend,
                        tag: tr.tag,
                    },
                );
            } else {
                let (_, at) = self.transmit(node, seg.channel, seg.len);
                self.schedule(at, Ev::Land { at: tr.peer, sig: tr.remote, addend, frame: true, tag: tr.tag });
                if tr.local.is_some() {
                    self.schedule(at, Ev::Land { at: p, sig: tr.local, addend, frame: false, tag: tr.tag });
                }
            }
        }
        Ok(())
    }

    fn check_barrier(&mut self) {
        let active: Vec<usize> = (0..self.procs.len())
            .filter(|&i| self.procs[i].state != PState::Done)
            .collect();
        if active.is_empty() || !active.iter().all(|&i| self.procs[i].state == PState::Barrier) {
            return;
        }
        for i in active {
            self.procs[i].state = PState::Ready;
            self.schedule(self.now, Ev::Resume(i));
        }
    }

    fn run_proc(&mut self, p: usize) -> Result<(), SimError> {
        self.procs[p].state = PState::Ready;
        loop {
            let pc = self.procs[p].pc;
            let Some(&ins) = self.procs[p].code.get(pc) else {
                self.procs[p].state = PState::Done;
                self.record(p, TraceKind::Finish, None, None, None);
                self.check_barrier();
                return Ok(());
            };
            let proc = &mut self.procs[p];
            proc.pc += 1;
            match ins {
                Instr::LoopStart { count, end } => {
                    if count == 0 {
                        proc.pc = end + 1;
                    } else {
                        proc.loops.push(count);
                    }
                }
                Instr::LoopEnd { start } => {
                    let left = proc.loops.last_mut().expect("loop stack");
                    *left -= 1;
                    if *left > 0 {
                        proc.pc = start + 1;
                    } else {
                        proc.loops.pop();
                    }
                }
                Instr::Put(t) => self.issue(p, t, false)?,
                Instr::Get(t) => self.issue(p, t, true)?,
                Instr::Wait(s) => {
                    if !self.satisfied(p, s) {
                        let proc = &mut self.procs[p];
                        proc.pc -= 1;
                        proc.state = PState::Waiting(s);
                        return Ok(());
                    }
                    let sig = &self.procs[p].signals[s];
                    let c = sig.counter();
                    let overflow = self.layout.overflow_set(c) || sig.overflow_seen();
                    self.record(p, TraceKind::WaitDone, Some(s), Some(c), None);
                    if overflow {
                        self.out.overflows += 1;
                        self.record(p, TraceKind::Overflow, Some(s), Some(c), None);
                    }
                }
                Instr::Reset(s) => {
                    let o = proc.signals[s].reset();
                    let n = proc.signals[s].num_event();
                    self.record(p, TraceKind::Reset, Some(s), Some(n), None);
                    if o.warned {
                        self.out.early_arrivals += 1;
                        self.record(p, TraceKind::EarlyArrival, Some(s), Some(o.previous), None);
                    }
                }
                Instr::Compute(m) => {
                    let t = match m {
                        ComputeModel::Fixed(t) => t,
                        ComputeModel::Normal { mean, sd } if sd > 0.0 => Normal::new(mean, sd)
                            .map_err(|e| SimError::Workload(e.to_string()))?
                            .sample(&mut proc.rng)
                            .max(0.0),
                        ComputeModel::Normal { mean, .. } => mean.max(0.0),
                    };
                    if t > 0.0 {
                        proc.state = PState::Busy;
                        self.schedule(self.now + t, Ev::Resume(p));
                        return Ok(());
                    }
                }
                Instr::Barrier => {
                    proc.state = PState::Barrier;
                    self.check_barrier();
                    return Ok(());
                }
                Instr::Mark(l) => {
                    let label = proc.labels[l].clone();
                    self.record(p, TraceKind::Mark, None, None, Some(label));
                }
            }
        }
    }

    fn apply(&mut self, at: usize, s: usize, addend: i64) {
        let o = self.procs[at].signals[s].apply(Addend(addend));
        self.record(at, TraceKind::Apply, Some(s), Some(o.new_counter), None);
        if o.just_triggered {
            self.record(at, TraceKind::Trigger, Some(s), Some(0), None);
        }
        if self.procs[at].state == PState::Waiting(s) && self.satisfied(at, s) {
            self.procs[at].state = PState::Ready;
            self.schedule(self.now, Ev::Resume(at));
        }
    }

    fn land(&mut self, at: usize, sig: Option<usize>, addend: i64, frame: bool, tag: u64) {
        if frame {
            self.out.frames += 1;
            self.record(at, TraceKind::Deliver, sig, None, Some(tag.to_string()));
        }
        let Some(s) = sig else { return };
        match self.cfg.delivery_mode {
            SimDelivery::InlineAtomic => self.apply(at, s, addend),
            // key 0 keeps applies in arrival order
            SimDelivery::Queued => self.schedule_keyed(self.now + self.cfg.poll_delay, 0, Ev::Apply { at, sig: s, addend }),
        }
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Resume(p) => {
                if self.procs[p].state != PState::Done {
                    self.run_proc(p)?;
                }
            }
            Ev::Land { at, sig, addend, frame, tag } => self.land(at, sig, addend, frame, tag),
            Ev::Apply { at, sig, addend } => self.apply(at, sig, addend),
            Ev::Serve { target, requester, nic, len, local, remote, addend, tag } => {
                self.out.frames += 1;
                self.record(target, TraceKind::Deliver, None, None, Some(tag.to_string()));
                let node = self.procs[target].node;
                let (sent, at) = self.transmit(node, nic, len);
                if remote.is_some() {
                    self.schedule(sent, Ev::Land { at: target, sig: remote, addend, frame: false, tag });
                }
                self.schedule(at, Ev::Land { at: requester, sig: local, addend, frame: true, tag });
            }
        }
        Ok(())
    }
}

/// Execute `workload` to quiescence (or the configured horizon).
pub fn sim_run(cfg: &SimConfig, workload: &Workload) -> Result<SimEventTrace, SimError> {
    cfg.validate()?;
    workload.validate()?;
    let layout = LayoutConfig::new(cfg.layout_bits).map_err(|e| SimError::Config(e.to_string()))?;
    let rank_idx: HashMap<Rank, usize> = workload.ranks.keys().enumerate().map(|(i, &r)| (r, i)).collect();
    let mut procs = Vec::new();
    for (&r, spec) in &workload.ranks {
        let (code, transfers, labels) = compile(workload, &rank_idx, cfg, r)?;
        let signals = spec
            .signals
            .iter()
            .enumerate()
            .map(|(i, (name, n))| {
                Signal::new(SignalId(i as u64), *n, layout)
                    .map_err(|e| SimError::Workload(format!("rank {r} signal {name:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64 + 1);
        procs.push(Proc {
            rank: r,
            node: spec.node,
            code,
            transfers,
            labels,
            pc: 0,
            loops: Vec::new(),
            state: PState::Ready,
            rng,
            signals,
        });
    }
    let mut sim = Sim {
        cfg,
        layout,
        procs,
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        nic_free: HashMap::new(),
        net_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        out: SimEventTrace::default(),
    };
    for p in 0..sim.procs.len() {
        sim.schedule_keyed(0.0, 0, Ev::Resume(p));
    }
    let mut cut = false;
    while let Some(s) = sim.heap.pop() {
        if cfg.horizon.is_some_and(|h| s.time > h) {
            cut = true;
            break;
        }
        sim.now = s.time;
        sim.handle(s.ev)?;
    }
    sim.out.end_time = sim.now;
    if !cut {
        let blocked: Vec<(Rank, String)> = sim
            .procs
            .iter()
            .filter_map(|p| match p.state {
                PState::Waiting(s) => Some((p.rank, format!("wait on signal {s}"))),
                PState::Barrier => Some((p.rank, "barrier".to_string())),
                _ => None,
            })
            .collect();
        if !blocked.is_empty() {
            return Err(SimError::Deadlock {
                time: sim.now,
                blocked,
            });
        }
    }
    Ok(sim.out)
}

/// Steady-state throughput of `b` over `a`, counting `label` marks after `warmup`.
pub fn sim_compare(
    a: (&SimConfig, &Workload),
    b: (&SimConfig, &Workload),
    label: &str,
    warmup: usize,
) -> Result<f64, SimError> {
    let ta = sim_run(a.0, a.1)?.throughput(label, warmup)?;
    let tb = sim_run(b.0, b.1)?.throughput(label, warmup)?;
    Ok(tb / ta)
}

#[cfg(test)]
mod tests {
    use super::super::parse_script;
    use super::*;

    fn one_put(frags: u64, nics: &str) -> Workload {
        parse_script(&format!(
            "rank 0 node 0\nrank 1 node 1\nsignal 1 r 1\nsignal 0 s 1\n\
             program 0\n put 1 1000 recv=r send=s frags={frags} nics={nics}\n wait s\nend\n\
             program 1\n wait r\nend"
        ))
        .unwrap()
    }

    #[test]
    fn single_put_latency_model() {
        let cfg = SimConfig::uniform(1, 5.0, 0.25);
        let t = sim_run(&cfg, &one_put(1, "0")).unwrap();
        assert_eq!(t.trigger_times(1, 0), vec![5.0 + 0.25 * 1000.0]);
        assert_eq!(t.frames, 1);
    }

    #[test]
    fn two_rails_halve_transfer_time() {
        let cfg = SimConfig::uniform(2, 5.0, 0.25);
        let t = sim_run(&cfg, &one_put(2, "0,1")).unwrap();
        assert_eq!(t.trigger_times(1, 0), vec![5.0 + 0.25 * 500.0]);
        assert_eq!(t.trigger_times(0, 0), vec![5.0 + 0.25 * 500.0]);
        assert_eq!(t.of_kind(TraceKind::Apply).filter(|r| r.endpoint == 1).count(), 2);
    }

    #[test]
    fn same_nic_fragments_serialize() {
        let cfg = SimConfig::uniform(1, 5.0, 0.25);
        let t = sim_run(&cfg, &one_put(2, "0,0")).unwrap();
        assert_eq!(t.trigger_times(1, 0), vec![5.0 + 0.25 * 1000.0]);
    }

    #[test]
    fn deadlock_is_reported() {
        let w = parse_script("rank 0 node 0\nsignal 0 s 1\nprogram 0\n wait s\nend").unwrap();
        let e = sim_run(&SimConfig::uniform(1, 1.0, 0.0), &w).unwrap_err();
        assert!(matches!(e, SimError::Deadlock { ref blocked, .. } if blocked.len() == 1), "{e}");
    }

    #[test]
    fn horizon_stops_without_deadlock() {
        let w = parse_script("rank 0 node 0\nsignal 0 s 1\nprogram 0\n compute 10\n wait s\nend").unwrap();
        let mut cfg = SimConfig::uniform(1, 1.0, 0.0);
        cfg.horizon = Some(5.0);
        assert!(sim_run(&cfg, &w).is_ok());
    }

    #[test]
    fn barrier_and_loops() {
        let w = parse_script(
            "rank 0 node 0\nrank 1 node 0\n\
             program 0\n loop 3\n  compute 2\n  barrier\n  mark b\n end\nend\n\
             program 1\n loop 3\n  compute 5\n  barrier\n end\nend",
        )
        .unwrap();
        let t = sim_run(&SimConfig::uniform(1, 1.0, 0.0), &w).unwrap();
        assert_eq!(t.mark_times("b"), vec![5.0, 10.0, 15.0]);
    }

    #[test]
    fn get_notifies_both_sides() {
        let w = parse_script(
            "rank 0 node 0\nrank 1 node 1\nsignal 0 l 1\nsignal 1 r 1\n\
             program 0\n get 1 100 local=l remote=r\n wait l\nend\nprogram 1\n wait r\nend",
        )
        .unwrap();
        let t = sim_run(&SimConfig::uniform(1, 3.0, 0.5), &w).unwrap();
        // request: 3; response leaves at 3 + 50, lands at 56
        assert_eq!(t.trigger_times(1, 0), vec![53.0]);
        assert_eq!(t.trigger_times(0, 0), vec![56.0]);
        assert_eq!(t.frames, 2);
    }

    #[test]
    fn early_arrival_and_overflow_are_counted() {
        let w = parse_script(
            "rank 0 node 0\nrank 1 node 1\nsignal 1 r 1\n\
             program 0\n put 1 8 recv=r\n put 1 8 recv=r\nend\n\
             program 1\n compute 100\n wait r\n reset r\nend",
        )
        .unwrap();
        let t = sim_run(&SimConfig::uniform(1, 1.0, 0.0), &w).unwrap();
        assert_eq!(t.overflows, 1);
        assert_eq!(t.early_arrivals, 1);
    }

    #[test]
    fn trace_is_monotone_and_serializes() {
        let mut cfg = SimConfig::uniform(4, 2.0, 0.01);
        cfg.reorder = true;
        cfg.jitter = 1.0;
        cfg.seed = 42;
        let t = sim_run(&cfg, &one_put(4, "0,1,2,3")).unwrap();
        assert!(t.records.windows(2).all(|w| w[0].time <= w[1].time));
        let j = t.to_json_lines();
        assert_eq!(j.lines().count(), t.records.len());
        assert!(j.lines().next().unwrap().starts_with("{\"time\":0.0"));
        assert_eq!(j, sim_run(&cfg, &one_put(4, "0,1,2,3")).unwrap().to_json_lines());
    }

    #[test]
    fn bad_nic_index_rejected() {
        let e = sim_run(&SimConfig::uniform(1, 1.0, 0.0), &one_put(2, "0,1")).unwrap_err();
        assert!(matches!(e, SimError::Workload(_)));
    }
}
