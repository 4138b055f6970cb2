//! Line-oriented workload scripts.
//!
//! ```text
//! # two ranks on two nodes
//! rank 0 node 0
//! rank 1 node 1
//! signal 1 inbox 1
//! program 0
//!   loop 10
//!     put 1 4096 recv=inbox frags=2 nics=0,1
//!     compute normal 100 30
//!   end
//! end
//! program 1
//!   loop 10
//!     wait inbox
//!     reset inbox
//!     mark got
//!   end
//! end
//! ```
//!
//! Operations: `put DST BYTES [recv=S] [send=S] [frags=K] [nics=I,J] [tag=T]`,
//! `get SRC BYTES [local=S] [remote=S] [frags=K] [nics=I,J]`, `wait S`,
//! `reset S`, `compute T`, `compute normal MEAN SD`, `barrier`, `mark LABEL`,
//! `loop N ... end`.

use std::collections::BTreeMap;

use crate::memory::Rank;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComputeModel {
    Fixed(f64),
    /// Normal distribution truncated at zero.
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub peer: Rank,
    pub bytes: u64,
    /// Signal on this rank (send signal of a put, landing signal of a get).
    pub local: Option<String>,
    /// Signal on the peer.
    pub remote: Option<String>,
    pub frags: u64,
    /// NIC indices fragments rotate over; `[0]` when empty.
    pub nics: Vec<usize>,
    /// Payload identity carried by every fragment, for integrity checks.
    pub tag: u64,
}

impl Transfer {
    pub fn new(peer: Rank, bytes: u64) -> Self {
        Self {
            peer,
            bytes,
            local: None,
            remote: None,
            frags: 1,
            nics: Vec::new(),
            tag: 0,
        }
    }

    pub fn local(mut self, s: &str) -> Self {
        self.local = Some(s.into());
        self
    }

    pub fn remote(mut self, s: &str) -> Self {
        self.remote = Some(s.into());
        self
    }

    pub fn striped(mut self, frags: u64, nics: Vec<usize>) -> Self {
        self.frags = frags;
        self.nics = nics;
        self
    }

    pub fn tag(mut self, t: u64) -> Self {
        self.tag = t;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Put(Transfer),
    Get(Transfer),
    Wait(String),
    Reset(String),
    Compute(ComputeModel),
    Barrier,
    Mark(String),
    Loop(u64, Vec<Op>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankSpec {
    pub node: usize,
    /// Declaration order defines each signal's id.
    pub signals: Vec<(String, i64)>,
    pub program: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Workload {
    pub ranks: BTreeMap<Rank, RankSpec>,
}

impl Workload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rank(&mut self, r: Rank, node: usize) -> &mut Self {
        self.ranks.entry(r).or_default().node = node;
        self
    }

    pub fn signal(&mut self, r: Rank, name: &str, num_event: i64) -> &mut Self {
        self.ranks.entry(r).or_default().signals.push((name.into(), num_event));
        self
    }

    pub fn program(&mut self, r: Rank, ops: Vec<Op>) -> &mut Self {
        self.ranks.entry(r).or_default().program = ops;
        self
    }

    pub fn signal_id(&self, r: Rank, name: &str) -> Option<u64> {
        self.ranks
            .get(&r)?
            .signals
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| i as u64)
    }

    pub fn signal_name(&self, r: Rank, id: u64) -> Option<&str> {
        self.ranks.get(&r)?.signals.get(id as usize).map(|(n, _)| n.as_str())
    }

    /// Check that every operation names declared ranks and signals.
    pub fn validate(&self) -> Result<(), SimError> {
        fn walk(w: &Workload, r: Rank, ops: &[Op]) -> Result<(), SimError> {
            let known = |rank: Rank, s: &Option<String>| -> Result<(), SimError> {
                match s {
                    Some(name) if w.signal_id(rank, name).is_none() => Err(SimError::Workload(format!(
                        "rank {r} refers to undeclared signal {name:?} on rank {rank}"
                    ))),
                    _ => Ok(()),
                }
            };
            for op in ops {
                match op {
                    Op::Put(t) | Op::Get(t) => {
                        if !w.ranks.contains_key(&t.peer) {
                            return Err(SimError::Workload(format!("rank {r} targets undeclared rank {}", t.peer)));
                        }
                        known(r, &t.local)?;
                        known(t.peer, &t.remote)?;
                    }
                    Op::Wait(s) | Op::Reset(s) => known(r, &Some(s.clone()))?,
                    Op::Loop(_, body) => walk(w, r, body)?,
                    Op::Compute(ComputeModel::Fixed(t)) if *t < 0.0 || !t.is_finite() => {
                        return Err(SimError::Workload(format!("rank {r}: compute time {t} invalid")))
                    }
                    _ => {}
                }
            }
            Ok(())
        }
        for (&r, spec) in &self.ranks {
            walk(self, r, &spec.program)?;
        }
        Ok(())
    }
}

fn err(line: usize, msg: impl Into<String>) -> SimError {
    SimError::Script {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, s: Option<&str>, what: &str) -> Result<T, SimError> {
    let s = s.ok_or_else(|| err(line, format!("missing {what}")))?;
    s.parse().map_err(|_| err(line, format!("bad {what} {s:?}")))
}

fn transfer(line: usize, words: &[&str], get: bool) -> Result<Transfer, SimError> {
    let mut t = Transfer::new(num(line, words.get(1).copied(), "rank")?, num(line, words.get(2).copied(), "byte count")?);
    let (lkey, rkey) = if get { ("local", "remote") } else { ("send", "recv") };
    for w in &words[3.min(words.len())..] {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, got {w:?}")))?;
        match k {
            _ if k == lkey => t.local = Some(v.into()),
            _ if k == rkey => t.remote = Some(v.into()),
            "frags" => t.frags = num(line, Some(v), "fragment count")?,
            "nics" => {
                t.nics = v
                    .split(',')
                    .map(|n| num(line, Some(n), "NIC index"))
                    .collect::<Result<_, _>>()?
            }
            "tag" => t.tag = num(line, Some(v), "tag")?,
            _ => return Err(err(line, format!("unknown option {k:?}"))),
        }
    }
    if t.frags == 0 {
        return Err(err(line, "frags must be at least 1"));
    }
    Ok(t)
}

pub fn parse_script(text: &str) -> Result<Workload, SimError> {
    let mut w = Workload::new();
    // open program: rank and a stack of (loop count, body)
    let mut current: Option<Rank> = None;
    let mut stack: Vec<(u64, Vec<Op>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        let Some(&head) = words.first() else { continue };
        if current.is_none() {
            match head {
                "rank" => {
                    let r = num(line, words.get(1).copied(), "rank")?;
                    if words.get(2) != Some(&"node") {
                        return Err(err(line, "expected `rank R node N`"));
                    }
                    w.rank(r, num(line, words.get(3).copied(), "node")?);
                }
                "signal" => {
                    let r = num(line, words.get(1).copied(), "rank")?;
                    let name = words.get(2).ok_or_else(|| err(line, "missing signal name"))?;
                    let n = num(line, words.get(3).copied(), "num_event")?;
                    if w.signal_id(r, name).is_some() {
                        return Err(err(line, format!("signal {name:?} declared twice on rank {r}")));
                    }
                    w.signal(r, name, n);
                }
                "program" => {
                    let r = num(line, words.get(1).copied(), "rank")?;
                    if !w.ranks.contains_key(&r) {
                        return Err(err(line, format!("program for undeclared rank {r}")));
                    }
                    current = Some(r);
                    stack.push((1, Vec::new()));
                }
                _ => return Err(err(line, format!("unexpected {head:?} outside a program"))),
            }
            continue;
        }
        let op = match head {
            "end" => {
                let (count, body) = stack.pop().expect("open block");
                if stack.is_empty() {
                    w.ranks.get_mut(&current.take().unwrap()).unwrap().program = body;
                    continue;
                }
                Op::Loop(count, body)
            }
            "loop" => {
                stack.push((num(line, words.get(1).copied(), "loop count")?, Vec::new()));
                continue;
            }
            "put" => Op::Put(transfer(line, &words, false)?),
            "get" => Op::Get(transfer(line, &words, true)?),
            "wait" | "reset" | "mark" => {
                let s = words.get(1).ok_or_else(|| err(line, format!("{head} needs an operand")))?.to_string();
                match head {
                    "wait" => Op::Wait(s),
                    "reset" => Op::Reset(s),
                    _ => Op::Mark(s),
                }
            }
            "compute" => {
                if words.get(1) == Some(&"normal") {
                    Op::Compute(ComputeModel::Normal {
                        mean: num(line, words.get(2).copied(), "mean")?,
                        sd: num(line, words.get(3).copied(), "standard deviation")?,
                    })
                } else {
                    Op::Compute(ComputeModel::Fixed(num(line, words.get(1).copied(), "compute time")?))
                }
            }
            "barrier" => Op::Barrier,
            _ => return Err(err(line, format!("unknown operation {head:?}"))),
        };
        stack.last_mut().unwrap().1.push(op);
    }
    if current.is_some() {
        return Err(err(text.lines().count(), "unterminated program or loop"));
    }
    w.validate()?;
    Ok(w)
}
