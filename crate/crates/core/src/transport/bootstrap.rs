//! Out-of-band setup exchange: tagged point-to-point messages and a barrier.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::TransportError;
use crate::memory::Rank;

const BARRIER_TAG: u64 = 0xB000_0000_0000_0000;

pub trait Bootstrap: Send + Sync {
    fn rank(&self) -> Rank;
    fn world_size(&self) -> u32;
    fn send(&self, dst: Rank, tag: u64, data: &[u8]) -> Result<(), TransportError>;
    fn recv(&self, src: Rank, tag: u64, timeout: Duration) -> Result<Vec<u8>, TransportError>;

    /// Block until every rank has entered the barrier.
    fn barrier(&self, timeout: Duration) -> Result<(), TransportError>;

    /// Gather at rank 0, then release everyone. `epoch` must advance by one
    /// per barrier and agree across ranks.
    fn barrier_epoch(&self, epoch: u64, timeout: Duration) -> Result<(), TransportError> {
        let tag = BARRIER_TAG | epoch;
        let n = self.world_size();
        if self.rank() == 0 {
            for r in 1..n {
                self.recv(r, tag, timeout)?;
            }
            for r in 1..n {
                self.send(r, tag, &[])?;
            }
        } else {
            self.send(0, tag, &[])?;
            self.recv(0, tag, timeout)?;
        }
        Ok(())
    }
}

/// Received bootstrap messages keyed by `(source, tag)`.
#[derive(Debug, Default)]
pub struct Inbox {
    msgs: Mutex<HashMap<(Rank, u64), VecDeque<Vec<u8>>>>,
    arrived: Condvar,
    epoch: AtomicU64,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, src: Rank, tag: u64, data: Vec<u8>) {
        self.msgs
            .lock()
            .unwrap()
            .entry((src, tag))
            .or_default()
            .push_back(data);
        self.arrived.notify_all();
    }

    pub fn pop(&self, src: Rank, tag: u64, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut g = self.msgs.lock().unwrap();
        loop {
            if let Some(m) = g.get_mut(&(src, tag)).and_then(|q| q.pop_front()) {
                return Ok(m);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::BootstrapTimeout { src, tag });
            }
            g = self.arrived.wait_timeout(g, deadline - now).unwrap().0;
        }
    }

    pub fn next_epoch(&self) -> u64 {
        self.epoch.fetch_add(1, Ordering::Relaxed)
    }

    /// Tags currently waiting from `src`; used to explain a mismatch.
    pub fn pending_tags(&self, src: Rank) -> Vec<u64> {
        let g = self.msgs.lock().unwrap();
        let mut tags: Vec<u64> = g
            .iter()
            .filter(|((s, _), q)| *s == src && !q.is_empty())
            .map(|((_, t), _)| *t)
            .collect();
        tags.sort_unstable();
        tags
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pop_matches_source_and_tag() {
        let ib = Inbox::new();
        ib.push(1, 7, vec![1]);
        ib.push(2, 7, vec![2]);
        ib.push(1, 8, vec![3]);
        assert_eq!(ib.pop(2, 7, Duration::ZERO).unwrap(), vec![2]);
        assert_eq!(ib.pending_tags(1), vec![7, 8]);
        assert_eq!(ib.pop(1, 8, Duration::ZERO).unwrap(), vec![3]);
        assert_eq!(
            ib.pop(1, 9, Duration::from_millis(1)).unwrap_err(),
            TransportError::BootstrapTimeout { src: 1, tag: 9 }
        );
    }
}
