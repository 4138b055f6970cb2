//! Background context that drains event queues of polled channels.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_micros(50);

/// Buckets: 0, 1, 2-3, 4-7, 8-15, 16-31, 32+ events per poll.
pub const HISTOGRAM_BUCKETS: usize = 7;

#[derive(Default)]
pub struct ProgressStats {
    polls: AtomicU64,
    events: AtomicU64,
    histogram: [AtomicU64; HISTOGRAM_BUCKETS],
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ProgressSnapshot {
    pub polls: u64,
    pub events: u64,
    pub histogram: [u64; HISTOGRAM_BUCKETS],
}

fn bucket(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        ((usize::BITS - n.leading_zeros()) as usize).min(HISTOGRAM_BUCKETS - 1)
    }
}

impl ProgressStats {
    pub fn record(&self, applied: usize) {
        self.polls.fetch_add(1, Ordering::Relaxed);
        self.events.fetch_add(applied as u64, Ordering::Relaxed);
        self.histogram[bucket(applied)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> ProgressSnapshot {
        ProgressSnapshot {
            polls: self.polls.load(Ordering::Relaxed),
            events: self.events.load(Ordering::Relaxed),
            histogram: std::array::from_fn(|i| self.histogram[i].load(Ordering::Relaxed)),
        }
    }
}

pub(crate) struct ProgressAgent {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl ProgressAgent {
    /// Run `step` until stopped, sleeping `interval` after polls that found nothing.
    pub fn spawn(name: String, interval: Duration, step: impl Fn() -> usize + Send + 'static) -> std::io::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::Builder::new().name(name).spawn(move || {
            while !flag.load(Ordering::Acquire) {
                if step() == 0 {
                    if interval.is_zero() {
                        thread::yield_now();
                    } else {
                        thread::sleep(interval);
                    }
                }
            }
        })?;
        Ok(Self {
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for ProgressAgent {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets() {
        let s = ProgressStats::default();
        for n in [0, 1, 2, 3, 4, 7, 8, 31, 32, 1000] {
            s.record(n);
        }
        let snap = s.snapshot();
        assert_eq!(snap.polls, 10);
        assert_eq!(snap.events, 1088);
        assert_eq!(snap.histogram, [1, 1, 2, 2, 1, 1, 2]);
    }

    #[test]
    fn agent_runs_until_dropped() {
        let n = Arc::new(AtomicU64::new(0));
        let c = n.clone();
        let a = ProgressAgent::spawn("t".into(), Duration::from_micros(10), move || {
            c.fetch_add(1, Ordering::Relaxed);
            0
        })
        .unwrap();
        while n.load(Ordering::Relaxed) < 3 {
            thread::yield_now();
        }
        drop(a);
        let after = n.load(Ordering::Relaxed);
        thread::sleep(Duration::from_millis(5));
        assert_eq!(n.load(Ordering::Relaxed), after);
    }
}
