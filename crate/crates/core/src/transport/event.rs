use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventOp {
    Put,
    Get,
    /// An ordered side message carrying a full 128-bit locator/addend pair.
    Notify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RemoteFault {
    UnknownRegion,
    OutOfBounds,
}

impl RemoteFault {
    pub fn code(self) -> u8 {
        match self {
            RemoteFault::UnknownRegion => 1,
            RemoteFault::OutOfBounds => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(RemoteFault::UnknownRegion),
            2 => Some(RemoteFault::OutOfBounds),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompletionEvent {
    pub side: Side,
    pub op: EventOp,
    pub custom: u128,
    pub channel_id: u16,
    pub fault: Option<RemoteFault>,
}

impl CompletionEvent {
    pub fn ok(side: Side, op: EventOp, custom: u128, channel_id: u16) -> Self {
        Self {
            side,
            op,
            custom,
            channel_id,
            fault: None,
        }
    }
}

/// Bounded completion queue.
///
/// A push onto a full queue is still accepted but counted; a real NIC
/// would drop it, so any non-zero count means polling fell behind.
#[derive(Debug)]
pub struct EventQueue {
    capacity: usize,
    events: Mutex<VecDeque<CompletionEvent>>,
    overflows: AtomicU64,
    pushed: AtomicU64,
}

impl EventQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            events: Mutex::new(VecDeque::with_capacity(capacity.min(1 << 16))),
            overflows: AtomicU64::new(0),
            pushed: AtomicU64::new(0),
        }
    }

    pub fn push(&self, ev: CompletionEvent) {
        let mut q = self.events.lock().unwrap();
        if q.len() >= self.capacity {
            self.overflows.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(ev);
        self.pushed.fetch_add(1, Ordering::Relaxed);
    }

    pub fn drain(&self, max: usize) -> Vec<CompletionEvent> {
        let mut q = self.events.lock().unwrap();
        let n = max.min(q.len());
        q.drain(..n).collect()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overflows(&self) -> u64 {
        self.overflows.load(Ordering::Relaxed)
    }

    pub fn pushed(&self) -> u64 {
        self.pushed.load(Ordering::Relaxed)
    }
}

impl Default for EventQueue {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY)
    }
}
