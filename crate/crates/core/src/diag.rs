//! Diagnostic sink for synchronization-error warnings.
//!
//! Signals report early arrivals (reset found a non-zero counter) and event
//! overflows (more events than `num_event`) here. The engine also records
//! transport-level anomalies such as undecodable events.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// A reset found the counter non-zero: a message arrived earlier than expected.
    EarlyArrival,
    /// A wait observed the overflow-detection bit.
    Overflow,
    /// A completion event named a signal index that is not in the table.
    UnknownSignalIndex,
    /// A remote side rejected an operation (bad region, out of bounds).
    RemoteError,
    /// A plan descriptor failed at start time.
    PlanIssue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Warning {
    pub signal_id: Option<u64>,
    pub kind: WarningKind,
    /// Monotonic time since the sink was created.
    pub at: Duration,
    pub detail: String,
}

pub trait DiagnosticSink: Send + Sync {
    fn record(&self, signal_id: Option<u64>, kind: WarningKind, detail: String);
}

/// Default sink: counts per kind, keeps the records, optionally echoes to stderr.
#[derive(Debug)]
pub struct Diagnostics {
    start: Instant,
    echo: AtomicBool,
    early: AtomicU64,
    overflow: AtomicU64,
    other: AtomicU64,
    records: Mutex<Vec<Warning>>,
}

impl Diagnostics {
    pub fn new(echo: bool) -> Self {
        Self {
            start: Instant::now(),
            echo: AtomicBool::new(echo),
            early: AtomicU64::new(0),
            overflow: AtomicU64::new(0),
            other: AtomicU64::new(0),
            records: Mutex::new(Vec::new()),
        }
    }

    /// A sink that never writes to stderr; used by tests and benchmarks.
    pub fn quiet() -> Self {
        Self::new(false)
    }

    pub fn set_echo(&self, echo: bool) {
        self.echo.store(echo, Ordering::Relaxed);
    }

    pub fn early_arrivals(&self) -> u64 {
        self.early.load(Ordering::Relaxed)
    }

    pub fn overflows(&self) -> u64 {
        self.overflow.load(Ordering::Relaxed)
    }

    /// Everything that is neither an early arrival nor an overflow.
    pub fn others(&self) -> u64 {
        self.other.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.early_arrivals() + self.overflows() + self.others()
    }

    pub fn records(&self) -> Vec<Warning> {
        self.records.lock().unwrap().clone()
    }

    pub fn count(&self, kind: WarningKind) -> usize {
        self.records.lock().unwrap().iter().filter(|w| w.kind == kind).count()
    }
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self::new(true)
    }
}

impl DiagnosticSink for Diagnostics {
    fn record(&self, signal_id: Option<u64>, kind: WarningKind, detail: String) {
        match kind {
            WarningKind::EarlyArrival => self.early.fetch_add(1, Ordering::Relaxed),
            WarningKind::Overflow => self.overflow.fetch_add(1, Ordering::Relaxed),
            _ => self.other.fetch_add(1, Ordering::Relaxed),
        };
        let w = Warning {
            signal_id,
            kind,
            at: self.start.elapsed(),
            detail,
        };
        if self.echo.load(Ordering::Relaxed) {
            match w.signal_id {
                Some(id) => eprintln!("unr warning: {:?} on signal {}: {}", w.kind, id, w.detail),
                None => eprintln!("unr warning: {:?}: {}", w.kind, w.detail),
            }
        }
        self.records.lock().unwrap().push(w);
    }
}
