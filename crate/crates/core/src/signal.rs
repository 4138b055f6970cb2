//! Multi-channel multi-message aggregated signals.
//!
//! A signal is a pair of signed 64-bit integers: `num_event`, the number of
//! events needed to trigger it, and an atomic `counter` split into three
//! fields:
//!
//! ```text
//!  63            N+1   N   N-1          0
//! +-----------------+-----+--------------+
//! | sub-msg balance | ovf | events left  |
//! +-----------------+-----+--------------+
//! ```
//!
//! A message sent over one channel carries the addend `-1`. A message split
//! into `K` fragments carries `-1 + ((K-1) << (N+1))` on its primary
//! fragment and `(-1) << (N+1)` on each of the other `K-1` fragments, so the
//! counter reaches zero exactly when every fragment of every expected
//! message has been applied, in any order.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::diag::{DiagnosticSink, WarningKind};

pub const DEFAULT_LAYOUT_BITS: u32 = 32;

const SPIN_ITERS: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SignalError {
    #[error("num_event {num_event} out of range for N={n} (must be in 1..2^N)")]
    Range { num_event: i64, n: u32 },
    #[error("{k} fragments exceed the sub-message budget {max} for N={n}")]
    Budget { k: u64, max: u64, n: u32 },
    #[error("layout bit position {0} outside 1..=62")]
    Layout(u32),
    #[error("wait timed out with counter {counter}")]
    Timeout { counter: i64 },
}

/// Position `N` of the overflow-detection bit. The low `N` bits count events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutConfig {
    n: u32,
}

impl LayoutConfig {
    pub fn new(n: u32) -> Result<Self, SignalError> {
        if !(1..=62).contains(&n) {
            return Err(SignalError::Layout(n));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn overflow_bit(&self) -> i64 {
        1i64 << self.n
    }

    /// `2^N - 1`.
    pub fn max_events(&self) -> u64 {
        (1u64 << self.n) - 1
    }

    /// `2^(64-N-1) - 1`.
    pub fn max_fragments(&self) -> u64 {
        (1u64 << (63 - self.n)) - 1
    }

    pub fn overflow_set(&self, counter: i64) -> bool {
        counter & self.overflow_bit() != 0
    }
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_LAYOUT_BITS,
        }
    }
}

/// A value added to a signal counter when an operation completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Addend(pub i64);

impl Addend {
    pub const SINGLE: Addend = Addend(-1);

    pub fn primary(k: u64, layout: LayoutConfig) -> Addend {
        // Wraps for K near the budget limit; counter arithmetic is mod 2^64.
        Addend((((k - 1) as i64) << (layout.n() + 1)).wrapping_sub(1))
    }

    pub fn secondary(layout: LayoutConfig) -> Addend {
        Addend((-1i64) << (layout.n() + 1))
    }

    pub fn value(self) -> i64 {
        self.0
    }
}

/// The addends for one message split into `k` fragments.
///
/// Kept symbolic: `k` may be as large as `2^(63-N) - 1`, far too many to
/// materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Addends {
    k: u64,
    layout: LayoutConfig,
}

impl Addends {
    pub fn len(&self) -> u64 {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    /// Addend for fragment `i`. Fragment 0 is the primary.
    pub fn get(&self, i: u64) -> Addend {
        assert!(i < self.k, "fragment index {i} out of range for K={}", self.k);
        match (self.k, i) {
            (1, _) => Addend::SINGLE,
            (k, 0) => Addend::primary(k, self.layout),
            _ => Addend::secondary(self.layout),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Addend> + '_ {
        (0..self.k).map(move |i| self.get(i))
    }

    /// Sum over all fragments in the counter's 64-bit arithmetic.
    pub fn sum(&self) -> i64 {
        if self.k == 1 {
            return -1;
        }
        let rest = self.get(1).0.wrapping_mul(self.k as i64 - 1);
        self.get(0).0.wrapping_add(rest)
    }

    pub fn to_vec(&self) -> Vec<Addend> {
        self.iter().collect()
    }
}

pub fn encode_addends(k: u64, layout: LayoutConfig) -> Result<Addends, SignalError> {
    let max = layout.max_fragments();
    if k == 0 || k > max {
        return Err(SignalError::Budget {
            k,
            max,
            n: layout.n(),
        });
    }
    Ok(Addends { k, layout })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignalId(pub u64);

impl fmt::Display for SignalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig#{}", self.0)
    }
}

/// Token naming a signal inside custom bits.
///
/// Token 0 means "no signal"; a table index `i` is carried as `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignalLocator {
    pub token: u64,
}

impl SignalLocator {
    pub const NONE: SignalLocator = SignalLocator { token: 0 };

    pub fn from_index(index: u64) -> Self {
        Self { token: index + 1 }
    }

    pub fn index(&self) -> Option<u64> {
        self.token.checked_sub(1)
    }

    /// Number of distinct signals addressable with `bits` index bits.
    pub fn addressable(bits: u32) -> u128 {
        1u128 << bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyOutcome {
    pub new_counter: i64,
    pub just_triggered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResetOutcome {
    pub warned: bool,
    pub previous: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaitOutcome {
    pub overflow: bool,
    pub counter: i64,
}

/// `signal_reset` and `signal_wait` must not race each other on the same
/// signal. `apply` and `probe` may be called from any thread at any time.
pub struct Signal {
    id: SignalId,
    num_event: i64,
    layout: LayoutConfig,
    counter: AtomicI64,
    triggered: AtomicBool,
    overflow_seen: AtomicBool,
    park: Mutex<()>,
    wake: Condvar,
    sink: Option<Arc<dyn DiagnosticSink>>,
}

impl fmt::Debug for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signal")
            .field("id", &self.id)
            .field("num_event", &self.num_event)
            .field("counter", &self.counter())
            .field("triggered", &self.probe())
            .finish()
    }
}

impl Signal {
    pub fn new(id: SignalId, num_event: i64, layout: LayoutConfig) -> Result<Self, SignalError> {
        if num_event <= 0 || num_event as u64 > layout.max_events() {
            return Err(SignalError::Range {
                num_event,
                n: layout.n(),
            });
        }
        Ok(Self {
            id,
            num_event,
            layout,
            counter: AtomicI64::new(num_event),
            triggered: AtomicBool::new(false),
            overflow_seen: AtomicBool::new(false),
            park: Mutex::new(()),
            wake: Condvar::new(),
            sink: None,
        })
    }

    pub fn with_sink(mut self, sink: Arc<dyn DiagnosticSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn id(&self) -> SignalId {
        self.id
    }

    pub fn num_event(&self) -> i64 {
        self.num_event
    }

    pub fn layout(&self) -> LayoutConfig {
        self.layout
    }

    pub fn counter(&self) -> i64 {
        self.counter.load(Ordering::Acquire)
    }

    pub fn overflow_seen(&self) -> bool {
        self.overflow_seen.load(Ordering::Acquire)
    }

    /// Apply one addend with a single fetch-add.
    pub fn apply(&self, a: Addend) -> ApplyOutcome {
        let old = self.counter.fetch_add(a.0, Ordering::AcqRel);
        let new_counter = old.wrapping_add(a.0);
        if self.layout.overflow_set(new_counter) {
            self.overflow_seen.store(true, Ordering::Release);
        }
        let just_triggered = new_counter == 0;
        if just_triggered {
            self.triggered.store(true, Ordering::Release);
        }
        if just_triggered || self.layout.overflow_set(new_counter) {
            // Take the lock so a waiter between its check and its park
            // cannot miss this notification.
            drop(self.park.lock().unwrap());
            self.wake.notify_all();
        }
        ApplyOutcome {
            new_counter,
            just_triggered,
        }
    }

    /// Re-arm the signal. Warns if the counter was not zero.
    pub fn reset(&self) -> ResetOutcome {
        let previous = self.counter.swap(self.num_event, Ordering::AcqRel);
        self.triggered.store(false, Ordering::Release);
        self.overflow_seen.store(false, Ordering::Release);
        let warned = previous != 0;
        if warned {
            if let Some(sink) = &self.sink {
                sink.record(
                    Some(self.id.0),
                    WarningKind::EarlyArrival,
                    format!(
                        "reset found counter {previous} (num_event {}): a message arrived earlier than expected or is still outstanding",
                        self.num_event
                    ),
                );
            }
        }
        ResetOutcome { warned, previous }
    }

    pub fn probe(&self) -> bool {
        self.triggered.load(Ordering::Acquire)
    }

    fn done(&self) -> Option<i64> {
        let c = self.counter();
        if c == 0 || self.probe() || self.layout.overflow_set(c) {
            Some(c)
        } else {
            None
        }
    }

    /// Block until the counter reaches zero (or the overflow bit shows that
    /// it went past zero), then report whether more than `num_event`
    /// events arrived.
    pub fn wait(&self, timeout: Option<Duration>) -> Result<WaitOutcome, SignalError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut counter = None;
        for _ in 0..SPIN_ITERS {
            if let Some(c) = self.done() {
                counter = Some(c);
                break;
            }
            std::hint::spin_loop();
        }
        let counter = match counter {
            Some(c) => c,
            None => {
                let mut guard = self.park.lock().unwrap();
                loop {
                    if let Some(c) = self.done() {
                        break c;
                    }
                    match deadline {
                        Some(d) => {
                            let now = Instant::now();
                            if now >= d {
                                return Err(SignalError::Timeout {
                                    counter: self.counter(),
                                });
                            }
                            guard = self.wake.wait_timeout(guard, d - now).unwrap().0;
                        }
                        None => guard = self.wake.wait(guard).unwrap(),
                    }
                }
            }
        };
        let overflow = self.layout.overflow_set(counter) || self.overflow_seen();
        if overflow {
            if let Some(sink) = &self.sink {
                sink.record(
                    Some(self.id.0),
                    WarningKind::Overflow,
                    format!(
                        "more than num_event={} events received (counter {counter})",
                        self.num_event
                    ),
                );
            }
        }
        Ok(WaitOutcome { overflow, counter })
    }
}

/// Create a free-standing signal with id 0 and no diagnostic sink.
pub fn signal_create(num_event: i64, layout: LayoutConfig) -> Result<Signal, SignalError> {
    Signal::new(SignalId(0), num_event, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diag::Diagnostics;

    fn l(n: u32) -> LayoutConfig {
        LayoutConfig::new(n).unwrap()
    }

    #[test]
    fn create_examples() {
        assert_eq!(signal_create(1, l(32)).unwrap().counter(), 1);
        let s = signal_create(3, l(8)).unwrap();
        assert_eq!(s.counter(), 3);
        assert!(!s.probe());
        assert!(matches!(signal_create(256, l(8)), Err(SignalError::Range { .. })));
        assert!(matches!(signal_create(0, l(8)), Err(SignalError::Range { .. })));
        assert!(signal_create(255, l(8)).is_ok());
    }

    #[test]
    fn layout_bounds() {
        assert!(LayoutConfig::new(0).is_err());
        assert!(LayoutConfig::new(63).is_err());
        let lay = l(32);
        assert_eq!(lay.max_events(), (1 << 32) - 1);
        assert_eq!(lay.max_fragments(), (1 << 31) - 1);
    }

    #[test]
    fn addend_examples() {
        assert_eq!(encode_addends(1, l(17)).unwrap().to_vec(), vec![Addend(-1)]);
        assert_eq!(
            encode_addends(2, l(8)).unwrap().to_vec(),
            vec![Addend(511), Addend(-512)]
        );
        assert_eq!(
            encode_addends(4, l(32)).unwrap().to_vec(),
            vec![
                Addend(25769803775),
                Addend(-8589934592),
                Addend(-8589934592),
                Addend(-8589934592)
            ]
        );
        assert!(encode_addends(0, l(8)).is_err());
    }

    #[test]
    fn two_singles_trigger_on_second() {
        let s = signal_create(2, l(32)).unwrap();
        assert_eq!(
            s.apply(Addend(-1)),
            ApplyOutcome { new_counter: 1, just_triggered: false }
        );
        assert_eq!(
            s.apply(Addend(-1)),
            ApplyOutcome { new_counter: 0, just_triggered: true }
        );
        assert!(s.probe());
    }

    #[test]
    fn secondary_before_primary() {
        let s = signal_create(1, l(8)).unwrap();
        let a = s.apply(Addend(-512));
        assert_eq!(a, ApplyOutcome { new_counter: -511, just_triggered: false });
        assert!(!s.overflow_seen());
        assert!(!s.probe());
        let b = s.apply(Addend(511));
        assert_eq!(b, ApplyOutcome { new_counter: 0, just_triggered: true });
    }

    #[test]
    fn extra_events_set_overflow_bit() {
        let s = signal_create(1, l(8)).unwrap();
        for _ in 0..3 {
            s.apply(Addend(-1));
        }
        assert_eq!(s.counter(), -2);
        assert!(s.counter() & (1 << 8) != 0);
        assert!(s.overflow_seen());
    }

    #[test]
    fn reset_checks_counter() {
        let d = Arc::new(Diagnostics::quiet());
        let s = signal_create(1, l(32)).unwrap().with_sink(d.clone());
        s.apply(Addend(-1));
        assert!(!s.reset().warned);
        assert_eq!(s.counter(), 1);
        // nothing arrived: counter is still num_event
        let r = s.reset();
        assert!(r.warned);
        assert_eq!(r.previous, 1);
        assert_eq!(d.early_arrivals(), 1);
    }

    #[test]
    fn wait_examples() {
        let s = signal_create(1, l(32)).unwrap();
        s.apply(Addend(-1));
        assert!(!s.wait(None).unwrap().overflow);
        // already triggered: returns immediately
        assert!(!s.wait(Some(Duration::from_millis(1))).unwrap().overflow);

        let d = Arc::new(Diagnostics::quiet());
        let s = signal_create(1, l(32)).unwrap().with_sink(d.clone());
        s.apply(Addend(-1));
        s.apply(Addend(-1));
        assert_eq!(s.counter(), -1);
        assert!(s.wait(None).unwrap().overflow);
        assert_eq!(d.overflows(), 1);
    }

    #[test]
    fn wait_times_out() {
        let s = signal_create(2, l(32)).unwrap();
        s.apply(Addend(-1));
        let e = s.wait(Some(Duration::from_millis(5))).unwrap_err();
        assert_eq!(e, SignalError::Timeout { counter: 1 });
    }

    #[test]
    fn wait_wakes_on_trigger_from_other_thread() {
        let s = Arc::new(signal_create(1, l(32)).unwrap());
        let s2 = s.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            s2.apply(Addend(-1));
        });
        let out = s.wait(Some(Duration::from_secs(5))).unwrap();
        assert!(!out.overflow);
        h.join().unwrap();
    }

    #[test]
    fn locator_tokens() {
        assert_eq!(SignalLocator::NONE.index(), None);
        assert_eq!(SignalLocator::from_index(0).token, 1);
        assert_eq!(SignalLocator::from_index(41).index(), Some(41));
        assert_eq!(SignalLocator::addressable(16), 65536);
    }
}
