//! Simulation output: one record per observable step.

use serde::Serialize;

use crate::memory::Rank;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// A put or get was handed to the NICs.
    Issue,
    /// A frame landed at this endpoint.
    Deliver,
    /// An addend was applied to a signal.
    Apply,
    /// A signal's counter reached zero.
    Trigger,
    WaitDone,
    Reset,
    EarlyArrival,
    Overflow,
    Mark,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub time: f64,
    pub endpoint: Rank,
    pub kind: TraceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counter_after: Option<i64>,
    /// Payload tag of a delivered frame, or the label of a mark.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SimEventTrace {
    pub records: Vec<TraceRecord>,
    pub end_time: f64,
    pub frames: u64,
    pub early_arrivals: u64,
    pub overflows: u64,
}

impl SimEventTrace {
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// `(endpoint, signal)` of every trigger, in time order.
    pub fn triggers(&self) -> Vec<(Rank, u64)> {
        self.of_kind(TraceKind::Trigger)
            .map(|r| (r.endpoint, r.signal.unwrap_or(u64::MAX)))
            .collect()
    }

    pub fn trigger_times(&self, endpoint: Rank, signal: u64) -> Vec<f64> {
        self.of_kind(TraceKind::Trigger)
            .filter(|r| r.endpoint == endpoint && r.signal == Some(signal))
            .map(|r| r.time)
            .collect()
    }

    pub fn mark_times(&self, label: &str) -> Vec<f64> {
        self.of_kind(TraceKind::Mark)
            .filter(|r| r.detail.as_deref() == Some(label))
            .map(|r| r.time)
            .collect()
    }

    /// Marks per unit time after skipping the first `warmup` marks.
    pub fn throughput(&self, label: &str, warmup: usize) -> Result<f64, SimError> {
        let t = self.mark_times(label);
        if t.len() < warmup + 2 {
            return Err(SimError::Throughput {
                label: label.into(),
                found: t.len(),
                need: warmup + 2,
            });
        }
        let w = &t[warmup..];
        let span = w[w.len() - 1] - w[0];
        Ok((w.len() - 1) as f64 / span)
    }
}
