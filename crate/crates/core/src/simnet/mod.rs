//! Deterministic discrete-event model of a multi-NIC fabric.
//!
//! Each node owns `nics_per_node` NICs. A fragment of `b` bytes leaves a NIC
//! once the NIC is free, occupies it for `per_fragment_overhead + c*b` and
//! lands `base_latency` later. Ranks run workload scripts cooperatively on
//! a single virtual CPU each; addends are applied to real [`Signal`]s.
//!
//! [`Signal`]: crate::signal::Signal

mod des;
pub mod script;
pub mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::Rank;

pub use des::{sim_compare, sim_run};
pub use script::{parse_script, ComputeModel, Op, RankSpec, Transfer, Workload};
pub use trace::{SimEventTrace, TraceKind, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("script line {line}: {msg}")]
    Script { line: usize, msg: String },
    #[error("workload: {0}")]
    Workload(String),
    #[error("config: {0}")]
    Config(String),
    #[error("deadlock at t={time}: {blocked:?} blocked with an empty calendar")]
    Deadlock { time: f64, blocked: Vec<(Rank, String)> },
    #[error("too few marks {found} (need {need}) to measure throughput of {label:?}")]
    Throughput { label: String, found: usize, need: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NicModel {
    /// One-way latency added after transmission.
    pub base_latency: f64,
    /// Transmission time per byte; the NIC is busy for `bytes * per_byte`.
    pub per_byte: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimDelivery {
    /// A progress agent applies addends `poll_delay` after arrival.
    #[default]
    Queued,
    /// Addends are applied at arrival.
    InlineAtomic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub nics_per_node: usize,
    /// One entry per NIC index, shared by all nodes.
    pub nics: Vec<NicModel>,
    /// Randomize the order of simultaneous arrivals and add `jitter`.
    #[serde(default)]
    pub reorder: bool,
    /// Upper bound of the uniform extra latency per fragment when `reorder` is set.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub delivery_mode: SimDelivery,
    #[serde(default)]
    pub poll_delay: f64,
    /// Fixed NIC time per fragment.
    #[serde(default)]
    pub per_fragment_overhead: f64,
    #[serde(default = "default_layout")]
    pub layout_bits: u32,
    /// Stop once virtual time passes this point.
    #[serde(default)]
    pub horizon: Option<f64>,
}

fn default_layout() -> u32 {
    crate::signal::DEFAULT_LAYOUT_BITS
}

impl SimConfig {
    /// `nics` identical NICs per node.
    pub fn uniform(nics: usize, base_latency: f64, per_byte: f64) -> Self {
        Self {
            nics_per_node: nics,
            nics: vec![NicModel { base_latency, per_byte }; nics],
            reorder: false,
            jitter: 0.0,
            seed: 0,
            delivery_mode: SimDelivery::Queued,
            poll_delay: 0.0,
            per_fragment_overhead: 0.0,
            layout_bits: default_layout(),
            horizon: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.nics_per_node == 0 || self.nics.len() != self.nics_per_node {
            return Err(SimError::Config(format!(
                "{} NIC models for {} NICs per node",
                self.nics.len(),
                self.nics_per_node
            )));
        }
        let bad = |x: f64| !x.is_finite() || x < 0.0;
        if self.nics.iter().any(|n| bad(n.base_latency) || bad(n.per_byte))
            || bad(self.jitter)
            || bad(self.poll_delay)
            || bad(self.per_fragment_overhead)
        {
            return Err(SimError::Config("latencies and costs must be finite and non-negative".into()));
        }
        crate::signal::LayoutConfig::new(self.layout_bits).map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }
}
