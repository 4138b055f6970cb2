//! Endpoint configuration files.
//!
//! ```toml
//! rank = 0
//! ranks = ["127.0.0.1:7100", "127.0.0.1:7101"]
//! layout_bits = 32
//! poll_interval_us = 50
//!
//! [[channels]]
//! type = "tcp"
//! preset = "glex"
//! ```
//!
//! `UNR_CONFIG` names the file and `UNR_RANK` overrides `rank`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChannelOptions, Endpoint, EngineError, Level2Mode, Progress};
use crate::diag::Diagnostics;
use crate::memory::{Rank, Registry, DEFAULT_REGION_BUDGET};
use crate::signal::{LayoutConfig, DEFAULT_LAYOUT_BITS};
use crate::transport::{
    classify_level, Bootstrap, Channel, ChannelCapability, LoopbackFabric, SupportLevel, TcpChannel,
};

pub const CONFIG_ENV: &str = "UNR_CONFIG";
pub const RANK_ENV: &str = "UNR_RANK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Tcp,
    Loopback,
    Simnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    #[default]
    Queued,
    /// The channel applies addends on delivery; requires 128 PUT remote bits.
    InlineAtomic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    #[default]
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(rename = "type")]
    pub kind: ChannelKind,
    pub preset: Option<String>,
    pub capability: Option<ChannelCapability>,
    #[serde(default)]
    pub delivery_mode: DeliveryMode,
    #[serde(default)]
    pub level2_mode: Level2Mode,
    pub index_bits: Option<u32>,
    /// Added to every rank's port so several TCP channels can coexist.
    #[serde(default)]
    pub port_offset: u16,
}

impl ChannelConfig {
    pub fn capability(&self) -> Result<ChannelCapability, EngineError> {
        let mut cap = match (&self.preset, &self.capability) {
            (Some(p), None) => ChannelCapability::preset(p)
                .ok_or_else(|| EngineError::Config(format!("unknown preset {p:?}")))?,
            (None, Some(c)) => *c,
            _ => {
                return Err(EngineError::Config(
                    "a channel needs exactly one of `preset` or `capability`".into(),
                ))
            }
        };
        cap.hw_atomic_apply = self.delivery_mode == DeliveryMode::InlineAtomic;
        if cap.hw_atomic_apply && classify_level(&cap)? != SupportLevel::L4 {
            return Err(EngineError::Config(
                "inline_atomic delivery needs 128 PUT remote bits".into(),
            ));
        }
        Ok(cap)
    }
}

fn default_layout() -> u32 {
    DEFAULT_LAYOUT_BITS
}
fn default_poll() -> u64 {
    50
}
fn default_budget() -> usize {
    DEFAULT_REGION_BUDGET
}
fn default_one() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_timeout() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub rank: Rank,
    /// Control and data address of each rank, indexed by rank.
    #[serde(default)]
    pub ranks: Vec<SocketAddr>,
    #[serde(default = "default_layout")]
    pub layout_bits: u32,
    /// Idle interval of the progress agent; 0 spins.
    #[serde(default = "default_poll")]
    pub poll_interval_us: u64,
    #[serde(default = "default_budget")]
    pub region_budget: usize,
    #[serde(default)]
    pub verbosity: Verbosity,
    #[serde(default = "default_one")]
    pub max_fragments: u64,
    #[serde(default = "default_true")]
    pub get_side_notify: bool,
    #[serde(default = "default_timeout")]
    pub connect_timeout_ms: u64,
    #[serde(default)]
    pub affinity_hint: Option<usize>,
    pub channels: Vec<ChannelConfig>,
}

impl EndpointConfig {
    pub fn from_toml(s: &str) -> Result<Self, EngineError> {
        toml::from_str(s).map_err(|e| EngineError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p)
            .map_err(|e| EngineError::Config(format!("{}: {e}", p.display())))?;
        Self::from_toml(&s)
    }

    /// Load from `UNR_CONFIG`, then apply `UNR_RANK`.
    pub fn from_env() -> Result<Self, EngineError> {
        let path = std::env::var(CONFIG_ENV)
            .map_err(|_| EngineError::Config(format!("{CONFIG_ENV} is not set")))?;
        let mut c = Self::load(path)?;
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<(), EngineError> {
        if let Ok(r) = std::env::var(RANK_ENV) {
            self.rank = r
                .trim()
                .parse()
                .map_err(|_| EngineError::Config(format!("{RANK_ENV}={r:?} is not a rank")))?;
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<LayoutConfig, EngineError> {
        Ok(LayoutConfig::new(self.layout_bits)?)
    }

    pub fn world_size(&self) -> u32 {
        self.ranks.len().max(1) as u32
    }

    fn addrs(&self, offset: u16) -> Result<BTreeMap<Rank, SocketAddr>, EngineError> {
        self.ranks
            .iter()
            .enumerate()
            .map(|(r, a)| {
                let mut a = *a;
                let port = a
                    .port()
                    .checked_add(offset)
                    .ok_or_else(|| EngineError::Config(format!("port offset {offset} overflows {a}")))?;
                a.set_port(port);
                Ok((r as Rank, a))
            })
            .collect()
    }

    /// Connect every channel and build the endpoint.
    pub fn connect(&self) -> Result<Endpoint, EngineError> {
        if self.rank >= self.world_size() {
            return Err(EngineError::Config(format!(
                "rank {} outside a world of {}",
                self.rank,
                self.world_size()
            )));
        }
        let registry = Arc::new(Registry::new(self.region_budget));
        let diag = Arc::new(Diagnostics::new(self.verbosity == Verbosity::Warn));
        let interval = Duration::from_micros(self.poll_interval_us);
        let mut b = Endpoint::builder(self.rank, registry.clone())
            .layout(self.layout()?)
            .diagnostics(diag)
            .progress(Progress::Agent(interval))
            .max_fragments(self.max_fragments)
            .get_side_notify(self.get_side_notify)
            .affinity_hint(self.affinity_hint);
        let mut boot: Option<Arc<dyn Bootstrap>> = None;
        for (i, c) in self.channels.iter().enumerate() {
            let cap = c.capability()?;
            let opts = ChannelOptions {
                level2_mode: c.level2_mode,
                index_bits: c.index_bits,
            };
            let ch: Arc<dyn Channel> = match c.kind {
                ChannelKind::Tcp => {
                    let t = TcpChannel::establish(
                        self.rank,
                        &self.addrs(c.port_offset)?,
                        i as u16,
                        cap,
                        registry.clone(),
                        Duration::from_millis(self.connect_timeout_ms),
                    )?;
                    boot.get_or_insert_with(|| t.clone());
                    t
                }
                ChannelKind::Loopback => {
                    let f = LoopbackFabric::new(i as u16, cap, self.world_size())?;
                    let l = f.attach(self.rank, registry.clone());
                    boot.get_or_insert_with(|| l.clone());
                    l
                }
                ChannelKind::Simnet => {
                    return Err(EngineError::Config(
                        "simnet channels exist only inside the simulator; run the workload with simnet::sim_run"
                            .into(),
                    ))
                }
            };
            b = b.channel_with(ch, opts);
        }
        if let Some(bs) = boot {
            b = b.bootstrap(bs);
        }
        b.build()
    }
}
