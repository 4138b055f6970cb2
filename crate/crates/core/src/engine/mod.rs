//! Endpoints: notified PUT/GET over one or more channels.
//!
//! An endpoint owns a signal table, a region registry and a list of
//! channels. Each channel gets a codec per operation side chosen from its
//! capability; striped messages carry the fragment addends so the
//! receiver's signal sees a net effect of -1 per message regardless of `K`.

pub mod codec;
pub mod config;
pub mod dispatch;
pub mod plan;
pub mod progress;
pub mod stripe;

use std::ops::Deref;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::diag::{DiagnosticSink, Diagnostics, WarningKind};
use crate::memory::{Blk, MemoryError, Rank, RegionId, RegisteredRegion, Registry, SharedBuffer};
use crate::signal::{encode_addends, LayoutConfig, Signal, SignalError, SignalLocator};
use crate::transport::{
    classify_level, Bootstrap, Channel, GetRequest, OpSide, PutRequest, SupportLevel, TransportError,
};

pub use codec::{CodecForm, CustomBitsCodec, Level2Mode};
pub use config::{ChannelConfig, ChannelKind, DeliveryMode, EndpointConfig};
pub use dispatch::{ChannelCodecs, SignalTable};
pub use plan::{OpOptions, TransferDescriptor, TransferKind, TransferPlan};
pub use progress::{ProgressSnapshot, DEFAULT_POLL_INTERVAL};
pub use stripe::{fragment_count, stripe, Segment};

use dispatch::{Dispatcher, TriggerLog};
use plan::{Fragment, Prepared};
use progress::{ProgressAgent, ProgressStats};

/// Events drained per channel per progress step.
const POLL_BATCH: usize = 1024;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("capability: {0}")]
    Capability(String),
    #[error("budget: {0}")]
    Budget(String),
    #[error("size mismatch: local block {local} bytes, remote block {remote} bytes")]
    SizeMismatch { local: u64, remote: u64 },
    #[error("block belongs to rank {blk}, not to this endpoint (rank {rank})")]
    NotLocal { blk: Rank, rank: Rank },
    #[error("no channel with index {0}")]
    UnknownChannel(usize),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(SignalError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl From<SignalError> for EngineError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::Budget { .. } => EngineError::Budget(e.to_string()),
            e => EngineError::Signal(e),
        }
    }
}

/// How the progress agent runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    /// Background thread polling with the given idle interval.
    Agent(Duration),
    /// The application calls `progress_step` itself.
    Manual,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ChannelOptions {
    pub level2_mode: Level2Mode,
    /// Index bits on 32-bit split sides.
    pub index_bits: Option<u32>,
}

struct ChannelSlot {
    channel: Arc<dyn Channel>,
    level: SupportLevel,
    codecs: ChannelCodecs,
    dispatcher: Arc<Dispatcher>,
}

impl ChannelSlot {
    fn can_stripe(&self) -> bool {
        match self.codecs.put_remote {
            None => true,
            Some(c) => c.carries_addend(),
        }
    }
}

struct Core {
    rank: Rank,
    layout: LayoutConfig,
    table: Arc<SignalTable>,
    registry: Arc<Registry>,
    diag: Arc<Diagnostics>,
    slots: Vec<ChannelSlot>,
    stats: ProgressStats,
}

impl Core {
    fn progress_step(&self) -> usize {
        let mut applied = 0;
        for s in &self.slots {
            // level-4 queues only ever hold fault events
            for ev in s.channel.poll_events(POLL_BATCH) {
                if s.dispatcher.dispatch(&ev) {
                    applied += 1;
                }
            }
        }
        self.stats.record(applied);
        applied
    }
}

/// A signal created on an endpoint, together with its table index.
#[derive(Debug, Clone)]
pub struct SignalHandle {
    pub index: u32,
    signal: Arc<Signal>,
}

impl SignalHandle {
    pub fn signal(&self) -> &Arc<Signal> {
        &self.signal
    }
}

impl Deref for SignalHandle {
    type Target = Signal;

    fn deref(&self) -> &Signal {
        &self.signal
    }
}

pub struct EndpointBuilder {
    rank: Rank,
    registry: Arc<Registry>,
    layout: LayoutConfig,
    channels: Vec<(Arc<dyn Channel>, ChannelOptions)>,
    diag: Option<Arc<Diagnostics>>,
    progress: Progress,
    max_fragments: u64,
    get_side_notify: bool,
    bootstrap: Option<Arc<dyn Bootstrap>>,
    affinity_hint: Option<usize>,
}

impl EndpointBuilder {
    pub fn new(rank: Rank, registry: Arc<Registry>) -> Self {
        Self {
            rank,
            registry,
            layout: LayoutConfig::default(),
            channels: Vec::new(),
            diag: None,
            progress: Progress::Agent(DEFAULT_POLL_INTERVAL),
            max_fragments: 1,
            get_side_notify: true,
            bootstrap: None,
            affinity_hint: None,
        }
    }

    pub fn layout(mut self, l: LayoutConfig) -> Self {
        self.layout = l;
        self
    }

    pub fn channel(self, c: Arc<dyn Channel>) -> Self {
        self.channel_with(c, ChannelOptions::default())
    }

    pub fn channel_with(mut self, c: Arc<dyn Channel>, opts: ChannelOptions) -> Self {
        self.channels.push((c, opts));
        self
    }

    pub fn diagnostics(mut self, d: Arc<Diagnostics>) -> Self {
        self.diag = Some(d);
        self
    }

    pub fn progress(mut self, p: Progress) -> Self {
        self.progress = p;
        self
    }

    /// Default fragment limit for operations that do not set one.
    pub fn max_fragments(mut self, k: u64) -> Self {
        self.max_fragments = k.max(1);
        self
    }

    /// Emulate remote GET notification with a side message on channels
    /// without GET remote bits.
    pub fn get_side_notify(mut self, on: bool) -> Self {
        self.get_side_notify = on;
        self
    }

    pub fn bootstrap(mut self, b: Arc<dyn Bootstrap>) -> Self {
        self.bootstrap = Some(b);
        self
    }

    /// Recorded only; the agent is not pinned.
    pub fn affinity_hint(mut self, cpu: Option<usize>) -> Self {
        self.affinity_hint = cpu;
        self
    }

    pub fn build(self) -> Result<Endpoint, EngineError> {
        if self.channels.is_empty() {
            return Err(EngineError::Config("an endpoint needs at least one channel".into()));
        }
        let diag = self.diag.unwrap_or_default();
        let table = Arc::new(SignalTable::default());
        let triggers = Arc::new(TriggerLog::default());
        let mut slots = Vec::new();
        for (channel, opts) in self.channels {
            let cap = *channel.capability();
            let level = classify_level(&cap)?;
            let split32 = match opts.level2_mode {
                Level2Mode::Auto => self.max_fragments > 1,
                Level2Mode::IndexOnly => false,
                Level2Mode::Split => true,
            };
            let side = |s| CustomBitsCodec::for_width(cap.width(s), split32, opts.index_bits);
            let codecs = ChannelCodecs {
                put_remote: side(OpSide::PutRemote)?,
                put_local: side(OpSide::PutLocal)?,
                get_remote: side(OpSide::GetRemote)?,
                get_local: side(OpSide::GetLocal)?,
            };
            let side_messages = level == SupportLevel::L0 || (self.get_side_notify && cap.get_remote_bits == 0);
            if side_messages && !cap.order_preserving {
                return Err(EngineError::Capability(format!(
                    "channel {} needs side messages but does not preserve order",
                    channel.id()
                )));
            }
            let dispatcher = Arc::new(Dispatcher {
                table: table.clone(),
                diag: diag.clone(),
                codecs,
                triggers: triggers.clone(),
            });
            if level == SupportLevel::L4 {
                let d = dispatcher.clone();
                channel.set_inline_apply(Some(Arc::new(move |ev| {
                    d.dispatch(ev);
                })));
            }
            slots.push(ChannelSlot {
                channel,
                level,
                codecs,
                dispatcher,
            });
        }
        let core = Arc::new(Core {
            rank: self.rank,
            layout: self.layout,
            table,
            registry: self.registry,
            diag,
            slots,
            stats: ProgressStats::default(),
        });
        let polled = core.slots.iter().any(|s| s.level.needs_progress());
        let agent = match self.progress {
            Progress::Agent(interval) if polled => {
                let c = core.clone();
                Some(ProgressAgent::spawn(format!("unr-progress-{}", self.rank), interval, move || {
                    c.progress_step()
                })?)
            }
            _ => None,
        };
        Ok(Endpoint {
            core,
            agent,
            triggers,
            bootstrap: self.bootstrap,
            max_fragments: self.max_fragments,
            get_side_notify: self.get_side_notify,
            affinity_hint: self.affinity_hint,
        })
    }
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        EngineError::Transport(e.into())
    }
}

pub struct Endpoint {
    core: Arc<Core>,
    agent: Option<ProgressAgent>,
    triggers: Arc<TriggerLog>,
    bootstrap: Option<Arc<dyn Bootstrap>>,
    max_fragments: u64,
    get_side_notify: bool,
    affinity_hint: Option<usize>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("rank", &self.core.rank)
            .field("channels", &self.core.slots.len())
            .field("signals", &self.core.table.len())
            .finish()
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.agent.take();
        for s in &self.core.slots {
            if s.level == SupportLevel::L4 {
                s.channel.set_inline_apply(None);
            }
        }
    }
}

impl Endpoint {
    pub fn builder(rank: Rank, registry: Arc<Registry>) -> EndpointBuilder {
        EndpointBuilder::new(rank, registry)
    }

    pub fn rank(&self) -> Rank {
        self.core.rank
    }

    pub fn layout(&self) -> LayoutConfig {
        self.core.layout
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.core.registry
    }

    pub fn diagnostics(&self) -> &Arc<Diagnostics> {
        &self.core.diag
    }

    pub fn bootstrap(&self) -> Option<&Arc<dyn Bootstrap>> {
        self.bootstrap.as_ref()
    }

    pub fn affinity_hint(&self) -> Option<usize> {
        self.affinity_hint
    }

    pub fn channel_count(&self) -> usize {
        self.core.slots.len()
    }

    pub fn channel_level(&self, i: usize) -> Option<SupportLevel> {
        self.core.slots.get(i).map(|s| s.level)
    }

    pub fn channel_codecs(&self, i: usize) -> Option<ChannelCodecs> {
        self.core.slots.get(i).map(|s| s.codecs)
    }

    pub fn has_progress_agent(&self) -> bool {
        self.agent.is_some()
    }

    pub fn frames_sent(&self) -> u64 {
        self.core.slots.iter().map(|s| s.channel.frames_sent()).sum()
    }

    pub fn queue_overflows(&self) -> u64 {
        self.core.slots.iter().map(|s| s.channel.queue_overflows()).sum()
    }

    pub fn register(&self, buf: &SharedBuffer) -> Result<RegisteredRegion, EngineError> {
        Ok(self.core.registry.register_all(buf)?)
    }

    pub fn blk(&self, region: &RegisteredRegion, offset: u64, size: u64, bound: Option<&SignalHandle>) -> Result<Blk, EngineError> {
        Ok(Blk::new(self.core.rank, region, offset, size, bound.map(|s| s.index))?)
    }

    pub fn signal_create(&self, num_event: i64) -> Result<SignalHandle, EngineError> {
        let (index, signal) = self
            .core
            .table
            .create(num_event, self.core.layout, self.core.diag.clone())?;
        Ok(SignalHandle { index, signal })
    }

    pub fn signal(&self, index: u32) -> Option<SignalHandle> {
        self.core
            .table
            .get(index as u64)
            .map(|signal| SignalHandle { index, signal })
    }

    pub fn signal_destroy(&self, index: u32) -> bool {
        self.core.table.remove(index).is_some()
    }

    /// Drain every channel's event queue once. Returns the number of addends applied.
    pub fn progress_step(&self) -> usize {
        self.core.progress_step()
    }

    pub fn progress_stats(&self) -> ProgressSnapshot {
        self.core.stats.snapshot()
    }

    /// Start recording the order in which signals trigger.
    pub fn enable_trigger_log(&self) {
        self.triggers.enable();
    }

    pub fn take_trigger_log(&self) -> Vec<u64> {
        self.triggers.take()
    }

    fn check_local(&self, b: &Blk) -> Result<(), EngineError> {
        if b.rank != self.core.rank {
            return Err(EngineError::NotLocal {
                blk: b.rank,
                rank: self.core.rank,
            });
        }
        Ok(self.core.registry.check(b.region, b.offset, b.size)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn prepare(
        &self,
        kind: TransferKind,
        peer: Rank,
        local: (RegionId, u64),
        remote: (RegionId, u64),
        size: u64,
        local_sig: Option<u32>,
        remote_sig: Option<u32>,
        opts: &OpOptions,
    ) -> Result<Prepared, EngineError> {
        let slots = &self.core.slots;
        let all: Vec<usize>;
        let chans = match &opts.channels {
            Some(c) => c.as_slice(),
            None => {
                all = (0..slots.len()).collect();
                &all
            }
        };
        if let Some(&bad) = chans.iter().find(|&&c| c >= slots.len()) {
            return Err(EngineError::UnknownChannel(bad));
        }
        let layout = self.core.layout;
        let maxf = opts.max_fragments.unwrap_or(self.max_fragments);
        let segs = stripe(size, chans, maxf, layout.max_fragments());
        let k = segs.len() as u64;
        let addends = encode_addends(k, layout)?;
        let (remote_side, local_side) = match kind {
            TransferKind::Put => (OpSide::PutRemote, OpSide::PutLocal),
            TransferKind::Get => (OpSide::GetRemote, OpSide::GetLocal),
        };
        let local_loc = SignalLocator::of(local_sig);
        let remote_loc = SignalLocator::of(remote_sig);
        let mut frags = Vec::with_capacity(segs.len());
        for (i, seg) in segs.iter().enumerate() {
            let slot = &slots[seg.channel];
            let a = addends.get(i as u64);
            let striped = k > 1;
            if striped && !slot.can_stripe() {
                return Err(EngineError::Capability(format!(
                    "channel {} (level {}) cannot carry fragment addends; multi-channel transfer unsupported",
                    seg.channel,
                    slot.level.as_u8()
                )));
            }
            let local_bits = match (local_sig, slot.codecs.side(local_side)) {
                (None, _) => 0,
                (Some(_), None) => {
                    return Err(EngineError::Capability(format!(
                        "channel {} has no {local_side:?} bits",
                        seg.channel
                    )))
                }
                (Some(_), Some(c)) if striped && !c.carries_addend() => {
                    return Err(EngineError::Capability(format!(
                        "{local_side:?} side of channel {} is index-only; cannot stripe",
                        seg.channel
                    )))
                }
                (Some(_), Some(c)) => c.encode(local_loc, a)?,
            };
            let (remote_bits, side_bits) = match (remote_sig, slot.codecs.side(remote_side)) {
                (None, _) => (0, None),
                (Some(_), Some(c)) if striped && !c.carries_addend() => {
                    return Err(EngineError::Capability(format!(
                        "{remote_side:?} side of channel {} is index-only; cannot stripe",
                        seg.channel
                    )))
                }
                (Some(_), Some(c)) => (c.encode(remote_loc, a)?, None),
                (Some(_), None) if kind == TransferKind::Put || self.get_side_notify => {
                    (0, Some(CustomBitsCodec::side_message().encode(remote_loc, a)?))
                }
                (Some(_), None) => {
                    return Err(EngineError::Capability(format!(
                        "channel {} cannot notify the GET target and side notification is disabled",
                        seg.channel
                    )))
                }
            };
            frags.push(Fragment {
                slot: seg.channel,
                offset: seg.offset,
                len: seg.len,
                remote_bits,
                local_bits,
                side_bits,
            });
        }
        Ok(Prepared {
            kind,
            peer,
            local_region: local.0,
            local_offset: local.1,
            remote_region: remote.0,
            remote_offset: remote.1,
            size,
            frags,
        })
    }

    fn prepare_blk(&self, kind: TransferKind, local: &Blk, remote: &Blk, opts: &OpOptions) -> Result<Prepared, EngineError> {
        if local.size != remote.size {
            return Err(EngineError::SizeMismatch {
                local: local.size,
                remote: remote.size,
            });
        }
        self.check_local(local)?;
        self.prepare(
            kind,
            remote.rank,
            (local.region, local.offset),
            (remote.region, remote.offset),
            local.size,
            opts.local_sig.or(local.bound_signal),
            opts.remote_sig.or(remote.bound_signal),
            opts,
        )
    }

    fn issue(&self, p: &Prepared, data: Option<&[u8]>) -> Result<(), EngineError> {
        let owned;
        let data = match (p.kind, data) {
            (TransferKind::Put, None) => {
                owned = self.core.registry.read(p.local_region, p.local_offset, p.size)?;
                owned.as_slice()
            }
            (_, Some(d)) => d,
            (TransferKind::Get, None) => &[],
        };
        for f in &p.frags {
            let ch = &self.core.slots[f.slot].channel;
            match p.kind {
                TransferKind::Put => ch.put(
                    p.peer,
                    PutRequest {
                        region: p.remote_region,
                        offset: p.remote_offset + f.offset,
                        payload: &data[f.offset as usize..(f.offset + f.len) as usize],
                        custom_remote: f.remote_bits,
                        custom_local: f.local_bits,
                    },
                )?,
                TransferKind::Get => ch.get(
                    p.peer,
                    GetRequest {
                        region: p.remote_region,
                        offset: p.remote_offset + f.offset,
                        len: f.len,
                        local_region: p.local_region,
                        local_offset: p.local_offset + f.offset,
                        custom_local: f.local_bits,
                        custom_remote: f.remote_bits,
                    },
                )?,
            }
            if let Some(bits) = f.side_bits {
                ch.notify(p.peer, bits)?;
            }
        }
        Ok(())
    }

    /// Notified PUT of `local` into `remote`.
    pub fn put(&self, local: &Blk, remote: &Blk, opts: &OpOptions) -> Result<(), EngineError> {
        let p = self.prepare_blk(TransferKind::Put, local, remote, opts)?;
        self.issue(&p, None)
    }

    /// Notified GET of `remote` into `local`.
    pub fn get(&self, local: &Blk, remote: &Blk, opts: &OpOptions) -> Result<(), EngineError> {
        let p = self.prepare_blk(TransferKind::Get, local, remote, opts)?;
        self.issue(&p, None)
    }

    /// PUT of `data` at an explicit remote region and offset. Signals come
    /// from `opts` only.
    pub fn put_raw(&self, dst: Rank, region: RegionId, offset: u64, data: &[u8], opts: &OpOptions) -> Result<(), EngineError> {
        let p = self.prepare(
            TransferKind::Put,
            dst,
            (RegionId(0), 0),
            (region, offset),
            data.len() as u64,
            opts.local_sig,
            opts.remote_sig,
            opts,
        )?;
        self.issue(&p, Some(data))
    }

    /// Validate and encode a sequence of transfers for repeated execution.
    pub fn plan_record(&self, descriptors: Vec<TransferDescriptor>) -> Result<TransferPlan, EngineError> {
        let prepared = descriptors
            .iter()
            .map(|d| self.prepare_blk(d.kind, &d.local, &d.remote, &d.opts))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TransferPlan {
            descriptors,
            prepared,
        })
    }

    /// Issue every transfer of `plan`; failures are reported as diagnostics.
    pub fn plan_start(&self, plan: &TransferPlan) {
        for (i, p) in plan.prepared.iter().enumerate() {
            if let Err(e) = self.issue(p, None) {
                self.core
                    .diag
                    .record(None, WarningKind::PlanIssue, format!("plan descriptor {i}: {e}"));
            }
        }
    }
}
