//! Transport channels exposing notifiable PUT and GET.
//!
//! Every channel advertises a [`ChannelCapability`]; completion events carry
//! custom bits up to the advertised width and land in a per-channel
//! [`EventQueue`], or go straight to an inline handler on channels that apply
//! addends on delivery.

pub mod bootstrap;
pub mod capability;
pub mod event;
pub mod frame;
pub mod loopback;
pub mod tcp;

use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::memory::{MemoryError, Rank, RegionId, Registry};

pub use bootstrap::{Bootstrap, Inbox};
pub use capability::{classify_level, ChannelCapability, OpSide, SupportLevel};
pub use event::{CompletionEvent, EventOp, EventQueue, RemoteFault, Side, DEFAULT_QUEUE_CAPACITY};
pub use frame::{Frame, FrameError, FrameOp};
pub use loopback::{LoopbackChannel, LoopbackFabric};
pub use tcp::TcpChannel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("capability: {0}")]
    Capability(String),
    #[error("unsupported custom-bit width {0}")]
    UnsupportedWidth(u16),
    #[error("unknown rank {0}")]
    UnknownRank(Rank),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("io: {0}")]
    Io(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("timed out waiting for bootstrap message from rank {src} tag {tag:#x}")]
    BootstrapTimeout { src: Rank, tag: u64 },
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// Called instead of enqueueing when the channel applies addends itself.
pub type InlineApply = Arc<dyn Fn(&CompletionEvent) + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct PutRequest<'a> {
    pub region: RegionId,
    pub offset: u64,
    pub payload: &'a [u8],
    pub custom_remote: u128,
    pub custom_local: u128,
}

#[derive(Debug, Clone, Copy)]
pub struct GetRequest {
    /// Source region and offset at the remote rank.
    pub region: RegionId,
    pub offset: u64,
    pub len: u64,
    /// Where the data lands locally.
    pub local_region: RegionId,
    pub local_offset: u64,
    pub custom_local: u128,
    pub custom_remote: u128,
}

pub trait Channel: Send + Sync {
    fn id(&self) -> u16;
    fn rank(&self) -> Rank;
    fn capability(&self) -> &ChannelCapability;

    fn level(&self) -> SupportLevel {
        classify_level(self.capability()).expect("capability validated at construction")
    }

    /// Write `payload` at the remote region; a remote event with
    /// `custom_remote` follows the data, a local event with `custom_local`
    /// follows once the payload buffer is reusable.
    fn put(&self, dst: Rank, req: PutRequest<'_>) -> Result<(), TransportError>;

    fn get(&self, src: Rank, req: GetRequest) -> Result<(), TransportError>;

    /// Zero-length ordered side message delivering a full 128-bit word to `dst`.
    fn notify(&self, dst: Rank, bits: u128) -> Result<(), TransportError>;

    fn poll_events(&self, max: usize) -> Vec<CompletionEvent>;

    fn queue_overflows(&self) -> u64;

    fn set_inline_apply(&self, f: Option<InlineApply>);

    /// Frames (or frame-equivalent deliveries) sent so far.
    fn frames_sent(&self) -> u64;
}

pub(crate) fn validate_put(cap: &ChannelCapability, req: &PutRequest<'_>) -> Result<(), TransportError> {
    cap.check_bits(OpSide::PutRemote, req.custom_remote)?;
    cap.check_bits(OpSide::PutLocal, req.custom_local)?;
    if req.payload.len() as u64 > frame::MAX_PAYLOAD as u64 {
        return Err(TransportError::Capability(format!(
            "payload of {} bytes exceeds one frame",
            req.payload.len()
        )));
    }
    Ok(())
}

pub(crate) fn validate_get(cap: &ChannelCapability, req: &GetRequest) -> Result<(), TransportError> {
    if req.custom_remote != 0 && cap.get_remote_bits == 0 {
        return Err(TransportError::Capability(
            "remote GET notification requested on a channel without GET remote bits".into(),
        ));
    }
    cap.check_bits(OpSide::GetRemote, req.custom_remote)?;
    cap.check_bits(OpSide::GetLocal, req.custom_local)?;
    if req.len > frame::MAX_PAYLOAD as u64 {
        return Err(TransportError::Capability(format!("GET of {} bytes exceeds one frame", req.len)));
    }
    Ok(())
}

fn fault_of(e: &MemoryError) -> RemoteFault {
    match e {
        MemoryError::UnknownRegion(_) => RemoteFault::UnknownRegion,
        _ => RemoteFault::OutOfBounds,
    }
}

/// One rank's attachment to a channel: its registry and completion queue.
pub(crate) struct Port {
    pub rank: Rank,
    pub channel_id: u16,
    pub cap: ChannelCapability,
    pub registry: Arc<Registry>,
    pub queue: EventQueue,
    inline: RwLock<Option<InlineApply>>,
}

impl Port {
    pub fn new(rank: Rank, channel_id: u16, cap: ChannelCapability, registry: Arc<Registry>, capacity: usize) -> Self {
        Self {
            rank,
            channel_id,
            cap,
            registry,
            queue: EventQueue::new(capacity),
            inline: RwLock::new(None),
        }
    }

    pub fn set_inline(&self, f: Option<InlineApply>) {
        *self.inline.write().unwrap() = f;
    }

    pub fn deliver(&self, ev: CompletionEvent) {
        if ev.fault.is_none() {
            if let Some(f) = self.inline.read().unwrap().as_ref() {
                f(&ev);
                return;
            }
        }
        self.queue.push(ev);
    }

    pub fn event(&self, side: Side, op: EventOp, custom: u128) {
        self.deliver(CompletionEvent::ok(side, op, custom, self.channel_id));
    }

    pub fn fault(&self, op: EventOp, custom: u128, fault: RemoteFault) {
        self.deliver(CompletionEvent {
            side: Side::Local,
            op,
            custom,
            channel_id: self.channel_id,
            fault: Some(fault),
        });
    }

    /// Target side of a PUT: store the data, then raise the remote event.
    pub fn land_put(&self, region: RegionId, offset: u64, data: &[u8], custom_remote: u128) -> Result<(), RemoteFault> {
        self.registry
            .write(region, offset, data)
            .map_err(|e| fault_of(&e))?;
        self.event(Side::Remote, EventOp::Put, custom_remote);
        Ok(())
    }

    /// Target side of a GET: read the data; raise a remote event when the
    /// channel has GET remote bits.
    pub fn serve_get(&self, region: RegionId, offset: u64, len: u64, custom_remote: u128) -> Result<Vec<u8>, RemoteFault> {
        let data = self
            .registry
            .read(region, offset, len)
            .map_err(|e| fault_of(&e))?;
        if self.cap.get_remote_bits > 0 {
            self.event(Side::Remote, EventOp::Get, custom_remote);
        }
        Ok(data)
    }

    /// Requester side of a GET: store the response, then raise the local event.
    pub fn land_get_response(&self, region: RegionId, offset: u64, data: &[u8], custom_local: u128) {
        match self.registry.write(region, offset, data) {
            Ok(()) => self.event(Side::Local, EventOp::Get, custom_local),
            Err(e) => self.fault(EventOp::Get, custom_local, fault_of(&e)),
        }
    }
}
