//! Setup-time conversion of matched two-sided calls into notified puts.
//!
//! Receivers publish packed [`Blk`]s over the endpoint's bootstrap exchange;
//! senders turn each matching block into a put descriptor. After setup no
//! further handshakes are needed: the receiver's bound signal fires when
//! the data lands and the sender's fires when its buffer is reusable.

use std::time::Duration;

use thiserror::Error;
use unr::engine::{Endpoint, EngineError, SignalHandle, TransferDescriptor, TransferPlan};
use unr::memory::{Blk, Rank, RegisteredRegion, BLK_ENCODED_LEN};
use unr::transport::{Bootstrap, TransportError};

pub const DEFAULT_SETUP_TIMEOUT: Duration = Duration::from_secs(10);

const P2P_TAG: u64 = 0xC000_0000_0000_0000;
const A2A_TAG: u64 = 0xC100_0000_0000_0000;
const USER_TAG_MASK: u64 = 0x00FF_FFFF_FFFF_FFFF;

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("no matching call with tag {tag} from rank {peer} during setup")]
    TagMismatch { peer: Rank, tag: u64 },
    #[error("inconsistent geometry: {0}")]
    Geometry(String),
    #[error("endpoint has no bootstrap exchange")]
    NoBootstrap,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Transport(TransportError),
}

fn bootstrap(ep: &Endpoint) -> Result<&dyn Bootstrap, ConvertError> {
    ep.bootstrap().map(|b| b.as_ref()).ok_or(ConvertError::NoBootstrap)
}

fn recv_or_mismatch(b: &dyn Bootstrap, peer: Rank, key: u64, tag: u64, timeout: Duration) -> Result<Vec<u8>, ConvertError> {
    b.recv(peer, key, timeout).map_err(|e| match e {
        TransportError::BootstrapTimeout { .. } => ConvertError::TagMismatch { peer, tag },
        e => ConvertError::Transport(e),
    })
}

fn bytes(count: u64, elem: u64) -> Result<u64, ConvertError> {
    count
        .checked_mul(elem)
        .ok_or_else(|| ConvertError::Geometry(format!("{count} elements of {elem} bytes overflow")))
}

struct PendingSend {
    local: Blk,
    peer: Rank,
    tag: u64,
}

struct PendingRecv {
    blk: Blk,
    peer: Rank,
    tag: u64,
}

/// Collects isend/irecv declarations and matches them in [`commit`].
///
/// Both peers must declare their halves before committing; receive blocks
/// are published before any send blocks are awaited, so symmetric exchanges
/// cannot deadlock.
///
/// [`commit`]: ConvertSession::commit
pub struct ConvertSession<'a> {
    ep: &'a Endpoint,
    timeout: Duration,
    sends: Vec<PendingSend>,
    recvs: Vec<PendingRecv>,
}

impl<'a> ConvertSession<'a> {
    pub fn new(ep: &'a Endpoint) -> Self {
        Self {
            ep,
            timeout: DEFAULT_SETUP_TIMEOUT,
            sends: Vec::new(),
            recvs: Vec::new(),
        }
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    /// Declare a send of `count` elements of `elem` bytes. Returns the
    /// position of its descriptor in the committed list.
    #[allow(clippy::too_many_arguments)]
    pub fn isend(
        &mut self,
        region: &RegisteredRegion,
        offset: u64,
        count: u64,
        elem: u64,
        peer: Rank,
        tag: u64,
        finish: Option<&SignalHandle>,
    ) -> Result<usize, ConvertError> {
        let local = self.ep.blk(region, offset, bytes(count, elem)?, finish)?;
        self.sends.push(PendingSend { local, peer, tag });
        Ok(self.sends.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn irecv(
        &mut self,
        region: &RegisteredRegion,
        offset: u64,
        count: u64,
        elem: u64,
        peer: Rank,
        tag: u64,
        finish: &SignalHandle,
    ) -> Result<(), ConvertError> {
        let blk = self.ep.blk(region, offset, bytes(count, elem)?, Some(finish))?;
        self.recvs.push(PendingRecv { blk, peer, tag });
        Ok(())
    }

    /// Exchange receive blocks and return one put descriptor per isend.
    pub fn commit(self) -> Result<Vec<TransferDescriptor>, ConvertError> {
        let b = bootstrap(self.ep)?;
        for r in &self.recvs {
            b.send(r.peer, P2P_TAG | (r.tag & USER_TAG_MASK), &r.blk.pack())
                .map_err(ConvertError::Transport)?;
        }
        let mut out = Vec::with_capacity(self.sends.len());
        for s in &self.sends {
            let raw = recv_or_mismatch(b, s.peer, P2P_TAG | (s.tag & USER_TAG_MASK), s.tag, self.timeout)?;
            let remote = Blk::unpack(&raw).map_err(|e| ConvertError::Geometry(e.to_string()))?;
            if remote.size != s.local.size {
                return Err(ConvertError::Geometry(format!(
                    "tag {} to rank {}: sending {} bytes into a {}-byte receive",
                    s.tag, s.peer, s.local.size, remote.size
                )));
            }
            out.push(TransferDescriptor::put(s.local, remote));
        }
        Ok(out)
    }
}

/// One side of a [`convert_sendrecv`].
#[derive(Debug, Clone, Copy)]
pub struct BufSpec<'a> {
    pub region: &'a RegisteredRegion,
    pub offset: u64,
    pub count: u64,
}

/// Send to `dst` while expecting a message from `src`. Each direction is the
/// other's pre-synchronization once iterations alternate buffers.
#[allow(clippy::too_many_arguments)]
pub fn convert_sendrecv(
    ep: &Endpoint,
    send: BufSpec<'_>,
    dst: Rank,
    recv: BufSpec<'_>,
    src: Rank,
    elem: u64,
    tag: u64,
    send_finish: Option<&SignalHandle>,
    recv_finish: &SignalHandle,
) -> Result<TransferDescriptor, ConvertError> {
    let mut s = ConvertSession::new(ep);
    s.irecv(recv.region, recv.offset, recv.count, elem, src, tag, recv_finish)?;
    s.isend(send.region, send.offset, send.count, elem, dst, tag, send_finish)?;
    Ok(s.commit()?.remove(0))
}

/// Per-peer counts and displacements in elements, indexed by group position.
#[derive(Debug, Clone, Copy)]
pub struct Geometry<'a> {
    pub region: &'a RegisteredRegion,
    pub counts: &'a [u64],
    pub displs: &'a [u64],
}

/// Element range of slab `s` out of `n` within a block of `count` elements.
pub fn slab_range(count: u64, n: u64, s: u64) -> (u64, u64) {
    let (base, rem) = (count / n, count % n);
    (s * base + s.min(rem), base + u64::from(s < rem))
}

#[derive(Debug, Clone, Copy)]
struct LocalCopy {
    src: Blk,
    dst: Blk,
}

/// One independently startable slice of an all-to-all exchange.
#[derive(Debug)]
pub struct Slab {
    pub plan: TransferPlan,
    /// Fires once every contributing peer's slice has landed. `None` when no
    /// remote peer contributes to this slab.
    pub recv: Option<SignalHandle>,
    /// Fires once every outgoing slice may be reused.
    pub sent: Option<SignalHandle>,
    local: Option<LocalCopy>,
}

impl Slab {
    /// Copy the local contribution and issue the remote puts.
    pub fn start(&self, ep: &Endpoint) -> Result<(), ConvertError> {
        if let Some(c) = self.local {
            let reg = ep.registry();
            let data = reg.read(c.src.region, c.src.offset, c.src.size).map_err(EngineError::from)?;
            reg.write(c.dst.region, c.dst.offset, &data).map_err(EngineError::from)?;
        }
        ep.plan_start(&self.plan);
        Ok(())
    }

    pub fn remote_contributors(&self) -> i64 {
        self.recv.as_ref().map_or(0, |s| s.num_event())
    }
}

#[derive(Debug)]
pub struct Alltoallv {
    pub slabs: Vec<Slab>,
}

impl Alltoallv {
    pub fn start_all(&self, ep: &Endpoint) -> Result<(), ConvertError> {
        self.slabs.iter().try_for_each(|s| s.start(ep))
    }
}

/// Record an all-to-all-v exchange over `group` as `slabs` puts per peer.
///
/// Counts are cross-checked with every peer at setup. Zero-sized slices are
/// elided and each receive signal counts only the peers that contribute.
pub fn convert_alltoallv(
    ep: &Endpoint,
    send: Geometry<'_>,
    recv: Geometry<'_>,
    elem: u64,
    group: &[Rank],
    slabs: u64,
) -> Result<Alltoallv, ConvertError> {
    let n = group.len();
    let me = group
        .iter()
        .position(|&r| r == ep.rank())
        .ok_or_else(|| ConvertError::Geometry(format!("rank {} is not in the group", ep.rank())))?;
    for (what, g) in [("send", &send), ("recv", &recv)] {
        if g.counts.len() != n || g.displs.len() != n {
            return Err(ConvertError::Geometry(format!(
                "{what} counts/displs have {}/{} entries for a group of {n}",
                g.counts.len(),
                g.displs.len()
            )));
        }
    }
    if slabs == 0 {
        return Err(ConvertError::Geometry("at least one slab is required".into()));
    }
    if send.counts[me] != recv.counts[me] {
        return Err(ConvertError::Geometry(format!(
            "local contribution sends {} but receives {} elements",
            send.counts[me], recv.counts[me]
        )));
    }
    let piece = |g: &Geometry<'_>, q: usize, s: u64| -> Result<Option<(u64, u64)>, ConvertError> {
        let (off, len) = slab_range(g.counts[q], slabs, s);
        if len == 0 {
            return Ok(None);
        }
        Ok(Some((bytes(g.displs[q] + off, elem)?, bytes(len, elem)?)))
    };

    // per-slab signals, created before any block is published
    let mut recv_sigs = Vec::new();
    let mut sent_sigs = Vec::new();
    for s in 0..slabs {
        let contributors = (0..n).filter(|&q| q != me && slab_range(recv.counts[q], slabs, s).1 > 0).count();
        let targets = (0..n).filter(|&q| q != me && slab_range(send.counts[q], slabs, s).1 > 0).count();
        recv_sigs.push(match contributors {
            0 => None,
            c => Some(ep.signal_create(c as i64)?),
        });
        sent_sigs.push(match targets {
            0 => None,
            c => Some(ep.signal_create(c as i64)?),
        });
    }

    let b = bootstrap(ep)?;
    let seq = A2A_TAG;
    for (q, &peer) in group.iter().enumerate() {
        if q == me {
            continue;
        }
        let mut msg = Vec::new();
        msg.extend_from_slice(&send.counts[q].to_le_bytes());
        msg.extend_from_slice(&recv.counts[q].to_le_bytes());
        for s in 0..slabs {
            if let Some((off, len)) = piece(&recv, q, s)? {
                msg.extend_from_slice(&ep.blk(recv.region, off, len, recv_sigs[s as usize].as_ref())?.pack());
            }
        }
        b.send(peer, seq, &msg).map_err(ConvertError::Transport)?;
    }

    let mut descs: Vec<Vec<TransferDescriptor>> = (0..slabs).map(|_| Vec::new()).collect();
    for (q, &peer) in group.iter().enumerate() {
        if q == me {
            continue;
        }
        let msg = recv_or_mismatch(b, peer, seq, 0, DEFAULT_SETUP_TIMEOUT)?;
        if msg.len() < 16 {
            return Err(ConvertError::Geometry(format!("short geometry message from rank {peer}")));
        }
        let their_send = u64::from_le_bytes(msg[0..8].try_into().unwrap());
        let their_recv = u64::from_le_bytes(msg[8..16].try_into().unwrap());
        if their_send != recv.counts[q] || their_recv != send.counts[q] {
            return Err(ConvertError::Geometry(format!(
                "rank {peer} sends {their_send} and expects {their_recv} elements; \
                 rank {} expects {} and sends {}",
                ep.rank(),
                recv.counts[q],
                send.counts[q]
            )));
        }
        let mut blks = msg[16..].chunks_exact(BLK_ENCODED_LEN);
        for s in 0..slabs {
            let Some((off, len)) = piece(&send, q, s)? else { continue };
            let remote = blks
                .next()
                .ok_or_else(|| ConvertError::Geometry(format!("rank {peer} published too few blocks")))
                .and_then(|raw| Blk::unpack(raw).map_err(|e| ConvertError::Geometry(e.to_string())))?;
            let local = ep.blk(send.region, off, len, sent_sigs[s as usize].as_ref())?;
            descs[s as usize].push(TransferDescriptor::put(local, remote));
        }
    }

    let mut out = Vec::with_capacity(slabs as usize);
    for (s, d) in descs.into_iter().enumerate() {
        let local = match (piece(&send, me, s as u64)?, piece(&recv, me, s as u64)?) {
            (Some((so, len)), Some((ro, _))) => Some(LocalCopy {
                src: ep.blk(send.region, so, len, None)?,
                dst: ep.blk(recv.region, ro, len, None)?,
            }),
            _ => None,
        };
        out.push(Slab {
            plan: ep.plan_record(d)?,
            recv: recv_sigs[s].take(),
            sent: sent_sigs[s].take(),
            local,
        });
    }
    Ok(Alltoallv { slabs: out })
}

