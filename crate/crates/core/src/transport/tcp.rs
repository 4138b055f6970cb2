//! TCP channel emulating one-sided writes over ordered byte streams.
//!
//! Every pair of ranks shares one connection; the lower rank listens and the
//! higher rank connects and greets with a HELLO control frame. A reader
//! thread per connection lands PUT data, serves GET requests and raises
//! completion events, so the target's application threads take no part in
//! the transfer.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::frame::CtrlKind;
use super::{
    validate_get, validate_put, Bootstrap, Channel, ChannelCapability, CompletionEvent, EventOp,
    Frame, FrameOp, GetRequest, Inbox, InlineApply, Port, PutRequest, RemoteFault, Side,
    TransportError, DEFAULT_QUEUE_CAPACITY,
};
use crate::memory::{Rank, RegionId, Registry};

struct PeerLink {
    stream: Mutex<TcpStream>,
}

impl PeerLink {
    fn send(&self, f: &Frame) -> Result<(), TransportError> {
        let bytes = f.encode();
        let mut s = self.stream.lock().unwrap();
        s.write_all(&bytes)?;
        Ok(())
    }
}

pub struct TcpChannel {
    port: Arc<Port>,
    world_size: u32,
    peers: HashMap<Rank, Arc<PeerLink>>,
    inbox: Arc<Inbox>,
    frames: AtomicU64,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

fn connect_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(TransportError::Io(format!("connect {addr}: {e}")))
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn accept_until(listener: &TcpListener, deadline: Instant) -> Result<TcpStream, TransportError> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Io("timed out accepting peers".into()));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

impl TcpChannel {
    /// Connect this rank to every other rank in `addrs`.
    pub fn establish(
        rank: Rank,
        addrs: &BTreeMap<Rank, SocketAddr>,
        channel_id: u16,
        cap: ChannelCapability,
        registry: Arc<Registry>,
        timeout: Duration,
    ) -> Result<Arc<Self>, TransportError> {
        cap.validate()?;
        if !cap.order_preserving {
            return Err(TransportError::Capability(
                "TCP streams are ordered; order_preserving must be true".into(),
            ));
        }
        let me = *addrs.get(&rank).ok_or(TransportError::UnknownRank(rank))?;
        let deadline = Instant::now() + timeout;
        let listener = TcpListener::bind(me)?;
        let mut streams: Vec<(Rank, TcpStream)> = Vec::new();
        for (&peer, &addr) in addrs.range(..rank) {
            let mut s = connect_retry(addr, deadline)?;
            let mut hello = Frame::ctrl(CtrlKind::Hello, &[]);
            hello.region_id = rank;
            hello.write_to(&mut s)?;
            streams.push((peer, s));
        }
        let higher = addrs.range(rank + 1..).count();
        for _ in 0..higher {
            let mut s = accept_until(&listener, deadline)?;
            s.set_read_timeout(Some(timeout))?;
            let hello = Frame::read_from(&mut s).map_err(|e| TransportError::Protocol(e.to_string()))?;
            if hello.ctrl_kind() != Some(CtrlKind::Hello) {
                return Err(TransportError::Protocol("expected HELLO".into()));
            }
            s.set_read_timeout(None)?;
            streams.push((hello.region_id, s));
        }

        let port = Arc::new(Port::new(rank, channel_id, cap, registry, DEFAULT_QUEUE_CAPACITY));
        let inbox = Arc::new(Inbox::new());
        let mut peers = HashMap::new();
        let mut readers = Vec::new();
        for (peer, s) in streams {
            s.set_nodelay(true)?;
            let read_half = s.try_clone()?;
            let link = Arc::new(PeerLink {
                stream: Mutex::new(s),
            });
            peers.insert(peer, link.clone());
            let port = port.clone();
            let inbox = inbox.clone();
            readers.push(
                thread::Builder::new()
                    .name(format!("unr-tcp-{rank}<-{peer}"))
                    .spawn(move || reader_loop(peer, read_half, link, port, inbox))?,
            );
        }
        Ok(Arc::new(Self {
            port,
            world_size: addrs.len() as u32,
            peers,
            inbox,
            frames: AtomicU64::new(0),
            readers: Mutex::new(readers),
        }))
    }

    fn link(&self, r: Rank) -> Result<&Arc<PeerLink>, TransportError> {
        self.peers.get(&r).ok_or(TransportError::UnknownRank(r))
    }

    fn send_frame(&self, dst: Rank, f: &Frame) -> Result<(), TransportError> {
        self.link(dst)?.send(f)?;
        self.frames.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

impl Drop for TcpChannel {
    fn drop(&mut self) {
        for link in self.peers.values() {
            let _ = link.stream.lock().unwrap().shutdown(Shutdown::Both);
        }
        for h in self.readers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

fn error_frame(fault: RemoteFault, op: FrameOp, region: u32, offset: u64, echo: u128) -> Frame {
    let mut f = Frame::ctrl(CtrlKind::Error, &[fault.code(), op as u8]);
    f.region_id = region;
    f.offset = offset;
    f.custom_local_echo = echo;
    f
}

fn reader_loop(peer: Rank, stream: TcpStream, link: Arc<PeerLink>, port: Arc<Port>, inbox: Arc<Inbox>) {
    let mut r = BufReader::with_capacity(1 << 16, stream);
    loop {
        let f = match Frame::read_from(&mut r) {
            Ok(f) => f,
            Err(super::FrameError::Io(_)) => return,
            Err(e) => {
                log::error!("rank {}: dropping connection from {peer}: {e}", port.rank);
                return;
            }
        };
        let res = match f.op {
            FrameOp::PutData => {
                match port.land_put(RegionId(f.region_id), f.offset, &f.payload, f.custom_remote) {
                    Ok(()) => Ok(()),
                    Err(fault) => link.send(&error_frame(
                        fault,
                        FrameOp::PutData,
                        f.region_id,
                        f.offset,
                        f.custom_local_echo,
                    )),
                }
            }
            FrameOp::GetReq => {
                let Some((reply_region, reply_offset, len)) = f.get_request_fields() else {
                    log::error!("rank {}: malformed GET request from {peer}", port.rank);
                    return;
                };
                match port.serve_get(RegionId(f.region_id), f.offset, len as u64, f.custom_remote) {
                    Ok(data) => link.send(&Frame {
                        op: FrameOp::GetResp,
                        region_id: reply_region,
                        offset: reply_offset,
                        custom_remote: 0,
                        custom_local_echo: f.custom_local_echo,
                        payload: data,
                    }),
                    Err(fault) => link.send(&error_frame(
                        fault,
                        FrameOp::GetReq,
                        f.region_id,
                        f.offset,
                        f.custom_local_echo,
                    )),
                }
            }
            FrameOp::GetResp => {
                port.land_get_response(RegionId(f.region_id), f.offset, &f.payload, f.custom_local_echo);
                Ok(())
            }
            FrameOp::SideNotify => {
                port.event(Side::Remote, EventOp::Notify, f.custom_remote);
                Ok(())
            }
            FrameOp::Ctrl => {
                match f.ctrl_kind() {
                    Some(CtrlKind::Error) => {
                        let fault = f
                            .payload
                            .get(1)
                            .and_then(|&c| RemoteFault::from_code(c))
                            .unwrap_or(RemoteFault::OutOfBounds);
                        let op = match f.payload.get(2) {
                            Some(&b) if b == FrameOp::GetReq as u8 => EventOp::Get,
                            _ => EventOp::Put,
                        };
                        port.fault(op, f.custom_local_echo, fault);
                    }
                    Some(CtrlKind::Bootstrap) if f.payload.len() >= 9 => {
                        let tag = u64::from_le_bytes(f.payload[1..9].try_into().unwrap());
                        inbox.push(peer, tag, f.payload[9..].to_vec());
                    }
                    _ => log::warn!("rank {}: ignoring control frame from {peer}", port.rank),
                }
                Ok(())
            }
        };
        if res.is_err() {
            return;
        }
    }
}

impl Channel for TcpChannel {
    fn id(&self) -> u16 {
        self.port.channel_id
    }

    fn rank(&self) -> Rank {
        self.port.rank
    }

    fn capability(&self) -> &ChannelCapability {
        &self.port.cap
    }

    fn put(&self, dst: Rank, req: PutRequest<'_>) -> Result<(), TransportError> {
        validate_put(&self.port.cap, &req)?;
        if dst == self.port.rank {
            let landed = self.port.land_put(req.region, req.offset, req.payload, req.custom_remote);
            self.port.event(Side::Local, EventOp::Put, req.custom_local);
            if let Err(f) = landed {
                self.port.fault(EventOp::Put, req.custom_local, f);
            }
            return Ok(());
        }
        self.send_frame(
            dst,
            &Frame {
                op: FrameOp::PutData,
                region_id: req.region.0,
                offset: req.offset,
                custom_remote: req.custom_remote,
                custom_local_echo: req.custom_local,
                payload: req.payload.to_vec(),
            },
        )?;
        // the payload has been copied into the socket: the source buffer is reusable
        self.port.event(Side::Local, EventOp::Put, req.custom_local);
        Ok(())
    }

    fn get(&self, src: Rank, req: GetRequest) -> Result<(), TransportError> {
        validate_get(&self.port.cap, &req)?;
        if src == self.port.rank {
            match self.port.serve_get(req.region, req.offset, req.len, req.custom_remote) {
                Ok(d) => self
                    .port
                    .land_get_response(req.local_region, req.local_offset, &d, req.custom_local),
                Err(f) => self.port.fault(EventOp::Get, req.custom_local, f),
            }
            return Ok(());
        }
        self.send_frame(
            src,
            &Frame::get_request(
                req.region.0,
                req.offset,
                req.len as u32,
                req.local_region.0,
                req.local_offset,
                req.custom_remote,
                req.custom_local,
            ),
        )
    }

    fn notify(&self, dst: Rank, bits: u128) -> Result<(), TransportError> {
        if dst == self.port.rank {
            self.port.event(Side::Remote, EventOp::Notify, bits);
            return Ok(());
        }
        let mut f = Frame::new(FrameOp::SideNotify);
        f.custom_remote = bits;
        self.send_frame(dst, &f)
    }

    fn poll_events(&self, max: usize) -> Vec<CompletionEvent> {
        self.port.queue.drain(max)
    }

    fn queue_overflows(&self) -> u64 {
        self.port.queue.overflows()
    }

    fn set_inline_apply(&self, f: Option<InlineApply>) {
        self.port.set_inline(f);
    }

    fn frames_sent(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }
}

impl Bootstrap for TcpChannel {
    fn rank(&self) -> Rank {
        self.port.rank
    }

    fn world_size(&self) -> u32 {
        self.world_size
    }

    fn send(&self, dst: Rank, tag: u64, data: &[u8]) -> Result<(), TransportError> {
        if dst == self.port.rank {
            self.inbox.push(dst, tag, data.to_vec());
            return Ok(());
        }
        let mut body = Vec::with_capacity(8 + data.len());
        body.extend_from_slice(&tag.to_le_bytes());
        body.extend_from_slice(data);
        self.link(dst)?.send(&Frame::ctrl(CtrlKind::Bootstrap, &body))
    }

    fn recv(&self, src: Rank, tag: u64, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        self.inbox.pop(src, tag, timeout)
    }

    fn barrier(&self, timeout: Duration) -> Result<(), TransportError> {
        self.barrier_epoch(self.inbox.next_epoch(), timeout)
    }
}
