//! In-process channel: every rank attached to one fabric lives in this
//! process, and operations complete synchronously in the caller's thread.
//!
//! Used for intra-node transfers (self-sends), for multi-rank tests, and as a
//! rail in multi-channel setups where each fabric models one NIC.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use super::{
    validate_get, validate_put, Bootstrap, Channel, ChannelCapability, CompletionEvent, EventOp,
    GetRequest, Inbox, InlineApply, Port, PutRequest, Side, TransportError, DEFAULT_QUEUE_CAPACITY,
};
use crate::memory::{Rank, Registry};

pub struct LoopbackFabric {
    channel_id: u16,
    cap: ChannelCapability,
    world_size: u32,
    capacity: usize,
    ports: RwLock<HashMap<Rank, Arc<Port>>>,
    inboxes: RwLock<HashMap<Rank, Arc<Inbox>>>,
}

impl LoopbackFabric {
    pub fn new(channel_id: u16, cap: ChannelCapability, world_size: u32) -> Result<Arc<Self>, TransportError> {
        Self::with_capacity(channel_id, cap, world_size, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(
        channel_id: u16,
        cap: ChannelCapability,
        world_size: u32,
        capacity: usize,
    ) -> Result<Arc<Self>, TransportError> {
        cap.validate()?;
        Ok(Arc::new(Self {
            channel_id,
            cap,
            world_size,
            capacity,
            ports: RwLock::new(HashMap::new()),
            inboxes: RwLock::new(HashMap::new()),
        }))
    }

    pub fn attach(self: &Arc<Self>, rank: Rank, registry: Arc<Registry>) -> Arc<LoopbackChannel> {
        let port = Arc::new(Port::new(rank, self.channel_id, self.cap, registry, self.capacity));
        self.ports.write().unwrap().insert(rank, port.clone());
        self.inbox(rank);
        Arc::new(LoopbackChannel {
            fabric: self.clone(),
            port,
            frames: AtomicU64::new(0),
        })
    }

    fn port(&self, rank: Rank) -> Result<Arc<Port>, TransportError> {
        self.ports
            .read()
            .unwrap()
            .get(&rank)
            .cloned()
            .ok_or(TransportError::UnknownRank(rank))
    }

    fn inbox(&self, rank: Rank) -> Arc<Inbox> {
        if let Some(i) = self.inboxes.read().unwrap().get(&rank) {
            return i.clone();
        }
        self.inboxes.write().unwrap().entry(rank).or_default().clone()
    }
}

pub struct LoopbackChannel {
    fabric: Arc<LoopbackFabric>,
    port: Arc<Port>,
    frames: AtomicU64,
}

impl LoopbackChannel {
    pub fn fabric(&self) -> &Arc<LoopbackFabric> {
        &self.fabric
    }

    pub fn queued(&self) -> usize {
        self.port.queue.len()
    }
}

impl Channel for LoopbackChannel {
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
        let target = self.fabric.port(dst)?;
        self.frames.fetch_add(1, Ordering::Relaxed);
        let landed = target.land_put(req.region, req.offset, req.payload, req.custom_remote);
        // the source buffer is reusable either way, as on a real NIC
        self.port.event(Side::Local, EventOp::Put, req.custom_local);
        if let Err(f) = landed {
            self.port.fault(EventOp::Put, req.custom_local, f);
        }
        Ok(())
    }

    fn get(&self, src: Rank, req: GetRequest) -> Result<(), TransportError> {
        validate_get(&self.port.cap, &req)?;
        let target = self.fabric.port(src)?;
        self.frames.fetch_add(2, Ordering::Relaxed);
        match target.serve_get(req.region, req.offset, req.len, req.custom_remote) {
            Ok(data) => self
                .port
                .land_get_response(req.local_region, req.local_offset, &data, req.custom_local),
            Err(f) => self.port.fault(EventOp::Get, req.custom_local, f),
        }
        Ok(())
    }

    fn notify(&self, dst: Rank, bits: u128) -> Result<(), TransportError> {
        let target = self.fabric.port(dst)?;
        self.frames.fetch_add(1, Ordering::Relaxed);
        target.event(Side::Remote, EventOp::Notify, bits);
        Ok(())
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

impl Bootstrap for LoopbackChannel {
    fn rank(&self) -> Rank {
        self.port.rank
    }

    fn world_size(&self) -> u32 {
        self.fabric.world_size
    }

    fn send(&self, dst: Rank, tag: u64, data: &[u8]) -> Result<(), TransportError> {
        if dst >= self.fabric.world_size {
            return Err(TransportError::UnknownRank(dst));
        }
        self.fabric.inbox(dst).push(self.port.rank, tag, data.to_vec());
        Ok(())
    }

    fn recv(&self, src: Rank, tag: u64, timeout: Duration) -> Result<Vec<u8>, TransportError> {
        self.fabric.inbox(self.port.rank).pop(src, tag, timeout)
    }

    fn barrier(&self, timeout: Duration) -> Result<(), TransportError> {
        let epoch = self.fabric.inbox(self.port.rank).next_epoch();
        self.barrier_epoch(epoch, timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{RegionId, SharedBuffer};
    use crate::transport::RemoteFault;

    fn pair(cap: ChannelCapability) -> (Arc<LoopbackChannel>, Arc<LoopbackChannel>, Arc<Registry>, Arc<Registry>) {
        let f = LoopbackFabric::new(0, cap, 2).unwrap();
        let r0 = Arc::new(Registry::default());
        let r1 = Arc::new(Registry::default());
        (f.attach(0, r0.clone()), f.attach(1, r1.clone()), r0, r1)
    }

    #[test]
    fn put_delivers_data_then_two_events() {
        let (a, b, _r0, r1) = pair(ChannelCapability::GLEX);
        let dst = r1.register_all(&SharedBuffer::new(64)).unwrap();
        let bits = (0x1234u128 << 64) | 7;
        a.put(1, PutRequest { region: dst.id(), offset: 8, payload: &[9; 8], custom_remote: bits, custom_local: 3 })
            .unwrap();
        assert_eq!(dst.read(8, 8).unwrap(), vec![9; 8]);
        let re = b.poll_events(16);
        let le = a.poll_events(16);
        assert_eq!(re.len() + le.len(), 2);
        assert_eq!(re[0].custom, bits);
        assert_eq!(re[0].side, Side::Remote);
        assert_eq!(le[0].custom, 3);
    }

    #[test]
    fn zero_length_put_is_pure_notification() {
        let (a, b, _r0, r1) = pair(ChannelCapability::GLEX);
        let dst = r1.register_all(&SharedBuffer::new(1)).unwrap();
        a.put(1, PutRequest { region: dst.id(), offset: 0, payload: &[], custom_remote: 5, custom_local: 0 })
            .unwrap();
        assert_eq!(b.poll_events(4)[0].custom, 5);
    }

    #[test]
    fn width_violation_is_capability_error() {
        let (a, _b, _r0, r1) = pair(ChannelCapability::VERBS);
        let dst = r1.register_all(&SharedBuffer::new(1)).unwrap();
        let e = a
            .put(1, PutRequest { region: dst.id(), offset: 0, payload: &[], custom_remote: 1 << 40, custom_local: 0 })
            .unwrap_err();
        assert!(matches!(e, TransportError::Capability(_)));
    }

    #[test]
    fn get_events_follow_capability() {
        // Verbs: no remote GET bits, so only the local event appears
        let (a, b, r0, r1) = pair(ChannelCapability::VERBS);
        let src = r1.register_all(&SharedBuffer::from_vec(vec![4; 16])).unwrap();
        let dst = r0.register_all(&SharedBuffer::new(16)).unwrap();
        let req = GetRequest { region: src.id(), offset: 0, len: 16, local_region: dst.id(), local_offset: 0, custom_local: 11, custom_remote: 0 };
        a.get(1, req).unwrap();
        assert_eq!(dst.read(0, 16).unwrap(), vec![4; 16]);
        assert_eq!(a.poll_events(4).len(), 1);
        assert!(b.poll_events(4).is_empty());
        let e = a.get(1, GetRequest { custom_remote: 1, ..req }).unwrap_err();
        assert!(matches!(e, TransportError::Capability(_)));

        let (a, b, r0, r1) = pair(ChannelCapability::GLEX);
        let src = r1.register_all(&SharedBuffer::new(16)).unwrap();
        let dst = r0.register_all(&SharedBuffer::new(16)).unwrap();
        a.get(1, GetRequest { region: src.id(), local_region: dst.id(), custom_remote: 2, ..req }).unwrap();
        assert_eq!(a.poll_events(4)[0].custom, 11);
        assert_eq!(b.poll_events(4)[0].custom, 2);
    }

    #[test]
    fn unregistered_source_gives_local_error_event() {
        let (a, _b, r0, _r1) = pair(ChannelCapability::GLEX);
        let dst = r0.register_all(&SharedBuffer::new(16)).unwrap();
        a.get(1, GetRequest { region: RegionId(99), offset: 0, len: 4, local_region: dst.id(), local_offset: 0, custom_local: 1, custom_remote: 0 })
            .unwrap();
        let ev = a.poll_events(4);
        assert_eq!(ev[0].fault, Some(RemoteFault::UnknownRegion));
    }

    #[test]
    fn bootstrap_and_barrier() {
        let (a, b, _, _) = pair(ChannelCapability::GLEX);
        a.send(1, 42, b"hi").unwrap();
        assert_eq!(b.recv(0, 42, Duration::from_secs(1)).unwrap(), b"hi");
        let h = std::thread::spawn(move || b.barrier(Duration::from_secs(5)));
        a.barrier(Duration::from_secs(5)).unwrap();
        h.join().unwrap().unwrap();
    }
}
