//! Signal table and the decode-and-apply step shared by the progress agent
//! and inline-apply channels.

use std::sync::{Arc, Mutex, RwLock};

use crate::diag::{DiagnosticSink, Diagnostics, WarningKind};
use crate::signal::{LayoutConfig, Signal, SignalError, SignalId, SignalLocator};
use crate::transport::{CompletionEvent, EventOp, OpSide, Side};

use super::codec::CustomBitsCodec;

/// Index-addressed signals of one endpoint. Indices are never reused.
#[derive(Default)]
pub struct SignalTable {
    slots: RwLock<Vec<Option<Arc<Signal>>>>,
}

impl SignalTable {
    pub fn create(&self, num_event: i64, layout: LayoutConfig, sink: Arc<dyn DiagnosticSink>) -> Result<(u32, Arc<Signal>), SignalError> {
        let mut g = self.slots.write().unwrap();
        let index = g.len() as u32;
        let s = Arc::new(Signal::new(SignalId(index as u64), num_event, layout)?.with_sink(sink));
        g.push(Some(s.clone()));
        Ok((index, s))
    }

    pub fn get(&self, index: u64) -> Option<Arc<Signal>> {
        self.slots.read().unwrap().get(index as usize).cloned().flatten()
    }

    pub fn remove(&self, index: u32) -> Option<Arc<Signal>> {
        self.slots.write().unwrap().get_mut(index as usize)?.take()
    }

    pub fn len(&self) -> usize {
        self.slots.read().unwrap().iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Codecs of one channel, per operation side.
#[derive(Debug, Clone, Copy)]
pub struct ChannelCodecs {
    pub put_remote: Option<CustomBitsCodec>,
    pub put_local: Option<CustomBitsCodec>,
    pub get_remote: Option<CustomBitsCodec>,
    pub get_local: Option<CustomBitsCodec>,
}

impl ChannelCodecs {
    pub fn side(&self, s: OpSide) -> Option<CustomBitsCodec> {
        match s {
            OpSide::PutRemote => self.put_remote,
            OpSide::PutLocal => self.put_local,
            OpSide::GetRemote => self.get_remote,
            OpSide::GetLocal => self.get_local,
        }
    }

    fn for_event(&self, ev: &CompletionEvent) -> Option<CustomBitsCodec> {
        match (ev.op, ev.side) {
            (EventOp::Notify, _) => Some(CustomBitsCodec::side_message()),
            (EventOp::Put, Side::Remote) => self.put_remote,
            (EventOp::Put, Side::Local) => self.put_local,
            (EventOp::Get, Side::Remote) => self.get_remote,
            (EventOp::Get, Side::Local) => self.get_local,
        }
    }
}

pub struct Dispatcher {
    pub table: Arc<SignalTable>,
    pub diag: Arc<Diagnostics>,
    pub codecs: ChannelCodecs,
    pub triggers: Arc<TriggerLog>,
}

/// Optional record of trigger observations, in apply order.
#[derive(Default)]
pub struct TriggerLog {
    entries: Mutex<Option<Vec<u64>>>,
}

impl TriggerLog {
    pub fn enable(&self) {
        self.entries.lock().unwrap().get_or_insert_with(Vec::new);
    }

    pub fn take(&self) -> Vec<u64> {
        self.entries.lock().unwrap().as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn push(&self, id: u64) {
        if let Some(v) = self.entries.lock().unwrap().as_mut() {
            v.push(id);
        }
    }
}

impl Dispatcher {
    /// Decode one event and apply its addend. Returns true if an addend was applied.
    pub fn dispatch(&self, ev: &CompletionEvent) -> bool {
        let Some(codec) = self.codecs.for_event(ev) else {
            return false;
        };
        let (loc, addend) = codec.decode(ev.custom);
        if let Some(fault) = ev.fault {
            self.diag.record(
                loc.index(),
                WarningKind::RemoteError,
                format!("{:?} on channel {} failed remotely: {fault:?}", ev.op, ev.channel_id),
            );
            return false;
        }
        let Some(index) = loc.index() else {
            return false;
        };
        let Some(sig) = self.table.get(index) else {
            self.diag.record(
                Some(index),
                WarningKind::UnknownSignalIndex,
                format!("event on channel {} names unknown signal index {index}", ev.channel_id),
            );
            return false;
        };
        if sig.apply(addend).just_triggered {
            self.triggers.push(index);
        }
        true
    }
}

impl SignalLocator {
    pub(crate) fn of(index: Option<u32>) -> SignalLocator {
        index.map_or(SignalLocator::NONE, |i| SignalLocator::from_index(i as u64))
    }
}
