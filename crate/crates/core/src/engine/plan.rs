//! Recorded sequences of transfers, replayed by `Endpoint::plan_start`.

use crate::memory::{Blk, Rank, RegionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferKind {
    Put,
    Get,
}

/// Per-operation options.
///
/// `local_sig` names a signal in this endpoint's table (the send signal of a
/// PUT, the landing signal of a GET); `remote_sig` names one in the peer's
/// table. Either overrides the signal bound to the corresponding block.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpOptions {
    pub local_sig: Option<u32>,
    pub remote_sig: Option<u32>,
    pub max_fragments: Option<u64>,
    /// Channel indices to stripe over; all channels when `None`.
    pub channels: Option<Vec<usize>>,
}

impl OpOptions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn local(mut self, sig: u32) -> Self {
        self.local_sig = Some(sig);
        self
    }

    pub fn remote(mut self, sig: u32) -> Self {
        self.remote_sig = Some(sig);
        self
    }

    pub fn fragments(mut self, k: u64) -> Self {
        self.max_fragments = Some(k);
        self
    }

    pub fn channels(mut self, c: Vec<usize>) -> Self {
        self.channels = Some(c);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferDescriptor {
    pub kind: TransferKind,
    pub local: Blk,
    pub remote: Blk,
    pub opts: OpOptions,
}

impl TransferDescriptor {
    pub fn put(local: Blk, remote: Blk) -> Self {
        Self {
            kind: TransferKind::Put,
            local,
            remote,
            opts: OpOptions::default(),
        }
    }

    pub fn get(local: Blk, remote: Blk) -> Self {
        Self {
            kind: TransferKind::Get,
            ..Self::put(local, remote)
        }
    }

    pub fn with(mut self, opts: OpOptions) -> Self {
        self.opts = opts;
        self
    }
}

/// One fragment with its custom bits already encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Fragment {
    pub slot: usize,
    pub offset: u64,
    pub len: u64,
    pub remote_bits: u128,
    pub local_bits: u128,
    /// Sent as an ordered side message after the data operation.
    pub side_bits: Option<u128>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Prepared {
    pub kind: TransferKind,
    pub peer: Rank,
    pub local_region: RegionId,
    pub local_offset: u64,
    pub remote_region: RegionId,
    pub remote_offset: u64,
    pub size: u64,
    pub frags: Vec<Fragment>,
}

#[derive(Debug)]
pub struct TransferPlan {
    pub(crate) descriptors: Vec<TransferDescriptor>,
    pub(crate) prepared: Vec<Prepared>,
}

impl TransferPlan {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[TransferDescriptor] {
        &self.descriptors
    }

    /// Fragments issued per start, summed over descriptors.
    pub fn fragment_count(&self) -> usize {
        self.prepared.iter().map(|p| p.frags.len()).sum()
    }
}
