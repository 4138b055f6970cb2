//! Registered memory regions and BLK data handles.
//!
//! Callers allocate a [`SharedBuffer`], register contiguous ranges of it, and
//! carve the regions into [`Blk`]s. A `Blk` names a block by
//! `(rank, region, offset, size)` so the peer never computes remote offsets.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

pub type Rank = u32;

pub const DEFAULT_REGION_BUDGET: usize = 256;
pub const BLK_ENCODED_LEN: usize = 28;
const NO_SIGNAL: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("range {start}..{end} overlaps registered region {existing}")]
    Overlap { start: usize, end: usize, existing: u32 },
    #[error("region budget of {0} exhausted")]
    Exhausted(usize),
    #[error("empty registration")]
    Empty,
    #[error("range {offset}+{size} outside {len} bytes")]
    Bounds { offset: u64, size: u64, len: u64 },
    #[error("unknown region {0}")]
    UnknownRegion(u32),
    #[error("blk encoding must be {BLK_ENCODED_LEN} bytes, got {0}")]
    Decode(usize),
}

static NEXT_BUFFER: AtomicU64 = AtomicU64::new(1);

/// Heap memory that remote operations may write into.
///
/// Reads and writes take an internal lock, so a racing remote write is never
/// undefined behaviour; it only produces stale or mixed data, which is what
/// the signal protocol exists to prevent.
#[derive(Debug, Clone)]
pub struct SharedBuffer {
    id: u64,
    bytes: Arc<RwLock<Vec<u8>>>,
}

impl SharedBuffer {
    pub fn new(len: usize) -> Self {
        Self::from_vec(vec![0; len])
    }

    pub fn from_vec(v: Vec<u8>) -> Self {
        Self {
            id: NEXT_BUFFER.fetch_add(1, Ordering::Relaxed),
            bytes: Arc::new(RwLock::new(v)),
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, offset: usize, len: usize) -> Result<(), MemoryError> {
        let total = self.len();
        if offset.checked_add(len).map_or(true, |end| end > total) {
            return Err(MemoryError::Bounds {
                offset: offset as u64,
                size: len as u64,
                len: total as u64,
            });
        }
        Ok(())
    }

    pub fn write(&self, offset: usize, data: &[u8]) -> Result<(), MemoryError> {
        self.check(offset, data.len())?;
        self.bytes.write().unwrap()[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read(&self, offset: usize, len: usize) -> Result<Vec<u8>, MemoryError> {
        self.check(offset, len)?;
        Ok(self.bytes.read().unwrap()[offset..offset + len].to_vec())
    }

    pub fn fill_with(&self, mut f: impl FnMut(usize) -> u8) {
        for (i, b) in self.bytes.write().unwrap().iter_mut().enumerate() {
            *b = f(i);
        }
    }

    /// Run `f` over a borrowed view of the bytes.
    pub fn with_slice<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        f(&self.bytes.read().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub u32);

#[derive(Debug, Clone)]
pub struct RegisteredRegion {
    id: RegionId,
    buffer: SharedBuffer,
    start: usize,
    size: usize,
}

impl RegisteredRegion {
    pub fn id(&self) -> RegionId {
        self.id
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn buffer(&self) -> &SharedBuffer {
        &self.buffer
    }

    fn check(&self, offset: u64, len: u64) -> Result<usize, MemoryError> {
        if offset.checked_add(len).map_or(true, |end| end > self.size as u64) {
            return Err(MemoryError::Bounds {
                offset,
                size: len,
                len: self.size as u64,
            });
        }
        Ok(self.start + offset as usize)
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> Result<(), MemoryError> {
        let at = self.check(offset, data.len() as u64)?;
        self.buffer.write(at, data)
    }

    pub fn read(&self, offset: u64, len: u64) -> Result<Vec<u8>, MemoryError> {
        let at = self.check(offset, len)?;
        self.buffer.read(at, len as usize)
    }
}

/// Per-endpoint table of registered regions.
#[derive(Debug)]
pub struct Registry {
    budget: usize,
    next_id: AtomicU32,
    regions: RwLock<BTreeMap<RegionId, RegisteredRegion>>,
}

impl Registry {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            next_id: AtomicU32::new(1),
            regions: RwLock::new(BTreeMap::new()),
        }
    }

    /// Register `len` bytes of `buffer` starting at `start`.
    pub fn register(
        &self,
        buffer: &SharedBuffer,
        start: usize,
        len: usize,
    ) -> Result<RegisteredRegion, MemoryError> {
        if len == 0 {
            return Err(MemoryError::Empty);
        }
        buffer.check(start, len)?;
        let mut regions = self.regions.write().unwrap();
        if regions.len() >= self.budget {
            return Err(MemoryError::Exhausted(self.budget));
        }
        let end = start + len;
        if let Some(r) = regions.values().find(|r| {
            r.buffer.id == buffer.id && start < r.start + r.size && r.start < end
        }) {
            return Err(MemoryError::Overlap {
                start,
                end,
                existing: r.id.0,
            });
        }
        let id = RegionId(self.next_id.fetch_add(1, Ordering::Relaxed));
        let region = RegisteredRegion {
            id,
            buffer: buffer.clone(),
            start,
            size: len,
        };
        regions.insert(id, region.clone());
        Ok(region)
    }

    /// Register a whole buffer.
    pub fn register_all(&self, buffer: &SharedBuffer) -> Result<RegisteredRegion, MemoryError> {
        self.register(buffer, 0, buffer.len())
    }

    pub fn deregister(&self, id: RegionId) -> Result<(), MemoryError> {
        self.regions
            .write()
            .unwrap()
            .remove(&id)
            .map(|_| ())
            .ok_or(MemoryError::UnknownRegion(id.0))
    }

    pub fn lookup(&self, id: RegionId) -> Result<RegisteredRegion, MemoryError> {
        self.regions
            .read()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or(MemoryError::UnknownRegion(id.0))
    }

    pub fn len(&self) -> usize {
        self.regions.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write(&self, id: RegionId, offset: u64, data: &[u8]) -> Result<(), MemoryError> {
        self.lookup(id)?.write(offset, data)
    }

    pub fn read(&self, id: RegionId, offset: u64, len: u64) -> Result<Vec<u8>, MemoryError> {
        self.lookup(id)?.read(offset, len)
    }

    pub fn check(&self, id: RegionId, offset: u64, len: u64) -> Result<(), MemoryError> {
        self.lookup(id)?.check(offset, len).map(|_| ())
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(DEFAULT_REGION_BUDGET)
    }
}

/// Transportable handle to a block inside a registered region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Blk {
    pub rank: Rank,
    pub region: RegionId,
    pub offset: u64,
    pub size: u64,
    /// Signal-table index notified when this block is a transfer's local
    /// source or local destination.
    pub bound_signal: Option<u32>,
}

impl Blk {
    pub fn new(
        rank: Rank,
        region: &RegisteredRegion,
        offset: u64,
        size: u64,
        bound_signal: Option<u32>,
    ) -> Result<Self, MemoryError> {
        region.check(offset, size)?;
        Ok(Self {
            rank,
            region: region.id,
            offset,
            size,
            bound_signal,
        })
    }

    /// A sub-block `[offset, offset+size)` relative to this block.
    pub fn slice(&self, offset: u64, size: u64) -> Result<Self, MemoryError> {
        if offset.checked_add(size).map_or(true, |e| e > self.size) {
            return Err(MemoryError::Bounds {
                offset,
                size,
                len: self.size,
            });
        }
        Ok(Self {
            offset: self.offset + offset,
            size,
            ..*self
        })
    }

    /// Little-endian `rank | region | offset | size | signal`,
    /// with `0xFFFFFFFF` for no bound signal.
    pub fn pack(&self) -> [u8; BLK_ENCODED_LEN] {
        let mut out = [0u8; BLK_ENCODED_LEN];
        out[0..4].copy_from_slice(&self.rank.to_le_bytes());
        out[4..8].copy_from_slice(&self.region.0.to_le_bytes());
        out[8..16].copy_from_slice(&self.offset.to_le_bytes());
        out[16..24].copy_from_slice(&self.size.to_le_bytes());
        out[24..28].copy_from_slice(&self.bound_signal.unwrap_or(NO_SIGNAL).to_le_bytes());
        out
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self, MemoryError> {
        if bytes.len() != BLK_ENCODED_LEN {
            return Err(MemoryError::Decode(bytes.len()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let sig = u32_at(24);
        Ok(Self {
            rank: u32_at(0),
            region: RegionId(u32_at(4)),
            offset: u64_at(8),
            size: u64_at(16),
            bound_signal: (sig != NO_SIGNAL).then_some(sig),
        })
    }
}
