//! Synthetic fill patterns and checksums for integrity checks.

use std::hash::{DefaultHasher, Hasher};

/// Identity of one message: who sent it, in which iteration, on which lane.
pub fn stream_seed(rank: u32, iter: u64, lane: u64) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_u32(rank);
    h.write_u64(iter);
    h.write_u64(lane);
    h.finish()
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Write the pattern for `seed` into `out`, which starts at byte `start`
/// of the logical message.
pub fn fill(seed: u64, start: u64, out: &mut [u8]) {
    let mut pos = start;
    let mut rest = out;
    while !rest.is_empty() {
        let word = mix(seed ^ (pos / 8)).to_le_bytes();
        let skip = (pos % 8) as usize;
        let n = (8 - skip).min(rest.len());
        rest[..n].copy_from_slice(&word[skip..skip + n]);
        rest = &mut rest[n..];
        pos += n as u64;
    }
}

pub fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0; len];
    fill(seed, 0, &mut v);
    v
}

pub fn checksum(data: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write(data);
    h.finish()
}

/// Checksum the pattern for `seed` would have.
pub fn golden(seed: u64, len: usize) -> u64 {
    checksum(&pattern(seed, len))
}
