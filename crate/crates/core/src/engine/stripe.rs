//! Splitting a message into fragments across channels.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Index into the endpoint's channel list.
    pub channel: usize,
    pub offset: u64,
    pub len: u64,
}

/// Fragment count for a message of `size` bytes.
///
/// A channel may appear several times in `channels` to split a message on a
/// single rail.
pub fn fragment_count(size: u64, n_channels: usize, max_fragments: u64, budget: u64) -> u64 {
    (n_channels as u64)
        .min(max_fragments)
        .min(budget)
        .min(size)
        .max(1)
}

/// Contiguous covering segments whose lengths differ by at most one byte,
/// longer ones first. Fragment 0 is the primary.
pub fn stripe(size: u64, channels: &[usize], max_fragments: u64, budget: u64) -> Vec<Segment> {
    let k = fragment_count(size, channels.len(), max_fragments, budget);
    let base = size / k;
    let extra = size % k;
    let mut off = 0;
    (0..k)
        .map(|i| {
            let len = base + u64::from(i < extra);
            let s = Segment {
                channel: channels.get(i as usize).copied().unwrap_or(0),
                offset: off,
                len,
            };
            off += len;
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lens(s: &[Segment]) -> Vec<u64> {
        s.iter().map(|s| s.len).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(lens(&stripe(1000, &[0, 1, 2, 3], 4, 1 << 31)), vec![250; 4]);
        assert_eq!(lens(&stripe(10, &[0, 1, 2, 3], 4, 1 << 31)), vec![3, 3, 2, 2]);
        let ch: Vec<usize> = (0..16).collect();
        assert_eq!(lens(&stripe(10, &ch, 16, 1 << 31)), vec![1; 10]);
    }

    #[test]
    fn degenerate_inputs_collapse_to_one() {
        assert_eq!(stripe(0, &[0, 1], 2, 10), vec![Segment { channel: 0, offset: 0, len: 0 }]);
        assert_eq!(stripe(100, &[3, 1], 1, 10).len(), 1);
        assert_eq!(stripe(100, &[], 4, 10).len(), 1);
        assert_eq!(stripe(100, &[0, 1, 2], 3, 2).len(), 2);
    }

    #[test]
    fn repeated_channel_splits_one_rail() {
        let s = stripe(8, &[2, 2, 2, 2], 4, 100);
        assert!(s.iter().all(|s| s.channel == 2 && s.len == 2));
    }

    proptest! {
        #[test]
        fn covering_and_balanced(size in 0u64..100_000, n in 1usize..20, maxf in 1u64..32, budget in 1u64..64) {
            let ch: Vec<usize> = (0..n).collect();
            let s = stripe(size, &ch, maxf, budget);
            let k = s.len() as u64;
            prop_assert_eq!(k, (n as u64).min(maxf).min(budget).min(size).max(1));
            let mut off = 0;
            for (i, seg) in s.iter().enumerate() {
                prop_assert_eq!(seg.offset, off);
                prop_assert_eq!(seg.channel, i);
                off += seg.len;
            }
            prop_assert_eq!(off, size);
            let mx = s.iter().map(|s| s.len).max().unwrap();
            let mn = s.iter().map(|s| s.len).min().unwrap();
            prop_assert!(mx - mn <= 1);
            prop_assert!(s.windows(2).all(|w| w[0].len >= w[1].len));
        }
    }
}
