//! Packing of (signal locator, addend) pairs into channel custom bits.

use crate::signal::{Addend, SignalLocator};

use super::EngineError;

/// How a channel side of width `w` carries notification state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecForm {
    /// All `w` bits hold the locator token; the addend is implicitly -1.
    IndexOnly,
    /// Token in the low `x` bits, addend as signed `(w - x)`-bit two's
    /// complement in the high bits.
    Split { x: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CustomBitsCodec {
    width: u32,
    form: CodecForm,
}

/// Which 32-bit form a channel uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level2Mode {
    /// Split form when the endpoint stripes, index-only otherwise.
    #[default]
    Auto,
    IndexOnly,
    Split,
}

impl CustomBitsCodec {
    /// Codec for a side of `width` bits; `None` when the side carries nothing.
    ///
    /// `split32` selects the split form on 32-bit sides; `index_bits`
    /// overrides the default `x` of `min(16, w/2)` on 32-bit sides.
    pub fn for_width(width: u16, split32: bool, index_bits: Option<u32>) -> Result<Option<Self>, EngineError> {
        let width = width as u32;
        let form = match width {
            0 => return Ok(None),
            8 | 16 => CodecForm::IndexOnly,
            32 if !split32 => CodecForm::IndexOnly,
            32 => CodecForm::Split {
                x: index_bits.unwrap_or(16.min(width / 2)),
            },
            64 => CodecForm::Split { x: 32 },
            128 => CodecForm::Split { x: 64 },
            w => return Err(EngineError::Capability(format!("unsupported custom-bit width {w}"))),
        };
        if let CodecForm::Split { x } = form {
            if x == 0 || x >= width || x > 64 {
                return Err(EngineError::Capability(format!(
                    "index width {x} invalid for a {width}-bit side"
                )));
            }
        }
        Ok(Some(Self { width, form }))
    }

    /// Full-width codec used for side messages.
    pub const fn side_message() -> Self {
        Self {
            width: 128,
            form: CodecForm::Split { x: 64 },
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn form(&self) -> CodecForm {
        self.form
    }

    pub fn index_bits(&self) -> u32 {
        match self.form {
            CodecForm::IndexOnly => self.width,
            CodecForm::Split { x } => x,
        }
    }

    /// Bits available for the addend; zero for index-only sides.
    pub fn addend_bits(&self) -> u32 {
        match self.form {
            CodecForm::IndexOnly => 0,
            CodecForm::Split { x } => self.width - x,
        }
    }

    pub fn carries_addend(&self) -> bool {
        matches!(self.form, CodecForm::Split { .. })
    }

    pub fn fits(&self, a: Addend) -> bool {
        match self.form {
            CodecForm::IndexOnly => a == Addend::SINGLE,
            CodecForm::Split { .. } => {
                let b = self.addend_bits();
                if b >= 64 {
                    return true;
                }
                let lo = -(1i64 << (b - 1));
                let hi = (1i64 << (b - 1)) - 1;
                (lo..=hi).contains(&a.0)
            }
        }
    }

    pub fn encode(&self, loc: SignalLocator, a: Addend) -> Result<u128, EngineError> {
        if loc == SignalLocator::NONE {
            return Ok(0);
        }
        let x = self.index_bits();
        if x < 64 && loc.token >= 1u64 << x {
            return Err(EngineError::Capability(format!(
                "signal index {} not addressable with {x} index bits",
                loc.token - 1
            )));
        }
        if !self.fits(a) {
            return Err(EngineError::Budget(format!(
                "addend {} does not fit {} addend bits of a {}-bit side",
                a.0,
                self.addend_bits(),
                self.width
            )));
        }
        Ok(match self.form {
            CodecForm::IndexOnly => loc.token as u128,
            CodecForm::Split { x } => {
                let mask = if self.width == 128 { u128::MAX } else { (1u128 << self.width) - 1 };
                (((a.0 as i128 as u128) << x) | loc.token as u128) & mask
            }
        })
    }

    pub fn decode(&self, bits: u128) -> (SignalLocator, Addend) {
        match self.form {
            CodecForm::IndexOnly => (SignalLocator { token: bits as u64 }, Addend::SINGLE),
            CodecForm::Split { x } => {
                let token = (bits & ((1u128 << x) - 1)) as u64;
                let b = self.width - x;
                // sign-extend the high field
                let raw = (bits >> x) as i128;
                let a = (raw << (128 - b)) >> (128 - b);
                (SignalLocator { token }, Addend(a as i64))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{encode_addends, LayoutConfig};
    use proptest::prelude::*;

    fn codec(w: u16, split: bool) -> CustomBitsCodec {
        CustomBitsCodec::for_width(w, split, None).unwrap().unwrap()
    }

    #[test]
    fn forms_by_width() {
        assert!(CustomBitsCodec::for_width(0, true, None).unwrap().is_none());
        assert_eq!(codec(8, true).form(), CodecForm::IndexOnly);
        assert_eq!(codec(32, false).form(), CodecForm::IndexOnly);
        assert_eq!(codec(32, true).form(), CodecForm::Split { x: 16 });
        assert_eq!(codec(64, false).form(), CodecForm::Split { x: 32 });
        assert_eq!(codec(128, false).form(), CodecForm::Split { x: 64 });
        assert_eq!(
            CustomBitsCodec::for_width(32, true, Some(10)).unwrap().unwrap().addend_bits(),
            22
        );
        assert!(CustomBitsCodec::for_width(32, true, Some(32)).is_err());
    }

    #[test]
    fn known_bit_patterns() {
        let c = codec(32, true);
        let bits = c.encode(SignalLocator::from_index(4), Addend(-1)).unwrap();
        assert_eq!(bits, 0xFFFF_0005);
        let c = codec(64, false);
        let bits = c.encode(SignalLocator::from_index(0), Addend(-512)).unwrap();
        assert_eq!(bits, 0xFFFF_FE00_0000_0001);
        assert_eq!(codec(8, false).encode(SignalLocator::from_index(9), Addend(-1)).unwrap(), 10);
    }

    #[test]
    fn none_encodes_to_zero_and_is_skipped() {
        let c = codec(128, false);
        assert_eq!(c.encode(SignalLocator::NONE, Addend(12345)).unwrap(), 0);
        assert_eq!(c.decode(0).0, SignalLocator::NONE);
    }

    #[test]
    fn rejects_instead_of_truncating() {
        let c = codec(32, true);
        let e = c.encode(SignalLocator::from_index(0), Addend(-1 << 33)).unwrap_err();
        assert!(matches!(e, EngineError::Budget(_)));
        let e = codec(16, false).encode(SignalLocator::from_index(0), Addend(5)).unwrap_err();
        assert!(matches!(e, EngineError::Budget(_)));
        let e = codec(8, false).encode(SignalLocator::from_index(255), Addend(-1)).unwrap_err();
        assert!(matches!(e, EngineError::Capability(_)));
    }

    #[test]
    fn striped_addends_fit_narrow_channel_at_small_n() {
        // N + 1 + log2(K) + sign <= 16 for N = 8, K = 4
        let l = LayoutConfig::new(8).unwrap();
        let c = codec(32, true);
        for a in encode_addends(4, l).unwrap().iter() {
            let bits = c.encode(SignalLocator::from_index(3), a).unwrap();
            assert_eq!(c.decode(bits), (SignalLocator::from_index(3), a));
        }
        let big = encode_addends(4, LayoutConfig::default()).unwrap();
        assert!(big.iter().any(|a| !c.fits(a)));
    }

    proptest! {
        #[test]
        fn round_trip_within_budget(w in prop::sample::select(vec![32u16, 64, 128]),
                                    token in 1u64.., a: i64) {
            let c = codec(w, true);
            let x = c.index_bits();
            let token = if x >= 64 { token } else { 1 + token % ((1u64 << x) - 1) };
            let loc = SignalLocator { token };
            match c.encode(loc, Addend(a)) {
                Ok(bits) => {
                    prop_assert!(c.fits(Addend(a)));
                    prop_assert!(w == 128 || bits < 1u128 << w);
                    prop_assert_eq!(c.decode(bits), (loc, Addend(a)));
                }
                Err(_) => prop_assert!(!c.fits(Addend(a))),
            }
        }

        #[test]
        fn small_addends_round_trip(w in prop::sample::select(vec![32u16, 64, 128]),
                                    token in 1u64..1000, a in -32768i64..32768) {
            let c = codec(w, true);
            let bits = c.encode(SignalLocator { token }, Addend(a)).unwrap();
            prop_assert_eq!(c.decode(bits), (SignalLocator { token }, Addend(a)));
        }
    }
}
