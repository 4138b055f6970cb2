//! Channel capability descriptors and support-level classification.

use serde::{Deserialize, Serialize};

use super::TransportError;

pub const WIDTHS: [u16; 6] = [0, 8, 16, 32, 64, 128];

/// Custom-bit widths a channel advertises for each operation and side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCapability {
    pub put_remote_bits: u16,
    pub put_local_bits: u16,
    pub get_remote_bits: u16,
    pub get_local_bits: u16,
    #[serde(default)]
    pub hw_atomic_apply: bool,
    #[serde(default = "yes")]
    pub order_preserving: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SupportLevel {
    L0 = 0,
    L1 = 1,
    L2 = 2,
    L3 = 3,
    L4 = 4,
}

impl SupportLevel {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// Levels 0 through 3 need a progress agent to apply addends.
    pub fn needs_progress(self) -> bool {
        self != SupportLevel::L4
    }
}

/// Width of the custom bits for one (operation, side) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpSide {
    PutRemote,
    PutLocal,
    GetRemote,
    GetLocal,
}

pub const PRESET_NAMES: [&str; 8] = [
    "glex", "verbs", "utofu", "ugni", "pami", "portals", "level4", "fallback",
];

impl ChannelCapability {
    pub const fn symmetric(put_remote: u16, put_local: u16, get_remote: u16, get_local: u16) -> Self {
        Self {
            put_remote_bits: put_remote,
            put_local_bits: put_local,
            get_remote_bits: get_remote,
            get_local_bits: get_local,
            hw_atomic_apply: false,
            order_preserving: true,
        }
    }

    pub const GLEX: Self = Self::symmetric(128, 128, 128, 128);
    pub const VERBS: Self = Self::symmetric(32, 64, 0, 64);
    pub const UTOFU: Self = Self::symmetric(8, 64, 8, 64);
    pub const UGNI: Self = Self::symmetric(32, 32, 32, 32);
    /// PUT bits are a shared 64-bit field; modelled as 32 remote + 32 local.
    pub const PAMI: Self = Self::symmetric(32, 32, 0, 64);
    /// No local custom bits; the local side hashes (region, offset), which
    /// is modelled as a 64-bit local field.
    pub const PORTALS: Self = Self::symmetric(64, 64, 0, 64);
    pub const LEVEL4: Self = Self {
        hw_atomic_apply: true,
        ..Self::GLEX
    };
    /// No remote custom bits at all; notification rides a separate ordered message.
    pub const FALLBACK: Self = Self::symmetric(0, 64, 0, 64);

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "glex" => Self::GLEX,
            "verbs" => Self::VERBS,
            "utofu" => Self::UTOFU,
            "ugni" => Self::UGNI,
            "pami" => Self::PAMI,
            "portals" => Self::PORTALS,
            "level4" => Self::LEVEL4,
            "fallback" | "level0" => Self::FALLBACK,
            _ => return None,
        })
    }

    /// Presets whose published widths do not map directly onto a
    /// locator/addend split.
    pub fn preset_is_approximate(name: &str) -> bool {
        matches!(name.to_ascii_lowercase().as_str(), "pami" | "portals")
    }

    pub fn width(&self, which: OpSide) -> u16 {
        match which {
            OpSide::PutRemote => self.put_remote_bits,
            OpSide::PutLocal => self.put_local_bits,
            OpSide::GetRemote => self.get_remote_bits,
            OpSide::GetLocal => self.get_local_bits,
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        for w in [
            self.put_remote_bits,
            self.put_local_bits,
            self.get_remote_bits,
            self.get_local_bits,
        ] {
            if !WIDTHS.contains(&w) {
                return Err(TransportError::UnsupportedWidth(w));
            }
        }
        if self.get_remote_bits > self.put_remote_bits {
            return Err(TransportError::Capability(format!(
                "GET remote bits {} exceed PUT remote bits {}",
                self.get_remote_bits, self.put_remote_bits
            )));
        }
        Ok(())
    }

    /// Reject custom bits that do not fit the advertised width.
    pub fn check_bits(&self, which: OpSide, bits: u128) -> Result<(), TransportError> {
        let w = self.width(which);
        if w < 128 && bits >> w != 0 {
            return Err(TransportError::Capability(format!(
                "custom bits {bits:#x} exceed {w}-bit {which:?} width"
            )));
        }
        Ok(())
    }
}

/// Classify by PUT remote custom-bit width.
pub fn classify_level(cap: &ChannelCapability) -> Result<SupportLevel, TransportError> {
    cap.validate()?;
    Ok(match cap.put_remote_bits {
        0 => SupportLevel::L0,
        8 | 16 => SupportLevel::L1,
        32 => SupportLevel::L2,
        128 if cap.hw_atomic_apply => SupportLevel::L4,
        64 | 128 => SupportLevel::L3,
        w => return Err(TransportError::UnsupportedWidth(w)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets_classify() {
        let lv = |c: ChannelCapability| classify_level(&c).unwrap();
        assert_eq!(lv(ChannelCapability::VERBS), SupportLevel::L2);
        assert_eq!(lv(ChannelCapability::UTOFU), SupportLevel::L1);
        assert_eq!(lv(ChannelCapability::GLEX), SupportLevel::L3);
        assert_eq!(lv(ChannelCapability::LEVEL4), SupportLevel::L4);
        assert_eq!(lv(ChannelCapability::UGNI), SupportLevel::L2);
        assert_eq!(lv(ChannelCapability::PAMI), SupportLevel::L2);
        assert_eq!(lv(ChannelCapability::PORTALS), SupportLevel::L3);
        assert_eq!(lv(ChannelCapability::FALLBACK), SupportLevel::L0);
    }

    #[test]
    fn widths_map_to_levels() {
        for (w, l) in [
            (0, SupportLevel::L0),
            (8, SupportLevel::L1),
            (16, SupportLevel::L1),
            (32, SupportLevel::L2),
            (64, SupportLevel::L3),
            (128, SupportLevel::L3),
        ] {
            let c = ChannelCapability::symmetric(w, 128, 0, 128);
            assert_eq!(classify_level(&c).unwrap(), l, "width {w}");
        }
        // hardware apply only lifts a 128-bit channel
        let c = ChannelCapability { hw_atomic_apply: true, ..ChannelCapability::symmetric(64, 64, 64, 64) };
        assert_eq!(classify_level(&c).unwrap(), SupportLevel::L3);
    }

    #[test]
    fn bad_widths_rejected() {
        let c = ChannelCapability::symmetric(24, 64, 0, 64);
        assert_eq!(classify_level(&c).unwrap_err(), TransportError::UnsupportedWidth(24));
        let c = ChannelCapability::symmetric(8, 64, 16, 64);
        assert!(matches!(c.validate(), Err(TransportError::Capability(_))));
    }

    #[test]
    fn bit_checks() {
        let c = ChannelCapability::VERBS;
        assert!(c.check_bits(OpSide::PutRemote, u32::MAX as u128).is_ok());
        assert!(c.check_bits(OpSide::PutRemote, 1u128 << 32).is_err());
        assert!(c.check_bits(OpSide::GetRemote, 1).is_err());
        assert!(ChannelCapability::GLEX.check_bits(OpSide::PutRemote, u128::MAX).is_ok());
    }

    #[test]
    fn presets_by_name() {
        for n in PRESET_NAMES {
            let c = ChannelCapability::preset(n).unwrap();
            c.validate().unwrap();
        }
        assert!(ChannelCapability::preset("nope").is_none());
        assert!(ChannelCapability::preset_is_approximate("PAMI"));
    }

    #[test]
    fn capability_from_toml() {
        let c: ChannelCapability = toml::from_str(
            "put_remote_bits = 32\nput_local_bits = 64\nget_remote_bits = 0\nget_local_bits = 64\n",
        )
        .unwrap();
        assert_eq!(c, ChannelCapability::VERBS);
    }
}
