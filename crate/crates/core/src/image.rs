//! Shared data model for laid-out code: the virtual address map, the
//! hardening configuration, and the address-assigned image consumed by the
//! verifier and the simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{decode, DecodeError, Instruction, INSTR_BYTES};

/// User virtual address space split evenly between code (low half) and
/// data (high half), with 32 KB guard holes at both ends of the code
/// segment to absorb the reach of 16-bit signed displacements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressMap {
    pub code_lo: u64,
    pub code_hi: u64,
    pub data_lo: u64,
    pub data_hi: u64,
    /// Bit separating code from data addresses.
    pub code_bit: u32,
    /// Most significant bit; set only for kernel addresses.
    pub user_msb: u32,
}

impl AddressMap {
    pub const GUARD_BYTES: u64 = 32 * 1024;

    pub fn user_top(&self) -> u64 {
        self.data_hi
    }

    pub fn in_code(&self, addr: u64) -> bool {
        (self.code_lo..=self.code_hi).contains(&addr)
    }

    pub fn in_data(&self, addr: u64) -> bool {
        (self.data_lo..=self.data_hi).contains(&addr)
    }

    pub fn in_user(&self, addr: u64) -> bool {
        addr <= self.data_hi
    }
}

impl Default for AddressMap {
    fn default() -> Self {
        AddressMap {
            code_lo: 0x8000,
            code_hi: 0x1fff_ffff_7fff,
            data_lo: 1 << 45,
            data_hi: (1 << 46) - 1,
            code_bit: 45,
            user_msb: 63,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("bundle size {0} is not a power of two >= 16")]
    BundleSize(u32),
    #[error("`{0}` requires bundle alignment")]
    NeedsAlignment(&'static str),
}

/// Which hardening passes run and at what bundle granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardeningConfig {
    pub bundle_size_bytes: u32,
    /// Split and pad basic blocks into aligned bundles. Off means the
    /// unhardened baseline layout.
    pub align: bool,
    pub enable_cfi: bool,
    pub enable_sfi_store: bool,
    pub enable_sfi_load: bool,
    pub enable_fence: bool,
}

impl Default for HardeningConfig {
    fn default() -> Self {
        HardeningConfig::preset(Preset::Cfi)
    }
}

impl HardeningConfig {
    pub const DEFAULT_BUNDLE_BYTES: u32 = 32;

    pub fn preset(p: Preset) -> Self {
        let mut c = HardeningConfig {
            bundle_size_bytes: Self::DEFAULT_BUNDLE_BYTES,
            align: p != Preset::Baseline,
            enable_cfi: false,
            enable_sfi_store: false,
            enable_sfi_load: false,
            enable_fence: false,
        };
        match p {
            Preset::Baseline | Preset::Align => {}
            Preset::Cfi => c.enable_cfi = true,
            Preset::SfiStore => {
                c.enable_cfi = true;
                c.enable_sfi_store = true;
            }
            Preset::Fence => {
                c.enable_cfi = true;
                c.enable_sfi_store = true;
                c.enable_fence = true;
            }
            Preset::SfiLoad => {
                c.enable_cfi = true;
                c.enable_sfi_store = true;
                c.enable_sfi_load = true;
            }
        }
        c
    }

    pub fn with_bundle_size(mut self, bytes: u32) -> Self {
        self.bundle_size_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = self.bundle_size_bytes;
        if !b.is_power_of_two() || b < 16 {
            return Err(ConfigError::BundleSize(b));
        }
        if !self.align {
            let need = [
                (self.enable_cfi, "cfi"),
                (self.enable_sfi_store, "sfi-store"),
                (self.enable_sfi_load, "sfi-load"),
                (self.enable_fence, "fence"),
            ];
            if let Some((_, name)) = need.iter().find(|(on, _)| *on) {
                return Err(ConfigError::NeedsAlignment(name));
            }
        }
        Ok(())
    }

    /// Byte size of one layout unit: the bundle when aligning, a single
    /// instruction otherwise.
    pub fn unit_bytes(&self) -> u32 {
        if self.align {
            self.bundle_size_bytes
        } else {
            INSTR_BYTES as u32
        }
    }

    /// Instructions per layout unit.
    pub fn capacity(&self) -> usize {
        (self.unit_bytes() as u64 / INSTR_BYTES) as usize
    }

    pub fn bundle_log2(&self) -> u8 {
        self.unit_bytes().trailing_zeros() as u8
    }
}

/// The six cumulative configurations used for the overhead breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    Baseline,
    Align,
    Cfi,
    SfiStore,
    Fence,
    SfiLoad,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::Baseline, Preset::Align, Preset::Cfi, Preset::SfiStore, Preset::Fence, Preset::SfiLoad];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Align => "align",
            Preset::Cfi => "align+cfi",
            Preset::SfiStore => "+sfi-store",
            Preset::Fence => "+fence",
            Preset::SfiLoad => "+sfi-load",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// One aligned group of instruction words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub base_addr: u64,
    pub words: Vec<u32>,
}

impl Bundle {
    pub fn instructions(&self) -> impl Iterator<Item = Result<Instruction, DecodeError>> + '_ {
        self.words.iter().map(|&w| decode(w))
    }

    pub fn byte_len(&self) -> u64 {
        self.words.len() as u64 * INSTR_BYTES
    }

    pub fn end(&self) -> u64 {
        self.base_addr + self.byte_len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub addr: u64,
}

/// Address-assigned code segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutImage {
    pub bundle_size: u32,
    pub base_address: u64,
    pub bundles: Vec<Bundle>,
    /// Function entry points in layout order.
    pub symbols: Vec<Symbol>,
}

impl LayoutImage {
    pub fn empty(bundle_size: u32, base_address: u64) -> Self {
        LayoutImage { bundle_size, base_address, bundles: Vec::new(), symbols: Vec::new() }
    }

    pub fn end_address(&self) -> u64 {
        self.bundles.last().map(Bundle::end).unwrap_or(self.base_address)
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.base_address..self.end_address()).contains(&addr)
    }

    pub fn instruction_count(&self) -> usize {
        self.bundles.iter().map(|b| b.words.len()).sum()
    }

    pub fn code_bytes(&self) -> u64 {
        self.instruction_count() as u64 * INSTR_BYTES
    }

    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.iter().find(|s| s.name == name).map(|s| s.addr)
    }

    /// `main` when present, otherwise the first symbol.
    pub fn entry(&self) -> Option<u64> {
        self.symbol("main").or_else(|| self.symbols.first().map(|s| s.addr))
    }

    /// Word at `addr`, for contiguous images.
    pub fn word_at(&self, addr: u64) -> Option<u32> {
        if !addr.is_multiple_of(INSTR_BYTES) || !self.contains(addr) {
            return None;
        }
        let idx = ((addr - self.base_address) / self.bundle_size as u64) as usize;
        let bundle = self.bundles.get(idx)?;
        if !(bundle.base_addr..bundle.end()).contains(&addr) {
            return self
                .bundles
                .iter()
                .find(|b| (b.base_addr..b.end()).contains(&addr))
                .map(|b| b.words[((addr - b.base_addr) / INSTR_BYTES) as usize]);
        }
        Some(bundle.words[((addr - bundle.base_addr) / INSTR_BYTES) as usize])
    }

    /// All words in address order, each with its address.
    pub fn words(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.bundles
            .iter()
            .flat_map(|b| b.words.iter().enumerate().map(move |(i, &w)| (b.base_addr + i as u64 * INSTR_BYTES, w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_map_constants() {
        let m = AddressMap::default();
        assert_eq!(m.code_lo, AddressMap::GUARD_BYTES);
        assert_eq!(m.code_hi + 1 + AddressMap::GUARD_BYTES, m.data_lo);
        assert_eq!(m.data_lo, 0x2000_0000_0000);
        assert_eq!(m.data_hi, 0x3fff_ffff_ffff);
    }

    #[test]
    fn bundle_size_rules() {
        let c = HardeningConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.with_bundle_size(24).validate(), Err(ConfigError::BundleSize(24)));
        assert_eq!(c.with_bundle_size(8).validate(), Err(ConfigError::BundleSize(8)));
        assert!(c.with_bundle_size(16).validate().is_ok());
        assert_eq!(c.capacity(), 8);
        assert_eq!(c.bundle_log2(), 5);
    }

    #[test]
    fn fence_with_sfi_load_is_allowed() {
        let mut c = HardeningConfig::preset(Preset::Fence);
        c.enable_sfi_load = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn hardening_needs_alignment() {
        let mut c = HardeningConfig::preset(Preset::Baseline);
        assert!(c.validate().is_ok());
        assert_eq!(c.capacity(), 1);
        c.enable_fence = true;
        assert_eq!(c.validate(), Err(ConfigError::NeedsAlignment("fence")));
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(Preset::from_name(p.name()), Some(p));
        }
    }
}
