//! Pointer-masking value functions and the instruction sequences that
//! realize them.

use crate::image::{AddressMap, HardeningConfig};
use crate::isa::{BitOp, Gpr, Instruction};

/// Force a code pointer to a bundle base inside the code half of the
/// address space.
pub fn mask_code_pointer_value(p: u64, cfg: &HardeningConfig, m: &AddressMap) -> u64 {
    let below_code_bit = (1u64 << m.code_bit) - 1;
    p & below_code_bit & !(cfg.unit_bytes() as u64 - 1)
}

/// Force a store address into the data half of user space.
pub fn mask_store_pointer_value(p: u64, m: &AddressMap) -> u64 {
    (p | 1u64 << m.code_bit) & ((1u64 << (m.code_bit + 1)) - 1)
}

/// Clear the kernel bit of a load address.
pub fn mask_load_pointer_value(p: u64) -> u64 {
    p & (u64::MAX >> 1)
}

/// `CLRLO reg, reg, log2(bundle); CLRHI reg, reg, 64 - code_bit`.
pub fn code_mask_sequence(reg: Gpr, cfg: &HardeningConfig, m: &AddressMap) -> [Instruction; 2] {
    [
        Instruction::bits(BitOp::ClrLo, reg, reg, cfg.bundle_log2()),
        Instruction::bits(BitOp::ClrHi, reg, reg, (64 - m.code_bit) as u8),
    ]
}

/// `SETBIT reg, reg, code_bit; CLRHI reg, reg, 63 - code_bit`.
pub fn store_mask_sequence(reg: Gpr, m: &AddressMap) -> [Instruction; 2] {
    [
        Instruction::bits(BitOp::SetBit, reg, reg, m.code_bit as u8),
        Instruction::bits(BitOp::ClrHi, reg, reg, (63 - m.code_bit) as u8),
    ]
}

/// `CLRHI reg, reg, 1`.
pub fn load_mask_sequence(reg: Gpr) -> [Instruction; 1] {
    [Instruction::bits(BitOp::ClrHi, reg, reg, 1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Preset;
    use crate::isa::Instruction;
    use proptest::prelude::*;

    fn run_seq(seq: &[Instruction], v: u64) -> u64 {
        seq.iter().fold(v, |acc, i| match i {
            Instruction::Bits { op, n, .. } => op.apply(acc, *n),
            _ => unreachable!(),
        })
    }

    fn cfg() -> HardeningConfig {
        HardeningConfig::preset(Preset::Cfi)
    }

    #[test]
    fn code_mask_examples() {
        let m = AddressMap::default();
        assert_eq!(mask_code_pointer_value(0x0000_1234_5678, &cfg(), &m), 0x0000_1234_5660);
        assert_eq!(mask_code_pointer_value(0x3FFF_FFFF_FFFF, &cfg(), &m), 0x1FFF_FFFF_FFE0);
    }

    #[test]
    fn store_mask_examples() {
        let m = AddressMap::default();
        assert_eq!(mask_store_pointer_value(0x0000_0000_8000, &m), 0x2000_0000_8000);
        assert_eq!(mask_store_pointer_value(u64::MAX, &m), 0x3FFF_FFFF_FFFF);
    }

    #[test]
    fn load_mask_examples() {
        assert_eq!(mask_load_pointer_value(0x8000_0000_0000_0000), 0);
        assert_eq!(mask_load_pointer_value(0x1000), 0x1000);
    }

    #[test]
    fn sequence_shapes() {
        let m = AddressMap::default();
        let r1 = Gpr::new(1).unwrap();
        let s: Vec<String> = code_mask_sequence(r1, &cfg(), &m).iter().map(|i| i.to_string()).collect();
        assert_eq!(s, ["clrlo r1, r1, 5", "clrhi r1, r1, 19"]);
        let s: Vec<String> = store_mask_sequence(r1, &m).iter().map(|i| i.to_string()).collect();
        assert_eq!(s, ["setbit r1, r1, 45", "clrhi r1, r1, 18"]);
        assert_eq!(load_mask_sequence(r1)[0].to_string(), "clrhi r1, r1, 1");
    }

    proptest! {
        #[test]
        fn sequences_compute_value_functions(p in any::<u64>(), bundle_log2 in 4u32..12) {
            let m = AddressMap::default();
            let c = cfg().with_bundle_size(1 << bundle_log2);
            let r = Gpr::new(7).unwrap();
            prop_assert_eq!(run_seq(&code_mask_sequence(r, &c, &m), p), mask_code_pointer_value(p, &c, &m));
            prop_assert_eq!(run_seq(&store_mask_sequence(r, &m), p), mask_store_pointer_value(p, &m));
            prop_assert_eq!(run_seq(&load_mask_sequence(r), p), mask_load_pointer_value(p));
        }
    }
}
