use proptest::prelude::*;
use venkman::image::{AddressMap, HardeningConfig, Preset};
use venkman::transform::{mask_code_pointer_value, mask_load_pointer_value, mask_store_pointer_value};

fn cfg(bundle: u32) -> HardeningConfig {
    HardeningConfig::preset(Preset::Cfi).with_bundle_size(bundle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn code_pointers_land_on_bundle_bases_below_the_code_limit(p in any::<u64>(), shift in 5u32..=8) {
        let m = AddressMap::default();
        let c = cfg(1 << shift);
        let q = mask_code_pointer_value(p, &c, &m);
        prop_assert_eq!(q % (1u64 << shift), 0);
        prop_assert!(q < 1 << 45);
        prop_assert_eq!(q, p & !((1u64 << shift) - 1) & ((1u64 << 45) - 1));
        prop_assert_eq!(mask_code_pointer_value(q, &c, &m), q);
    }

    #[test]
    fn store_pointers_land_in_the_data_segment(p in any::<u64>()) {
        let m = AddressMap::default();
        let q = mask_store_pointer_value(p, &m);
        prop_assert!(m.in_data(q));
        prop_assert_eq!(q & ((1 << 45) - 1), p & ((1 << 45) - 1));
        prop_assert_eq!(mask_store_pointer_value(q, &m), q);
    }

    #[test]
    fn load_pointers_lose_only_the_top_bit(p in any::<u64>()) {
        let q = mask_load_pointer_value(p);
        prop_assert!(q < 1 << 63);
        prop_assert_eq!(q | (p & 1 << 63), p);
    }
}

#[test]
fn masked_data_pointers_are_idempotent_at_the_edges() {
    let m = AddressMap::default();
    for p in [0, m.data_lo - 1, m.data_lo, m.data_hi, m.data_hi + 1, u64::MAX] {
        assert!(m.in_data(mask_store_pointer_value(p, &m)), "{p:#x}");
    }
    assert_eq!(mask_store_pointer_value(m.data_lo + 0x40, &m), m.data_lo + 0x40);
}
