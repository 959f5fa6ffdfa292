mod common;

use common::{build, corpus, map};
use proptest::prelude::*;
use venkman::image::{HardeningConfig, Preset};
use venkman::transform::{emit_image, MAGIC};
use venkman::verifier::{load_image, verify, LoadError};

fn sample() -> Vec<u8> {
    let p = corpus().into_iter().find(|p| p.name == "fnptr_dispatch").unwrap();
    emit_image(&build(&p, Preset::Fence).image)
}

#[test]
fn header_layout() {
    let bytes = sample();
    assert_eq!(&bytes[..4], &MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 32);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), map().code_lo);
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = sample();
    for n in 0..bytes.len() {
        assert!(load_image(&bytes[..n]).is_err(), "prefix of {n} bytes loaded");
    }
}

#[test]
fn trailing_garbage_is_rejected() {
    let mut bytes = sample();
    bytes.extend_from_slice(&[0; 4]);
    assert!(matches!(load_image(&bytes), Err(LoadError::SizeMismatch { .. })));
}

#[test]
fn bad_magic() {
    let mut bytes = sample();
    bytes[0] ^= 0x20;
    assert!(matches!(load_image(&bytes), Err(LoadError::BadMagic(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn corrupted_containers_never_panic(flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)) {
        let mut bytes = sample();
        for (i, x) in flips {
            let at = i.index(bytes.len());
            bytes[at] ^= x;
        }
        if let Ok(img) = load_image(&bytes) {
            // Whatever loads must be checkable.
            let _ = verify(&img, &HardeningConfig::preset(Preset::Fence), &map());
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = load_image(&bytes);
    }
}
