//! Single-point corruptions of a fully hardened image. Each must be caught
//! by exactly the rule that covers it, at the corrupted bundle.

mod common;

use common::{build, corpus, everything, find, hardened_victim, map, mutant, set};
use venkman::image::{HardeningConfig, Preset};
use venkman::isa::{decode, encode, BitOp, Instruction};
use venkman::verifier::{verify, Rule, VerifierReport};

fn assert_only(report: &VerifierReport, rule: Rule, bundle_addr: u64) {
    assert!(!report.passed());
    assert_eq!(report.rules_violated(), vec![rule], "{:#?}", report.violations);
    assert!(report.violations.iter().all(|v| v.addr == bundle_addr), "{:#?}", report.violations);
}

#[test]
fn unmodified_image_passes() {
    let (img, c) = hardened_victim();
    let r = verify(&img, &c, &map());
    assert!(r.passed(), "{:#?}", r.violations);
    assert!(r.violations.is_empty());
}

fn mutated(rule: Rule) {
    let (img, c, addr) = mutant(rule);
    let report = verify(&img, &c, &map());
    if rule == Rule::R9 {
        assert_eq!(report.rules_violated(), vec![Rule::R9]);
    } else {
        assert_only(&report, rule, addr);
    }
}

#[test]
fn r0_undecodable_word() {
    mutated(Rule::R0);
}

#[test]
fn r1_bundle_below_code_segment() {
    mutated(Rule::R1);
}

#[test]
fn r2_short_bundle() {
    mutated(Rule::R2);
}

#[test]
fn r3_branch_into_bundle_middle() {
    mutated(Rule::R3);
}

#[test]
fn r4_missing_code_mask() {
    mutated(Rule::R4);
}

#[test]
fn r4_missing_ctr_mask() {
    let (mut img, c) = hardened_victim();
    let at = find(&img, |i, k, w| {
        matches!(i, Instruction::Bits { op: BitOp::ClrHi, .. }) && common::next_is(w, k, |j| matches!(j, Instruction::Mtctr { .. }))
    });
    set(&mut img, at, Instruction::Nop);
    assert_only(&verify(&img, &c, &map()), Rule::R4, img.bundles[at.0].base_addr);
}

#[test]
fn r5_call_not_last() {
    mutated(Rule::R5);
}

#[test]
fn r6_missing_fence() {
    mutated(Rule::R6);
}

#[test]
fn r7_missing_store_mask() {
    mutated(Rule::R7);
}

#[test]
fn r8_missing_load_mask() {
    mutated(Rule::R8);
}

#[test]
fn r9_symbol_off_base() {
    mutated(Rule::R9);
}

#[test]
fn disabled_rules_are_not_checked() {
    let (mut img, _) = hardened_victim();
    let at = find(&img, |i, _, _| *i == Instruction::Fence);
    set(&mut img, at, Instruction::Nop);
    let mut c = everything();
    c.enable_fence = false;
    assert!(verify(&img, &c, &map()).passed());
}

#[test]
fn unhardened_images_fail_hardened_configs() {
    for p in corpus() {
        let img = build(&p, Preset::Baseline).image;
        let r = verify(&img, &HardeningConfig::preset(Preset::Fence), &map());
        assert!(!r.passed(), "{}", p.name);
        assert!(r.rules_violated().contains(&Rule::R2));
    }
}

#[test]
fn every_single_nop_out_of_a_mask_is_caught() {
    for p in corpus() {
        let out = venkman::transform::transform(&p.program, &everything(), &map()).unwrap();
        for (bi, b) in out.image.bundles.iter().enumerate() {
            for k in 0..b.words.len() {
                if !matches!(decode(b.words[k]).unwrap(), Instruction::Bits { .. } | Instruction::Fence) {
                    continue;
                }
                let mut img = out.image.clone();
                img.bundles[bi].words[k] = encode(&Instruction::Nop).unwrap();
                let r = verify(&img, &out.config, &map());
                assert!(!r.passed(), "{} bundle {bi} slot {k}", p.name);
                assert!(r.violations.iter().all(|v| v.addr == b.base_addr));
            }
        }
    }
}
