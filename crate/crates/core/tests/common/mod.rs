#![allow(dead_code)]

use std::path::PathBuf;

use venkman::corpus::{load_corpus, CorpusProgram};
use venkman::image::{AddressMap, HardeningConfig, LayoutImage, Preset};
use venkman::isa::{decode, encode, BitOp, Gpr, Instruction, Target};
use venkman::transform::{
    mask_code_pointer_value, mask_load_pointer_value, mask_store_pointer_value, transform, TransformOutput,
};
use venkman::verifier::Rule;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn corpus() -> Vec<CorpusProgram> {
    load_corpus(&corpus_dir()).expect("corpus loads")
}

pub fn program(name: &str) -> CorpusProgram {
    corpus().into_iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no corpus program {name}"))
}

pub fn map() -> AddressMap {
    AddressMap::default()
}

pub fn build(p: &CorpusProgram, preset: Preset) -> TransformOutput {
    transform(&p.program, &HardeningConfig::preset(preset), &map())
        .unwrap_or_else(|e| panic!("{} under {}: {e}", p.name, preset.name()))
}

pub fn decoded_bundles(img: &LayoutImage) -> Vec<(u64, Vec<Instruction>)> {
    img.bundles
        .iter()
        .map(|b| (b.base_addr, b.words.iter().map(|&w| decode(w).expect("decodes")).collect()))
        .collect()
}

/// Every protection switched on.
pub fn everything() -> HardeningConfig {
    let mut c = HardeningConfig::preset(Preset::Fence);
    c.enable_sfi_load = true;
    c
}

const PROBES: [u64; 5] = [0, 1, 0x1234_5678_9abc_def1, u64::MAX, 0x2000_0000_8001];

/// Value computed by a run of in-place bit ops on `reg`, or `None` when the
/// prefix contains anything else.
fn apply_bits(prefix: &[Instruction], reg: Gpr, v: u64) -> Option<u64> {
    prefix.iter().try_fold(v, |acc, i| match *i {
        Instruction::Bits { op, rd, ra, n } if rd == reg && ra == reg => Some(op.apply(acc, n)),
        _ => None,
    })
}

fn masked_by(prefix: &[Instruction], reg: Gpr, want: impl Fn(u64) -> u64) -> bool {
    PROBES.iter().all(|&v| apply_bits(prefix, reg, v) == Some(want(v)))
}

/// Layout invariants of a hardened image, checked by evaluating the mask
/// prefixes rather than matching them. Returns one message per failure.
pub fn bundle_violations(img: &LayoutImage, c: &HardeningConfig, m: &AddressMap) -> Vec<String> {
    let mut bad = Vec::new();
    let unit = c.bundle_size_bytes as u64;
    for (base, slots) in decoded_bundles(img) {
        let mut fail = |what: String| bad.push(format!("bundle {base:#x}: {what}"));
        if base % unit != 0 {
            fail("misaligned".into());
        }
        if slots.len() as u64 * 4 != unit {
            fail(format!("{} slots", slots.len()));
        }
        for (k, i) in slots.iter().enumerate() {
            if i.is_call() && k != slots.len() - 1 {
                fail(format!("call in slot {k}"));
            }
        }
        if c.enable_fence {
            let fences: Vec<usize> = slots.iter().enumerate().filter(|(_, i)| **i == Instruction::Fence).map(|(k, _)| k).collect();
            match slots.iter().position(Instruction::is_load) {
                Some(l) if fences.len() != 1 || fences[0] > l => fail(format!("fences {fences:?}, first load {l}")),
                None if !fences.is_empty() => fail("fence without load".into()),
                _ => {}
            }
        }
        for (k, i) in slots.iter().enumerate() {
            let before = |n: usize| &slots[k.saturating_sub(n)..k];
            let ok = match *i {
                Instruction::Mtlr { rs } if c.enable_cfi => masked_by(before(2), rs, |v| mask_code_pointer_value(v, c, m)),
                Instruction::Mtctr { rs }
                    if c.enable_cfi && matches!(slots.get(k + 1), Some(Instruction::Bctr | Instruction::Bctrl)) =>
                {
                    masked_by(before(2), rs, |v| mask_code_pointer_value(v, c, m))
                }
                Instruction::StX { .. } if c.enable_sfi_store => false,
                Instruction::LdX { .. } if c.enable_sfi_load => false,
                Instruction::StD { base, .. } if c.enable_sfi_store => masked_by(before(2), base, |v| mask_store_pointer_value(v, m)),
                Instruction::LdD { base, .. } if c.enable_sfi_load => masked_by(before(1), base, mask_load_pointer_value),
                _ => true,
            };
            if !ok {
                fail(format!("slot {k} `{i}` not masked in-bundle"));
            }
        }
    }
    bad
}

/// The victim program hardened with every protection.
pub fn hardened_victim() -> (LayoutImage, HardeningConfig) {
    let out = transform(&program("spectre_v2").program, &everything(), &map()).unwrap();
    (out.image, out.config)
}

/// First (bundle, slot) whose instruction satisfies `f`.
pub fn find(img: &LayoutImage, f: impl Fn(&Instruction, usize, &[u32]) -> bool) -> (usize, usize) {
    for (bi, b) in img.bundles.iter().enumerate() {
        for (k, &w) in b.words.iter().enumerate() {
            if f(&decode(w).unwrap(), k, &b.words) {
                return (bi, k);
            }
        }
    }
    panic!("no matching slot");
}

pub fn set(img: &mut LayoutImage, (bi, k): (usize, usize), i: Instruction) {
    img.bundles[bi].words[k] = encode(&i).unwrap();
}

pub fn next_is(words: &[u32], k: usize, f: impl Fn(&Instruction) -> bool) -> bool {
    words.get(k + 1).is_some_and(|&w| f(&decode(w).unwrap()))
}

/// The hardened victim with one corruption aimed at `rule`, plus the base
/// of the bundle that should be blamed.
pub fn mutant(rule: Rule) -> (LayoutImage, HardeningConfig, u64) {
    let (mut img, c) = hardened_victim();
    let at = match rule {
        Rule::R0 => {
            img.bundles[3].words[2] = 0xffff_ffff;
            (3, 2)
        }
        Rule::R1 => {
            let delta = img.base_address - (map().code_lo - c.bundle_size_bytes as u64);
            img.base_address -= delta;
            img.bundles.iter_mut().for_each(|b| b.base_addr -= delta);
            img.symbols.iter_mut().for_each(|s| s.addr -= delta);
            (0, 0)
        }
        Rule::R2 => {
            let at = find(&img, |i, k, w| *i == Instruction::Nop && k == w.len() - 1);
            img.bundles[at.0].words.pop();
            at
        }
        Rule::R3 => {
            let at = find(&img, |i, _, _| matches!(i, Instruction::Bc { .. }));
            let Instruction::Bc { cond, rs, target: Target::Rel(w) } = decode(img.bundles[at.0].words[at.1]).unwrap() else {
                unreachable!()
            };
            set(&mut img, at, Instruction::Bc { cond, rs, target: Target::Rel(w + 1) });
            at
        }
        Rule::R4 => {
            let at = find(&img, |i, k, w| {
                matches!(i, Instruction::Bits { op: BitOp::ClrLo, .. }) && next_is(w, k + 1, |j| matches!(j, Instruction::Mtlr { .. }))
            });
            set(&mut img, at, Instruction::Nop);
            at
        }
        Rule::R5 => {
            let at = find(&img, |i, k, w| *i == Instruction::Nop && next_is(w, k, |j| matches!(j, Instruction::Bl { .. })));
            set(&mut img, at, Instruction::Bctrl);
            at
        }
        Rule::R6 => {
            let at = find(&img, |i, _, _| *i == Instruction::Fence);
            set(&mut img, at, Instruction::Nop);
            at
        }
        Rule::R7 => {
            let at = find(&img, |i, _, _| matches!(i, Instruction::Bits { op: BitOp::SetBit, .. }));
            set(&mut img, at, Instruction::Nop);
            at
        }
        Rule::R8 => {
            let at = find(&img, |i, k, w| {
                matches!(i, Instruction::Bits { op: BitOp::ClrHi, n: 1, .. }) && next_is(w, k, |j| matches!(j, Instruction::LdD { .. }))
            });
            set(&mut img, at, Instruction::Nop);
            at
        }
        Rule::R9 => {
            img.symbols[1].addr += 4;
            let addr = img.symbols[1].addr - 4;
            return (img, c, addr);
        }
    };
    let addr = img.bundles[at.0].base_addr;
    (img, c, addr)
}
