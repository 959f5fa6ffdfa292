//! Structural checker for laid-out images.
//!
//! Every bundle base is treated as a possible speculative entry point, so
//! all protection is checked inside each bundle without reconstructing a
//! CFG. Nothing here depends on the transformation passes; the expected
//! mask sequences are derived from the address map directly.

mod load;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::image::{AddressMap, HardeningConfig, LayoutImage};
use crate::isa::{decode, BitOp, Gpr, Instruction, INSTR_BYTES};

pub use load::{load_image, LoadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rule {
    R0,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
    R9,
}

impl Rule {
    pub const ALL: [Rule; 10] =
        [Rule::R0, Rule::R1, Rule::R2, Rule::R3, Rule::R4, Rule::R5, Rule::R6, Rule::R7, Rule::R8, Rule::R9];

    pub fn describe(self) -> &'static str {
        match self {
            Rule::R0 => "every word decodes",
            Rule::R1 => "bundles lie inside the code segment",
            Rule::R2 => "bundles are aligned and full-sized",
            Rule::R3 => "direct branch targets are bundle bases",
            Rule::R4 => "LR/CTR writes are masked in-bundle",
            Rule::R5 => "calls end their bundle",
            Rule::R6 => "a fence precedes the first load of each bundle",
            Rule::R7 => "stores are D-Form and masked in-bundle",
            Rule::R8 => "loads are D-Form and masked in-bundle",
            Rule::R9 => "symbols are bundle bases",
        }
    }

    fn enabled(self, c: &HardeningConfig) -> bool {
        match self {
            Rule::R4 => c.enable_cfi,
            Rule::R6 => c.enable_fence,
            Rule::R7 => c.enable_sfi_store,
            Rule::R8 => c.enable_sfi_load,
            _ => true,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    /// Base address of the offending bundle.
    pub addr: u64,
    /// Slot index inside the bundle.
    pub offset: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleStatus {
    pub rule: Rule,
    pub enabled: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub verdict: Verdict,
    pub violations: Vec<Violation>,
    pub rules: Vec<RuleStatus>,
}

impl VerifierReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn rules_violated(&self) -> Vec<Rule> {
        let mut r: Vec<Rule> = self.violations.iter().map(|v| v.rule).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Checker<'a> {
    img: &'a LayoutImage,
    config: &'a HardeningConfig,
    map: &'a AddressMap,
    /// Decoded words by address; undecodable words are absent.
    code: HashMap<u64, Instruction>,
    bases: HashSet<u64>,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn report(&mut self, rule: Rule, addr: u64, offset: usize, msg: impl Into<String>) {
        self.out.push(Violation { rule, addr, offset, msg: msg.into() });
    }

    fn unit(&self) -> u64 {
        self.config.unit_bytes() as u64
    }

    fn bits_is(i: Option<&Instruction>, op: BitOp, reg: Gpr, n: u8) -> bool {
        matches!(i, Some(&Instruction::Bits { op: o, rd, ra, n: k }) if o == op && rd == reg && ra == reg && k == n)
    }

    /// Compare the slots ahead of `k` with `expected`; report at the first
    /// mismatching slot, or at `k` when the bundle has too few slots.
    #[allow(clippy::too_many_arguments)]
    fn expect_prefix(&mut self, rule: Rule, addr: u64, slots: &[Option<Instruction>], k: usize, expected: &[(BitOp, u8)], reg: Gpr, what: &str) {
        if k < expected.len() {
            self.report(rule, addr, k, format!("{what}: mask sequence on {reg} does not fit before it in the bundle"));
            return;
        }
        let start = k - expected.len();
        for (j, &(op, n)) in expected.iter().enumerate() {
            if !Self::bits_is(slots[start + j].as_ref(), op, reg, n) {
                self.report(
                    rule,
                    addr,
                    start + j,
                    format!("{what}: expected `{} {reg}, {reg}, {n}` before slot {k}", op_name(op)),
                );
                return;
            }
        }
    }

    fn check_bundle(&mut self, bi: usize) {
        let b = &self.img.bundles[bi];
        let addr = b.base_addr;
        let unit = self.unit();
        let last_byte = b.end().wrapping_sub(1);

        if !self.map.in_code(addr) || !self.map.in_code(last_byte) || b.end() < addr {
            self.report(Rule::R1, addr, 0, format!("bundle {addr:#x}..{:#x} outside the code segment", b.end()));
        }
        if !addr.is_multiple_of(unit) {
            self.report(Rule::R2, addr, 0, format!("bundle base {addr:#x} not aligned to {unit}"));
        }
        if b.byte_len() != unit {
            self.report(Rule::R2, addr, 0, format!("bundle holds {} bytes, expected {unit}", b.byte_len()));
        }

        let slots: Vec<Option<Instruction>> = b.words.iter().map(|&w| decode(w).ok()).collect();
        let last = slots.len().saturating_sub(1);
        let log2 = unit.trailing_zeros() as u8;
        let code_bit = self.map.code_bit as u8;
        let mut first_load = None;
        let mut fence_seen = false;

        for (k, slot) in slots.iter().enumerate() {
            let pc = addr.wrapping_add(k as u64 * INSTR_BYTES);
            let Some(instr) = slot else {
                self.report(Rule::R0, addr, k, format!("word {:#010x} does not decode", b.words[k]));
                continue;
            };
            if let Some(t) = instr.target() {
                let dest = t.resolve(pc);
                let ok = dest.is_some_and(|d| self.bases.contains(&d) && self.map.in_code(d));
                if !ok {
                    let shown = dest.map(|d| format!("{d:#x}")).unwrap_or_else(|| t.to_string());
                    self.report(Rule::R3, addr, k, format!("`{instr}` targets {shown}, not a bundle base"));
                }
            }
            if instr.is_call() && k != last {
                self.report(Rule::R5, addr, k, format!("`{instr}` in slot {k} of {}", last + 1));
            }
            match *instr {
                Instruction::Fence => fence_seen = true,
                Instruction::LdD { .. } | Instruction::LdX { .. } if first_load.is_none() => {
                    first_load = Some(k);
                    if self.config.enable_fence && !fence_seen {
                        self.report(Rule::R6, addr, k, "first load of the bundle is not preceded by a fence");
                    }
                }
                _ => {}
            }
            if self.config.enable_cfi {
                let (reg, needed) = match *instr {
                    Instruction::Mtlr { rs } => (rs, true),
                    Instruction::Mtctr { rs } => (rs, self.ctr_reaches_branch(pc)),
                    _ => (Gpr::SCRATCH, false),
                };
                if needed {
                    let expected = [(BitOp::ClrLo, log2), (BitOp::ClrHi, 64 - code_bit)];
                    self.expect_prefix(Rule::R4, addr, &slots, k, &expected, reg, &format!("`{instr}`"));
                }
            }
            if self.config.enable_sfi_store {
                match *instr {
                    Instruction::StX { .. } => self.report(Rule::R7, addr, k, format!("X-Form store `{instr}`")),
                    Instruction::StD { base, .. } => {
                        let expected = [(BitOp::SetBit, code_bit), (BitOp::ClrHi, 63 - code_bit)];
                        self.expect_prefix(Rule::R7, addr, &slots, k, &expected, base, &format!("`{instr}`"));
                    }
                    _ => {}
                }
            }
            if self.config.enable_sfi_load {
                match *instr {
                    Instruction::LdX { .. } => self.report(Rule::R8, addr, k, format!("X-Form load `{instr}`")),
                    Instruction::LdD { base, .. } => {
                        self.expect_prefix(Rule::R8, addr, &slots, k, &[(BitOp::ClrHi, 1)], base, &format!("`{instr}`"));
                    }
                    _ => {}
                }
            }
        }
    }

    /// Whether the CTR value written at `pc` may reach an indirect branch
    /// or a call before CTR is rewritten or the function returns. Follows
    /// fallthrough and direct branch edges through the image.
    fn ctr_reaches_branch(&self, pc: u64) -> bool {
        let mut seen = HashSet::new();
        let mut work = vec![pc.wrapping_add(INSTR_BYTES)];
        while let Some(at) = work.pop() {
            if !seen.insert(at) {
                continue;
            }
            let Some(instr) = self.code.get(&at) else { continue };
            match instr {
                Instruction::Bctr | Instruction::Bctrl | Instruction::Bl { .. } => return true,
                Instruction::Mtctr { .. } | Instruction::Blr | Instruction::Halt => {}
                Instruction::B { target } => work.extend(target.resolve(at)),
                Instruction::Bc { target, .. } => {
                    work.extend(target.resolve(at));
                    work.push(at.wrapping_add(INSTR_BYTES));
                }
                _ => work.push(at.wrapping_add(INSTR_BYTES)),
            }
        }
        false
    }
}

fn op_name(op: BitOp) -> &'static str {
    match op {
        BitOp::ClrLo => "clrlo",
        BitOp::ClrHi => "clrhi",
        BitOp::SetBit => "setbit",
    }
}

/// Check `img` against every rule enabled by `config`.
pub fn verify(img: &LayoutImage, config: &HardeningConfig, m: &AddressMap) -> VerifierReport {
    let code = img
        .bundles
        .iter()
        .flat_map(|b| b.words.iter().enumerate().map(move |(k, &w)| (b.base_addr.wrapping_add(k as u64 * INSTR_BYTES), w)))
        .filter_map(|(a, w)| decode(w).ok().map(|i| (a, i)))
        .collect();
    let bases = img.bundles.iter().map(|b| b.base_addr).collect();
    let mut c = Checker { img, config, map: m, code, bases, out: Vec::new() };

    if img.bundle_size as u64 != c.unit() {
        c.report(Rule::R2, img.base_address, 0, format!("image bundle size {} but configuration expects {}", img.bundle_size, c.unit()));
    }
    for bi in 0..img.bundles.len() {
        c.check_bundle(bi);
    }
    for s in &img.symbols {
        if !c.bases.contains(&s.addr) {
            c.report(Rule::R9, s.addr, 0, format!("symbol `{}` at {:#x} is not a bundle base", s.name, s.addr));
        }
    }

    let violations: Vec<Violation> = c.out.into_iter().filter(|v| v.rule.enabled(config)).collect();
    VerifierReport {
        verdict: if violations.is_empty() { Verdict::Pass } else { Verdict::Fail },
        violations,
        rules: Rule::ALL
            .iter()
            .map(|&rule| RuleStatus { rule, enabled: rule.enabled(config), description: rule.describe().to_owned() })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Bundle, Symbol};
    use crate::isa::{encode, parse_instruction, NOP_WORD};

    fn words(lines: &[&str]) -> Vec<u32> {
        lines.iter().map(|l| encode(&parse_instruction(l).unwrap()).unwrap()).collect()
    }

    fn image(bundles: Vec<Vec<u32>>) -> LayoutImage {
        let bundles: Vec<Bundle> =
            bundles.into_iter().enumerate().map(|(i, words)| Bundle { base_addr: 0x8000 + 32 * i as u64, words }).collect();
        LayoutImage { bundle_size: 32, base_address: 0x8000, bundles, symbols: vec![Symbol { name: "main".into(), addr: 0x8000 }] }
    }

    fn padded(mut w: Vec<u32>) -> Vec<u32> {
        w.resize(8, NOP_WORD);
        w
    }

    fn cfg() -> HardeningConfig {
        HardeningConfig::preset(crate::image::Preset::SfiLoad)
    }

    #[test]
    fn clean_bundle_passes() {
        let img = image(vec![padded(words(&["clrlo r4, r4, 5", "clrhi r4, r4, 19", "mtlr r4", "blr"]))]);
        let r = verify(&img, &cfg(), &AddressMap::default());
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.rules.len(), 10);
    }

    #[test]
    fn missing_mask_is_localized() {
        let img = image(vec![padded(words(&["nop", "clrhi r4, r4, 19", "mtlr r4", "blr"]))]);
        let r = verify(&img, &cfg(), &AddressMap::default());
        assert_eq!(r.violations.len(), 1);
        assert_eq!((r.violations[0].rule, r.violations[0].offset), (Rule::R4, 0));
    }

    #[test]
    fn mask_on_wrong_register() {
        let img = image(vec![padded(words(&["clrlo r5, r5, 5", "clrhi r4, r4, 19", "mtlr r4", "blr"]))]);
        let r = verify(&img, &cfg(), &AddressMap::default());
        assert_eq!(r.rules_violated(), vec![Rule::R4]);
    }

    #[test]
    fn unused_ctr_needs_no_mask() {
        let img = image(vec![padded(words(&["mtctr r4", "halt"]))]);
        assert!(verify(&img, &cfg(), &AddressMap::default()).passed());
        let img = image(vec![padded(words(&["mtctr r4", "bctr"]))]);
        assert_eq!(verify(&img, &cfg(), &AddressMap::default()).rules_violated(), vec![Rule::R4]);
    }

    #[test]
    fn ctr_scan_follows_branches() {
        let img = image(vec![padded(words(&["mtctr r4", "bc z, r3, .+28", "halt"])), padded(words(&["bctr"]))]);
        assert_eq!(verify(&img, &cfg(), &AddressMap::default()).rules_violated(), vec![Rule::R4]);
    }

    #[test]
    fn undecodable_word() {
        let img = image(vec![padded(vec![0xffff_ffff])]);
        let r = verify(&img, &cfg(), &AddressMap::default());
        assert_eq!(r.rules_violated(), vec![Rule::R0]);
    }

    #[test]
    fn call_not_last() {
        let img = image(vec![padded(words(&["bl .+32", "halt"])), padded(words(&["halt"]))]);
        assert_eq!(verify(&img, &cfg(), &AddressMap::default()).rules_violated(), vec![Rule::R5]);
    }

    #[test]
    fn disabled_rules_are_silent() {
        let img = image(vec![padded(words(&["st_x r3, r2, r4", "ld_d r3, r2, 0", "halt"]))]);
        let base = HardeningConfig::preset(crate::image::Preset::Align);
        assert!(verify(&img, &base, &AddressMap::default()).passed());
        let r = verify(&img, &HardeningConfig::preset(crate::image::Preset::Fence), &AddressMap::default());
        assert_eq!(r.rules_violated(), vec![Rule::R6, Rule::R7]);
    }

    #[test]
    fn report_json_shape() {
        let img = image(vec![padded(vec![0xffff_ffff])]);
        let v: serde_json::Value = serde_json::from_str(&verify(&img, &cfg(), &AddressMap::default()).to_json()).unwrap();
        assert_eq!(v["verdict"], "fail");
        assert_eq!(v["violations"][0]["rule"], "R0");
        assert_eq!(v["violations"][0]["offset"], 0);
    }
}
