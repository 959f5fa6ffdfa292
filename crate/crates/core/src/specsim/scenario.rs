//! Branch-target-injection attack against a function-pointer dispatcher,
//! read out through a flush-and-probe cache channel.

use serde::{Deserialize, Serialize};

use crate::image::{AddressMap, LayoutImage};

use super::{stack_top, Exit, SimConfig, SimError, Simulator};

pub const ARRAY1_OFFSET: u64 = 0;
pub const ARRAY1_SIZE: u64 = 16;
pub const SIZE_OFFSET: u64 = 0x1000;
pub const SHIFT_OFFSET: u64 = 0x1008;
pub const SECRET_OFFSET: u64 = 0x2000;
pub const ARRAY2_OFFSET: u64 = 0x4000;
pub const ARRAY2_STRIDE: u64 = 512;

const MAX_SECRET: usize = (ARRAY2_OFFSET - SECRET_OFFSET) as usize;
const TRAINING_ROUNDS: u64 = 4;
const CALL_LIMIT: u64 = 10_000;

/// Assembly source of the victim program.
pub fn victim_program() -> &'static str {
    include_str!("../../../../corpus/spectre_v2.s")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(default = "default_secret")]
    pub secret: String,
}

fn default_secret() -> String {
    "The Magic Words".to_owned()
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig { sim: SimConfig::default(), secret: default_secret() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackResult {
    /// Hex of the recovered bytes, `--` where the probe was inconclusive.
    pub recovered_hex: String,
    pub recovered: Vec<Option<u8>>,
    /// Candidate values whose probe line was cached, per secret byte.
    pub per_byte_hits: Vec<Vec<u8>>,
    /// Bytes whose single hit equals the secret byte.
    pub bytes_recovered: usize,
    /// Bytes whose true value's probe line was cached at all.
    pub secret_indexed_hits: usize,
    pub leaked: bool,
    pub cfi_violations: u64,
    pub speculative_instrs: u64,
}

impl AttackResult {
    pub fn recovered_fraction(&self) -> f64 {
        if self.recovered.is_empty() {
            return 0.0;
        }
        self.bytes_recovered as f64 / self.recovered.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

fn expect_return(exit: Exit, function: &str) -> Result<(), SimError> {
    match exit {
        Exit::Returned => Ok(()),
        other => Err(SimError::ScenarioCall { function: function.to_owned(), exit: format!("{other:?}") }),
    }
}

/// Per secret byte: flush, train the dispatcher's indirect call towards
/// `victim_function` with in-bounds indices, flush again, then call the
/// dispatcher with `benign_function` and an index that reaches the secret.
/// The byte is read back by probing which `array2` line is cached.
pub fn spectre_v2_scenario(img: &LayoutImage, cfg: &ScenarioConfig, m: &AddressMap) -> Result<AttackResult, SimError> {
    let secret = cfg.secret.as_bytes();
    if secret.is_empty() {
        return Err(SimError::EmptySecret);
    }
    if secret.len() > MAX_SECRET {
        return Err(SimError::SecretTooLong(secret.len()));
    }
    let sym = |name: &str| img.symbol(name).ok_or_else(|| SimError::MissingSymbol(name.to_owned()));
    let victim = sym("victim_function")?;
    let benign = sym("benign_function")?;
    let dispatcher = sym("dispatcher")?;

    let mut sim = Simulator::new(img, cfg.sim, *m)?;
    let data = m.data_lo;
    let mem = &mut sim.state.mem;
    mem.write_bytes(data + ARRAY1_OFFSET, &(1..=ARRAY1_SIZE as u8).collect::<Vec<_>>());
    mem.write_u64(data + SIZE_OFFSET, ARRAY1_SIZE);
    mem.write_u64(data + SHIFT_OFFSET, ARRAY2_STRIDE.trailing_zeros() as u64);
    mem.write_bytes(data + SECRET_OFFSET, secret);
    sim.state.gprs[2] = data;

    let probe_line = |v: u64| data + ARRAY2_OFFSET + v * ARRAY2_STRIDE;
    let mut recovered = Vec::with_capacity(secret.len());
    let mut per_byte_hits = Vec::with_capacity(secret.len());
    let mut bytes_recovered = 0;
    let mut secret_indexed_hits = 0;

    for (i, &s) in secret.iter().enumerate() {
        sim.cache.flush();
        for t in 0..TRAINING_ROUNDS {
            sim.state.gprs[1] = stack_top(m);
            let x = (i as u64 + t) % ARRAY1_SIZE;
            expect_return(sim.call(dispatcher, &[victim, x], CALL_LIMIT), "dispatcher")?;
        }
        sim.cache.flush();
        sim.state.gprs[1] = stack_top(m);
        let x = SECRET_OFFSET - ARRAY1_OFFSET + i as u64;
        expect_return(sim.call(dispatcher, &[benign, x], CALL_LIMIT), "dispatcher")?;

        let hits: Vec<u8> = (0..=255u8).filter(|&v| sim.cache.contains(probe_line(v as u64))).collect();
        if hits.contains(&s) {
            secret_indexed_hits += 1;
        }
        let guess = match hits.as_slice() {
            [only] => Some(*only),
            _ => None,
        };
        if guess == Some(s) {
            bytes_recovered += 1;
        }
        recovered.push(guess);
        per_byte_hits.push(hits);
    }

    let recovered_hex = recovered.iter().map(|b| b.map_or_else(|| "--".to_owned(), |b| format!("{b:02x}"))).collect();
    Ok(AttackResult {
        recovered_hex,
        recovered,
        per_byte_hits,
        bytes_recovered,
        secret_indexed_hits,
        leaked: bytes_recovered > 0 || secret_indexed_hits > 0,
        cfi_violations: sim.stats.cfi_violations,
        speculative_instrs: sim.stats.speculative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Preset;
    use crate::isa::parse_asm;
    use crate::transform::transform_preset;

    fn attack(preset: Preset, window: u32) -> AttackResult {
        let img = transform_preset(&parse_asm(victim_program()).unwrap(), preset).unwrap().image;
        let cfg = ScenarioConfig { sim: SimConfig::default().with_window(window), ..Default::default() };
        spectre_v2_scenario(&img, &cfg, &AddressMap::default()).unwrap()
    }

    #[test]
    fn baseline_leaks() {
        let r = attack(Preset::Baseline, 32);
        assert_eq!(r.recovered_hex, hex("The Magic Words"), "{r:?}");
        assert!(r.leaked);
    }

    #[test]
    fn fenced_does_not_leak() {
        for w in [8, 32, 128] {
            let r = attack(Preset::Fence, w);
            assert!(!r.leaked, "window {w}: {r:?}");
            assert!(r.per_byte_hits.iter().all(Vec::is_empty));
            assert_eq!(r.cfi_violations, 0);
        }
    }

    fn hex(s: &str) -> String {
        s.bytes().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn missing_symbol() {
        let img = transform_preset(&parse_asm(".func main\n halt\n.endfunc\n").unwrap(), Preset::Baseline).unwrap().image;
        let e = spectre_v2_scenario(&img, &ScenarioConfig::default(), &AddressMap::default()).unwrap_err();
        assert_eq!(e, SimError::MissingSymbol("victim_function".into()));
    }
}
