//! Deterministic speculative-execution simulator: an interpreter for the
//! toy ISA with a BTB, a return stack, a direction predictor, a bounded
//! speculation window and a membership-only data cache.

mod cache;
mod machine;
mod predict;
mod scenario;
mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{AddressMap, LayoutImage};

pub use cache::CacheModel;
pub use machine::{MachineState, Memory};
pub use predict::{Btb, DirectionTable, Rsb};
pub use scenario::{
    spectre_v2_scenario, victim_program, AttackResult, ScenarioConfig, ARRAY1_OFFSET, ARRAY2_OFFSET, ARRAY2_STRIDE,
    ARRAY1_SIZE, SECRET_OFFSET, SHIFT_OFFSET, SIZE_OFFSET,
};
pub use sim::{Event, Exit, SimStats, Simulator, SquashReason, RETURN_SENTINEL};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("btb_slots must be a power of two, got {0}")]
    BtbSlots(usize),
    #[error("rsb_depth must be positive")]
    RsbDepth,
    #[error("line_size must be a power of two between 8 and 512, got {0}")]
    LineSize(u64),
    #[error("store_forwarding is not supported: speculative stores never reach instruction fetch")]
    StoreForwarding,
    #[error("image has no symbol `{0}`")]
    MissingSymbol(String),
    #[error("image has no entry point")]
    NoEntry,
    #[error("bad input value `{0}`")]
    BadValue(String),
    #[error("bad register name `{0}`")]
    BadRegister(String),
    #[error("secret must be non-empty")]
    EmptySecret,
    #[error("secret of {0} bytes does not fit between the secret and array2 regions")]
    SecretTooLong(usize),
    #[error("scenario call to `{function}` did not return: {exit}")]
    ScenarioCall { function: String, exit: String },
}

/// Microarchitectural parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub btb_slots: usize,
    pub rsb_depth: usize,
    pub line_size: u64,
    pub spec_window: u32,
    /// Let the BTB predict direct branches and calls too.
    pub direct_branch_btb: bool,
    pub store_forwarding: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            btb_slots: 64,
            rsb_depth: 8,
            line_size: 64,
            spec_window: 32,
            direct_branch_btb: true,
            store_forwarding: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.btb_slots.is_power_of_two() {
            return Err(SimError::BtbSlots(self.btb_slots));
        }
        if self.rsb_depth == 0 {
            return Err(SimError::RsbDepth);
        }
        if !self.line_size.is_power_of_two() || !(8..=512).contains(&self.line_size) {
            return Err(SimError::LineSize(self.line_size));
        }
        if self.store_forwarding {
            return Err(SimError::StoreForwarding);
        }
        Ok(())
    }

    pub fn with_window(mut self, w: u32) -> Self {
        self.spec_window = w;
        self
    }
}

/// Top of the stack handed to programs in r1.
pub fn stack_top(m: &AddressMap) -> u64 {
    m.data_lo + 0x100_0000
}

pub const STACK_BYTES: u64 = 0x1_0000;

/// A register or memory value: a number, or a string holding `0x..` hex,
/// `@symbol[+off]`, or `data[+off]` (relative to the data segment base).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputValue {
    Num(u64),
    Expr(String),
}

impl InputValue {
    pub fn resolve(&self, img: &LayoutImage, m: &AddressMap) -> Result<u64, SimError> {
        let s = match self {
            InputValue::Num(n) => return Ok(*n),
            InputValue::Expr(s) => s.trim(),
        };
        let bad = || SimError::BadValue(s.to_owned());
        let (head, off) = match s.split_once('+') {
            Some((h, o)) => (h.trim(), parse_num(o.trim()).ok_or_else(bad)?),
            None => (s, 0),
        };
        let base = if let Some(sym) = head.strip_prefix('@') {
            img.symbol(sym).ok_or_else(|| SimError::MissingSymbol(sym.to_owned()))?
        } else if head == "data" {
            m.data_lo
        } else {
            parse_num(head).ok_or_else(bad)?
        };
        Ok(base.wrapping_add(off))
    }
}

fn parse_num(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryInit {
    pub addr: InputValue,
    /// Doublewords stored from `addr` upward.
    #[serde(default)]
    pub values: Vec<InputValue>,
    /// Raw bytes stored after the doublewords.
    #[serde(default)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunInputs {
    /// Function to call; defaults to the image entry.
    pub entry: Option<String>,
    pub regs: BTreeMap<String, InputValue>,
    pub memory: Vec<MemoryInit>,
    pub limit: u64,
}

impl Default for RunInputs {
    fn default() -> Self {
        RunInputs { entry: None, regs: BTreeMap::new(), memory: Vec::new(), limit: 1_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Halted,
    Returned,
    Trapped,
    Timeout,
}

/// Committed, layout-independent observations of a run: r3..r10 and the
/// data-segment doublewords outside the stack that the run changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outputs {
    pub status: Status,
    pub regs: Vec<u64>,
    pub memory: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub outputs: Outputs,
    pub exit: Exit,
    pub instret: u64,
    pub cache_final: Vec<u64>,
    pub stats: SimStats,
}

fn parse_reg(name: &str) -> Option<usize> {
    let n: usize = name.strip_prefix('r')?.parse().ok()?;
    (n < 32).then_some(n)
}

/// Set up the stack and data registers, then apply `inputs` to `sim`.
/// Returns the entry address.
pub fn apply_inputs(sim: &mut Simulator, img: &LayoutImage, inputs: &RunInputs, m: &AddressMap) -> Result<u64, SimError> {
    let entry = match &inputs.entry {
        Some(name) => img.symbol(name).ok_or_else(|| SimError::MissingSymbol(name.clone()))?,
        None => img.entry().ok_or(SimError::NoEntry)?,
    };
    sim.state.gprs[1] = stack_top(m);
    sim.state.gprs[2] = m.data_lo;
    for (name, v) in &inputs.regs {
        let r = parse_reg(name).ok_or_else(|| SimError::BadRegister(name.clone()))?;
        sim.state.gprs[r] = v.resolve(img, m)?;
    }
    for init in &inputs.memory {
        let mut addr = init.addr.resolve(img, m)?;
        for v in &init.values {
            sim.state.mem.write_u64(addr, v.resolve(img, m)?);
            addr = addr.wrapping_add(8);
        }
        sim.state.mem.write_bytes(addr, &init.bytes);
    }
    Ok(entry)
}

/// Load `img`, apply `inputs` and call the entry function.
pub fn run(img: &LayoutImage, inputs: &RunInputs, config: SimConfig, m: &AddressMap) -> Result<RunResult, SimError> {
    let mut sim = Simulator::new(img, config, *m)?;
    let entry = apply_inputs(&mut sim, img, inputs, m)?;
    let initial = sim.state.mem.clone();
    let exit = sim.call(entry, &[], inputs.limit);
    let status = match exit {
        Exit::Halted => Status::Halted,
        Exit::Returned => Status::Returned,
        Exit::Trap { .. } => Status::Trapped,
        Exit::Timeout => Status::Timeout,
    };
    let stack = stack_top(m) - STACK_BYTES..stack_top(m);
    let outputs = Outputs {
        status,
        regs: sim.state.gprs[3..=10].to_vec(),
        memory: sim.state.mem.changed_words(&initial).filter(|(a, _)| m.in_data(*a) && !stack.contains(a)).collect(),
    };
    Ok(RunResult { outputs, exit, instret: sim.stats.committed, cache_final: sim.cache.lines().collect(), stats: sim.stats })
}
