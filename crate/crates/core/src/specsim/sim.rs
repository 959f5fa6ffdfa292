//! The interpreter: committed execution with predictor-driven speculation
//! episodes that roll back everything except the cache.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::image::{AddressMap, LayoutImage};
use crate::isa::{decode, Instruction, INSTR_BYTES};

use super::cache::CacheModel;
use super::machine::{Checkpoint, MachineState};
use super::predict::{Btb, DirectionTable, Rsb};
use super::{SimConfig, SimError};

/// Return address installed in LR before a harness call; committing a
/// branch to it ends the call.
pub const RETURN_SENTINEL: u64 = 0;

const ACCESS_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashReason {
    WindowExhausted,
    Fence,
    Fault,
    Halt,
    NoPrediction,
    BadFetch,
}

/// How a committed run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Exit {
    Halted,
    Returned,
    Trap { pc: u64, reason: String },
    Timeout,
}

/// Observations recorded when tracing is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Commit { pc: u64 },
    SpecStart { branch_pc: u64, predicted: u64, resolved: u64 },
    SpecFetch { pc: u64 },
    SpecLoad { pc: u64, addr: u64 },
    Squash { reason: SquashReason, resume: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub committed: u64,
    pub speculative: u64,
    pub episodes: u64,
    pub squashes: BTreeMap<SquashReason, u64>,
    /// Speculative fetches that were neither a bundle base nor the next
    /// slot after the previous fetch.
    pub cfi_violations: u64,
}

enum Fault {
    Memory(u64),
}

enum Flow {
    Next { pc: u64, predicted: Option<u64> },
    Halt,
    Fence,
}

/// A machine bound to one image, with predictors and cache that persist
/// across harness calls.
#[derive(Debug, Clone)]
pub struct Simulator {
    base: u64,
    code: Vec<Option<Instruction>>,
    bundle_size: u64,
    map: AddressMap,
    config: SimConfig,
    pub state: MachineState,
    pub btb: Btb,
    pub bht: DirectionTable,
    pub rsb: Rsb,
    pub cache: CacheModel,
    pub stats: SimStats,
    trace: Option<Vec<Event>>,
    spec_overlay: Option<BTreeMap<u64, u8>>,
}

impl Simulator {
    pub fn new(img: &LayoutImage, config: SimConfig, map: AddressMap) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Simulator {
            base: img.base_address,
            code: img.words().map(|(_, w)| decode(w).ok()).collect(),
            bundle_size: img.bundle_size.max(INSTR_BYTES as u32) as u64,
            map,
            config,
            state: MachineState::default(),
            btb: Btb::new(config.btb_slots),
            bht: DirectionTable::new(config.btb_slots),
            rsb: Rsb::new(config.rsb_depth),
            cache: CacheModel::new(config.line_size),
            stats: SimStats::default(),
            trace: None,
            spec_overlay: None,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<Event> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, e: Event) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    fn fetch(&self, pc: u64) -> Option<&Instruction> {
        if pc < self.base || !pc.is_multiple_of(INSTR_BYTES) {
            return None;
        }
        self.code.get(((pc - self.base) / INSTR_BYTES) as usize)?.as_ref()
    }

    fn mapped(&self, addr: u64) -> bool {
        let Some(last) = addr.checked_add(ACCESS_BYTES - 1) else { return false };
        let m = &self.map;
        (m.in_code(addr) && m.in_code(last)) || (m.in_data(addr) && m.in_data(last))
    }

    fn load(&mut self, addr: u64) -> Result<u64, Fault> {
        if !self.mapped(addr) {
            return Err(Fault::Memory(addr));
        }
        self.cache.touch(addr, ACCESS_BYTES);
        let mem = &self.state.mem;
        Ok(match &self.spec_overlay {
            None => mem.read_u64(addr),
            Some(ov) => {
                let mut b = [0u8; 8];
                for (i, byte) in b.iter_mut().enumerate() {
                    let a = addr + i as u64;
                    *byte = ov.get(&a).copied().unwrap_or_else(|| mem.read_u8(a));
                }
                u64::from_le_bytes(b)
            }
        })
    }

    fn store(&mut self, addr: u64, v: u64) -> Result<(), Fault> {
        if !self.mapped(addr) {
            return Err(Fault::Memory(addr));
        }
        self.cache.touch(addr, ACCESS_BYTES);
        match &mut self.spec_overlay {
            None => self.state.mem.write_u64(addr, v),
            Some(ov) => {
                for (i, b) in v.to_le_bytes().into_iter().enumerate() {
                    ov.insert(addr + i as u64, b);
                }
            }
        }
        Ok(())
    }

    /// Execute `instr` at `pc`. Committed execution returns the actual
    /// successor plus whatever the predictors guessed and trains them;
    /// speculative execution follows the guess and leaves BTB and direction
    /// table untouched.
    fn exec(&mut self, instr: &Instruction, pc: u64, spec: bool) -> Result<Flow, Option<Fault>> {
        use Instruction::*;
        let seq = pc.wrapping_add(INSTR_BYTES);
        let s = &mut self.state;
        let next = |pc| Ok(Flow::Next { pc, predicted: None });
        match *instr {
            Alu { op, rd, ra, rb } => {
                let v = op.apply(s.gpr(ra), s.gpr(rb));
                s.set_gpr(rd, v);
                next(seq)
            }
            AluImm { op, rd, ra, imm } => {
                let v = op.apply(s.gpr(ra), imm);
                s.set_gpr(rd, v);
                next(seq)
            }
            Bits { op, rd, ra, n } => {
                let v = op.apply(s.gpr(ra), n);
                s.set_gpr(rd, v);
                next(seq)
            }
            LdD { rd, base, imm } => {
                let addr = s.gpr(base).wrapping_add(imm as i64 as u64);
                let v = self.load_logged(pc, addr, spec)?;
                self.state.set_gpr(rd, v);
                next(seq)
            }
            LdX { rd, base, index } => {
                let addr = s.gpr(base).wrapping_add(s.gpr(index));
                let v = self.load_logged(pc, addr, spec)?;
                self.state.set_gpr(rd, v);
                next(seq)
            }
            StD { rs, base, imm } => {
                let (addr, v) = (s.gpr(base).wrapping_add(imm as i64 as u64), s.gpr(rs));
                self.store(addr, v).map_err(Some)?;
                next(seq)
            }
            StX { rs, base, index } => {
                let (addr, v) = (s.gpr(base).wrapping_add(s.gpr(index)), s.gpr(rs));
                self.store(addr, v).map_err(Some)?;
                next(seq)
            }
            Mtlr { rs } => {
                s.lr = s.gpr(rs);
                next(seq)
            }
            Mtctr { rs } => {
                s.ctr = s.gpr(rs);
                next(seq)
            }
            Mflr { rd } => {
                let v = s.lr;
                s.set_gpr(rd, v);
                next(seq)
            }
            Nop => next(seq),
            Fence => Ok(Flow::Fence),
            Halt => Ok(Flow::Halt),
            B { ref target } | Bl { ref target } => {
                let t = target.resolve(pc).expect("image targets are relative");
                if matches!(instr, Bl { .. }) {
                    s.lr = seq;
                    self.rsb.push(seq);
                }
                let guess = if self.config.direct_branch_btb { self.btb.lookup(pc) } else { None };
                if spec {
                    return next(guess.unwrap_or(t));
                }
                self.btb.update(pc, t);
                Ok(Flow::Next { pc: t, predicted: guess })
            }
            Bc { cond, rs, ref target } => {
                let t = target.resolve(pc).expect("image targets are relative");
                let guess = if self.bht.predict(pc) { t } else { seq };
                if spec {
                    return next(guess);
                }
                let taken = cond.holds(s.gpr(rs));
                self.bht.update(pc, taken);
                Ok(Flow::Next { pc: if taken { t } else { seq }, predicted: Some(guess) })
            }
            Bctr | Bctrl => {
                let actual = s.ctr;
                if matches!(instr, Bctrl) {
                    s.lr = seq;
                    self.rsb.push(seq);
                }
                let guess = self.btb.lookup(pc);
                if spec {
                    return guess.map(|g| Flow::Next { pc: g, predicted: None }).ok_or(None);
                }
                self.btb.update(pc, actual);
                Ok(Flow::Next { pc: actual, predicted: guess })
            }
            Blr => {
                let actual = s.lr;
                let guess = self.rsb.pop();
                if spec {
                    return guess.map(|g| Flow::Next { pc: g, predicted: None }).ok_or(None);
                }
                Ok(Flow::Next { pc: actual, predicted: guess })
            }
        }
    }

    fn load_logged(&mut self, pc: u64, addr: u64, spec: bool) -> Result<u64, Option<Fault>> {
        if spec {
            self.log(Event::SpecLoad { pc, addr });
        }
        self.load(addr).map_err(Some)
    }

    /// Run down the predicted path from `from` until something forces
    /// resolution, then restore the state that holds after the branch.
    fn speculate(&mut self, branch_pc: u64, from: u64, resolved: u64) {
        self.stats.episodes += 1;
        self.log(Event::SpecStart { branch_pc, predicted: from, resolved });
        let s = &self.state;
        let checkpoint = Checkpoint { gprs: s.gprs, lr: s.lr, ctr: s.ctr, pc: resolved };
        let rsb = self.rsb.clone();
        self.spec_overlay = Some(BTreeMap::new());

        let mut budget = self.config.spec_window;
        let (mut prev, mut pc) = (branch_pc, from);
        let reason = loop {
            if budget == 0 {
                break SquashReason::WindowExhausted;
            }
            if pc % self.bundle_size != 0 && pc != prev.wrapping_add(INSTR_BYTES) {
                self.stats.cfi_violations += 1;
            }
            let Some(instr) = self.fetch(pc).cloned() else {
                break SquashReason::BadFetch;
            };
            self.log(Event::SpecFetch { pc });
            budget -= 1;
            self.stats.speculative += 1;
            match self.exec(&instr, pc, true) {
                Ok(Flow::Next { pc: n, .. }) => {
                    prev = pc;
                    pc = n;
                }
                Ok(Flow::Fence) => break SquashReason::Fence,
                Ok(Flow::Halt) => break SquashReason::Halt,
                Err(Some(Fault::Memory(_))) => break SquashReason::Fault,
                Err(None) => break SquashReason::NoPrediction,
            }
        };

        self.spec_overlay = None;
        self.rsb = rsb;
        let s = &mut self.state;
        s.gprs = checkpoint.gprs;
        s.lr = checkpoint.lr;
        s.ctr = checkpoint.ctr;
        s.pc = checkpoint.pc;
        *self.stats.squashes.entry(reason).or_default() += 1;
        self.log(Event::Squash { reason, resume: resolved });
    }

    /// Commit one instruction, including any speculation episode its
    /// branch prediction triggers. Returns `Some` when execution ends.
    pub fn step(&mut self) -> Option<Exit> {
        let pc = self.state.pc;
        if self.state.halted {
            return Some(Exit::Halted);
        }
        let Some(instr) = self.fetch(pc).cloned() else {
            return Some(Exit::Trap { pc, reason: "fetch outside the image or undecodable word".into() });
        };
        self.log(Event::Commit { pc });
        self.stats.committed += 1;
        match self.exec(&instr, pc, false) {
            Ok(Flow::Next { pc: actual, predicted }) => {
                self.state.pc = actual;
                if let Some(p) = predicted.filter(|&p| p != actual) {
                    self.speculate(pc, p, actual);
                }
                None
            }
            Ok(Flow::Fence) => {
                self.state.pc = pc.wrapping_add(INSTR_BYTES);
                None
            }
            Ok(Flow::Halt) => {
                self.state.halted = true;
                Some(Exit::Halted)
            }
            Err(Some(Fault::Memory(addr))) => Some(Exit::Trap { pc, reason: format!("access to unmapped address {addr:#x}") }),
            Err(None) => unreachable!("committed branches always resolve"),
        }
    }

    /// Call the function at `entry` with arguments in r3.., returning when
    /// it returns to the sentinel, halts, traps, or commits `limit`
    /// instructions.
    pub fn call(&mut self, entry: u64, args: &[u64], limit: u64) -> Exit {
        for (i, &a) in args.iter().enumerate() {
            self.state.gprs[3 + i] = a;
        }
        self.state.lr = RETURN_SENTINEL;
        self.state.pc = entry;
        self.state.halted = false;
        let start = self.stats.committed;
        loop {
            if self.state.pc == RETURN_SENTINEL {
                return Exit::Returned;
            }
            if self.stats.committed - start >= limit {
                return Exit::Timeout;
            }
            if let Some(exit) = self.step() {
                return exit;
            }
        }
    }
}
