//! Per-function control-flow graphs over parsed assembly.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::isa::{AsmFunction, AsmItem, AsmProgram, FlowKind, Instruction, Register, Target};

pub type BlockId = usize;

/// Where an instruction in a block came from. Used for per-pass accounting
/// and kept through the transformation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Original,
    Cfi,
    SfiStore,
    SfiLoad,
    Fence,
    Padding,
}

/// An instruction plus scheduling metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub instr: Instruction,
    pub origin: Origin,
    /// Must land in the same bundle as the following slot.
    pub joins_next: bool,
    /// Source line of the originating instruction, 0 if synthesized.
    pub line: usize,
}

impl Slot {
    pub fn original(instr: Instruction, line: usize) -> Self {
        Slot { instr, origin: Origin::Original, joins_next: false, line }
    }

    pub fn inserted(instr: Instruction, origin: Origin, line: usize) -> Self {
        Slot { instr, origin, joins_next: true, line }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TerminatorKind {
    Fallthrough,
    DirectBranch,
    Conditional,
    IndirectJump,
    Call,
    Return,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub labels: Vec<String>,
    pub slots: Vec<Slot>,
    pub succs: Vec<BlockId>,
    pub terminator: TerminatorKind,
}

impl BasicBlock {
    pub fn instrs(&self) -> impl Iterator<Item = &Instruction> {
        self.slots.iter().map(|s| &s.instr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionCfg {
    pub name: String,
    pub extern_called: bool,
    /// Blocks in layout order; `blocks[i].id == i`.
    pub blocks: Vec<BasicBlock>,
    pub entry: BlockId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfgError {
    #[error("function `{function}` has no instructions")]
    EmptyFunction { function: String },
    #[error("function `{function}` falls through its last instruction at line {line} without `halt`, `blr`, `b` or `bctr`")]
    FallsOffEnd { function: String, line: usize },
    #[error("function `{function}`: label `{label}` is not followed by any instruction")]
    TrailingLabel { function: String, label: String },
    #[error("function `{function}` line {line}: branch to `{label}`, which is neither a local label nor a function")]
    BranchOutsideFunction { function: String, label: String, line: usize },
}

fn terminator_of(i: &Instruction) -> TerminatorKind {
    match i.flow() {
        FlowKind::Straight => TerminatorKind::Fallthrough,
        FlowKind::DirectBranch => TerminatorKind::DirectBranch,
        FlowKind::Conditional => TerminatorKind::Conditional,
        FlowKind::IndirectJump => TerminatorKind::IndirectJump,
        FlowKind::Call => TerminatorKind::Call,
        FlowKind::Return => TerminatorKind::Return,
        FlowKind::Halt => TerminatorKind::Halt,
    }
}

fn build_function(f: &AsmFunction, fn_names: &HashSet<&str>) -> Result<FunctionCfg, CfgError> {
    let mut blocks: Vec<BasicBlock> = Vec::new();
    let mut pending_labels: Vec<String> = Vec::new();
    let mut open = false;

    for item in &f.items {
        match item {
            AsmItem::Label(l) => {
                open = false;
                pending_labels.push(l.clone());
            }
            AsmItem::Instr { instr, line } => {
                if !open {
                    let id = blocks.len();
                    blocks.push(BasicBlock {
                        id,
                        labels: std::mem::take(&mut pending_labels),
                        slots: Vec::new(),
                        succs: Vec::new(),
                        terminator: TerminatorKind::Fallthrough,
                    });
                    open = true;
                }
                let block = blocks.last_mut().expect("open block");
                block.slots.push(Slot::original(instr.clone(), *line));
                if instr.is_control_transfer() {
                    block.terminator = terminator_of(instr);
                    open = false;
                }
            }
        }
    }

    if let Some(label) = pending_labels.into_iter().next() {
        return Err(CfgError::TrailingLabel { function: f.name.clone(), label });
    }
    let Some(last) = blocks.last() else {
        return Err(CfgError::EmptyFunction { function: f.name.clone() });
    };
    let last_slot = last.slots.last().expect("blocks are non-empty");
    if matches!(last.terminator, TerminatorKind::Fallthrough | TerminatorKind::Conditional | TerminatorKind::Call) {
        return Err(CfgError::FallsOffEnd { function: f.name.clone(), line: last_slot.line });
    }

    let label_block: HashMap<String, BlockId> =
        blocks.iter().flat_map(|b| b.labels.iter().map(move |l| (l.clone(), b.id))).collect();
    let labeled: Vec<BlockId> =
        std::iter::once(0).chain(blocks.iter().filter(|b| b.id != 0 && !b.labels.is_empty()).map(|b| b.id)).collect();

    let n = blocks.len();
    for b in blocks.iter_mut() {
        let last = b.slots.last().expect("non-empty");
        let local_target = |t: &Target| -> Result<Option<BlockId>, CfgError> {
            match t {
                Target::Label(l) => {
                    if let Some(&id) = label_block.get(l) {
                        Ok(Some(id))
                    } else if fn_names.contains(l.as_str()) {
                        Ok(None)
                    } else {
                        Err(CfgError::BranchOutsideFunction { function: f.name.clone(), label: l.clone(), line: last.line })
                    }
                }
                Target::Rel(_) => Ok(None),
            }
        };
        let next = (b.id + 1 < n).then_some(b.id + 1);
        b.succs = match b.terminator {
            TerminatorKind::Fallthrough | TerminatorKind::Call => {
                if let Some(t) = last.instr.target() {
                    local_target(t)?;
                }
                next.into_iter().collect()
            }
            TerminatorKind::DirectBranch => local_target(last.instr.target().expect("b"))?.into_iter().collect(),
            TerminatorKind::Conditional => {
                let mut s: Vec<BlockId> = next.into_iter().collect();
                if let Some(t) = local_target(last.instr.target().expect("bc"))? {
                    if !s.contains(&t) {
                        s.push(t);
                    }
                }
                s
            }
            TerminatorKind::IndirectJump => labeled.clone(),
            TerminatorKind::Return | TerminatorKind::Halt => Vec::new(),
        };
    }

    Ok(FunctionCfg { name: f.name.clone(), extern_called: f.extern_called, blocks, entry: 0 })
}

/// Build one CFG per function. Leaders are the function entry, every
/// labeled instruction, and every instruction following a control transfer.
pub fn build_cfg(prog: &AsmProgram) -> Result<Vec<FunctionCfg>, CfgError> {
    let fn_names: HashSet<&str> = prog.functions.iter().map(|f| f.name.as_str()).collect();
    prog.functions.iter().map(|f| build_function(f, &fn_names)).collect()
}

impl FunctionCfg {
    pub fn block_of_label(&self, label: &str) -> Option<BlockId> {
        self.blocks.iter().find(|b| b.labels.iter().any(|l| l == label)).map(|b| b.id)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.slots.len()).sum()
    }

    /// All instructions in layout order.
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instrs())
    }

    /// Whether the value written to CTR by the instruction at
    /// `(block, at)` may next be consumed by an indirect branch.
    ///
    /// Scans forward along every path until CTR is read or redefined, or
    /// the function is left through `blr`/`halt`. Reaching `bctr`/`bctrl`
    /// answers true. Calls and tail branches to other functions also answer
    /// true, since the callee may branch through CTR. Only when no path can
    /// reach such a use is the answer false.
    pub fn next_ctr_use_is_branch(&self, block: BlockId, at: usize) -> bool {
        let mut visited: HashSet<BlockId> = HashSet::new();
        let mut work: Vec<(BlockId, usize)> = vec![(block, at + 1)];
        while let Some((b, start)) = work.pop() {
            let blk = &self.blocks[b];
            let mut stopped = false;
            for slot in &blk.slots[start.min(blk.slots.len())..] {
                let i = &slot.instr;
                if i.reads().contains(&Register::Ctr) || i.is_call() {
                    return true;
                }
                if let Some(Target::Label(l)) = i.target() {
                    if self.block_of_label(l).is_none() {
                        return true;
                    }
                }
                if i.writes_reg(Register::Ctr) || matches!(i, Instruction::Blr | Instruction::Halt) {
                    stopped = true;
                    break;
                }
            }
            if stopped {
                continue;
            }
            for &s in &blk.succs {
                if visited.insert(s) {
                    work.push((s, 0));
                }
            }
        }
        false
    }

    /// Graphviz rendering for debugging.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", self.name);
        let _ = writeln!(out, "  node [shape=box fontname=monospace];");
        for b in &self.blocks {
            let mut label = String::new();
            for l in &b.labels {
                let _ = write!(label, "{l}:\\l");
            }
            for i in b.instrs() {
                let _ = write!(label, "  {}\\l", i.to_string().replace('"', "\\\""));
            }
            let _ = writeln!(out, "  b{} [label=\"{}\"];", b.id, label);
            for s in &b.succs {
                let _ = writeln!(out, "  b{} -> b{};", b.id, s);
            }
        }
        out.push_str("}\n");
        out
    }
}
