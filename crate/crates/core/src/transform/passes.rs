//! Instruction-inserting passes over function CFGs: control-flow target
//! masking and software fault isolation for stores and loads.

use crate::cfg::{FunctionCfg, Origin, Slot};
use crate::image::{AddressMap, HardeningConfig};
use crate::isa::{AluOp, Gpr, Instruction};

use super::masks::{code_mask_sequence, load_mask_sequence, store_mask_sequence};

fn rewrite_blocks(mut f: FunctionCfg, mut rewrite: impl FnMut(&FunctionCfg, usize, usize, &Slot, &mut Vec<Slot>)) -> FunctionCfg {
    let snapshot = f.clone();
    for (b, block) in f.blocks.iter_mut().enumerate() {
        let mut out = Vec::with_capacity(block.slots.len());
        for (i, slot) in snapshot.blocks[b].slots.iter().enumerate() {
            rewrite(&snapshot, b, i, slot, &mut out);
        }
        block.slots = out;
    }
    f
}

/// Mask every value moved into LR, and every value moved into CTR that may
/// reach an indirect branch, down to a bundle base in the code segment.
///
/// Functions marked `.extern_called` keep their `mtlr` unmasked: their
/// caller is uninstrumented and may return to an unaligned address.
pub fn pass_cfi(f: FunctionCfg, config: &HardeningConfig, m: &AddressMap) -> FunctionCfg {
    let exempt_lr = f.extern_called;
    rewrite_blocks(f, |cfg, b, i, slot, out| {
        let next = cfg.blocks[b].slots.get(i + 1).map(|s| &s.instr);
        let (rs, consumer_follows) = match slot.instr {
            Instruction::Mtlr { rs } if !exempt_lr => (rs, matches!(next, Some(Instruction::Blr))),
            Instruction::Mtctr { rs } if cfg.next_ctr_use_is_branch(b, i) => {
                (rs, matches!(next, Some(Instruction::Bctr | Instruction::Bctrl)))
            }
            _ => {
                out.push(slot.clone());
                return;
            }
        };
        for instr in code_mask_sequence(rs, config, m) {
            out.push(Slot::inserted(instr, Origin::Cfi, slot.line));
        }
        out.push(Slot { joins_next: slot.joins_next || consumer_follows, ..slot.clone() });
    })
}

/// Outcome of a memory SFI pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SfiOutput {
    pub cfg: FunctionCfg,
    /// X-Form rewrites that needed the scratch register because the
    /// add/restore pattern would have clobbered a live operand.
    pub scratch_sequences: usize,
}

fn xform_sequence(
    base: Gpr,
    index: Gpr,
    mask: &[Instruction],
    access: impl Fn(Gpr) -> Instruction,
    use_scratch: bool,
) -> Vec<Instruction> {
    let ptr = if use_scratch { Gpr::SCRATCH } else { base };
    let mut seq = vec![Instruction::alu(AluOp::Add, ptr, base, index)];
    seq.extend(mask.iter().map(|i| retarget(i, ptr)));
    seq.push(access(ptr));
    if !use_scratch {
        seq.push(Instruction::alu(AluOp::Sub, base, base, index));
    }
    seq
}

fn retarget(i: &Instruction, reg: Gpr) -> Instruction {
    match *i {
        Instruction::Bits { op, n, .. } => Instruction::bits(op, reg, reg, n),
        ref other => other.clone(),
    }
}

/// Confine every store to the data region.
///
/// D-Form stores get the two-instruction mask on their base register.
/// X-Form stores become `add base, base, index; mask base; st_d rs,
/// base, 0; sub base, base, index`, or a scratch-register variant when the
/// base doubles as the stored value or the index.
pub fn pass_sfi_store(f: FunctionCfg, _config: &HardeningConfig, m: &AddressMap) -> SfiOutput {
    let mut scratch = 0;
    let cfg = rewrite_blocks(f, |_, _, _, slot, out| match slot.instr {
        Instruction::StD { base, .. } => {
            for instr in store_mask_sequence(base, m) {
                out.push(Slot::inserted(instr, Origin::SfiStore, slot.line));
            }
            out.push(slot.clone());
        }
        Instruction::StX { rs, base, index } => {
            let use_scratch = rs == base || index == base;
            scratch += use_scratch as usize;
            let seq = xform_sequence(base, index, &store_mask_sequence(base, m), |p| Instruction::StD { rs, base: p, imm: 0 }, use_scratch);
            push_sfi_group(out, seq, slot, Origin::SfiStore);
        }
        _ => out.push(slot.clone()),
    });
    SfiOutput { cfg, scratch_sequences: scratch }
}

/// Keep every load out of the kernel half by clearing the top bit of its
/// address register. X-Form loads are rewritten as for stores.
pub fn pass_sfi_load(f: FunctionCfg, _config: &HardeningConfig) -> SfiOutput {
    let mut scratch = 0;
    let cfg = rewrite_blocks(f, |_, _, _, slot, out| match slot.instr {
        Instruction::LdD { base, .. } => {
            for instr in load_mask_sequence(base) {
                out.push(Slot::inserted(instr, Origin::SfiLoad, slot.line));
            }
            out.push(slot.clone());
        }
        Instruction::LdX { rd, base, index } => {
            let use_scratch = rd == base || rd == index || index == base;
            scratch += use_scratch as usize;
            let seq = xform_sequence(base, index, &load_mask_sequence(base), |p| Instruction::LdD { rd, base: p, imm: 0 }, use_scratch);
            push_sfi_group(out, seq, slot, Origin::SfiLoad);
        }
        _ => out.push(slot.clone()),
    });
    SfiOutput { cfg, scratch_sequences: scratch }
}

/// The rewritten D-Form access replaces the original instruction and keeps
/// its `Original` accounting; everything around it is attributed to the pass.
fn push_sfi_group(out: &mut Vec<Slot>, seq: Vec<Instruction>, original: &Slot, origin: Origin) {
    let last = seq.len() - 1;
    for (k, instr) in seq.into_iter().enumerate() {
        let is_access = matches!(instr, Instruction::StD { .. } | Instruction::LdD { .. });
        out.push(Slot {
            origin: if is_access { Origin::Original } else { origin },
            joins_next: if k == last { original.joins_next } else { true },
            line: original.line,
            instr,
        });
    }
}
