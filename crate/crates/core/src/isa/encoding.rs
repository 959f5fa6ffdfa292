//! Binary instruction words.
//!
//! ```text
//!  31      26 25   21 20   16 15   11 10            0
//! +----------+-------+-------+-------+---------------+
//! |  opcode  |   A   |   B   |   C   |   reserved    |  R-form: ALU, CMP, LD_X, ST_X
//! |  opcode  |   A   |   B   |        imm16          |  D-form: ADDI ANDI ORI LD_D ST_D
//! |  opcode  |   A   |   B   |  reserved  |  nbits6  |  N-form: CLRLO CLRHI SETBIT
//! |  opcode  |   A   |            reserved           |  MTLR MTCTR MFLR
//! |  opcode  |   A   |c|        offset20             |  BC (c = 1: branch if nonzero)
//! |  opcode  |             offset26                  |  B BL
//! |  opcode  |             reserved                  |  BCTR BCTRL BLR FENCE NOP HALT
//! +----------+-------+-------+-------+---------------+
//! ```
//!
//! Branch offsets count instruction words relative to the branch. Words are
//! stored little-endian. Reserved bits must be zero; decode rejects anything
//! else so that `encode` is injective and `decode` is its exact inverse.

use thiserror::Error;

use super::{AluOp, BitOp, Cond, Gpr, ImmOp, Instruction, Opcode, Target};

/// The designated no-op word.
pub const NOP_WORD: u32 = 29 << 26;

const OFFSET26_MIN: i32 = -(1 << 25);
const OFFSET26_MAX: i32 = (1 << 25) - 1;
const OFFSET20_MIN: i32 = -(1 << 19);
const OFFSET20_MAX: i32 = (1 << 19) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("cannot encode `{0}`: branch target is still symbolic")]
    UnresolvedTarget(String),
    #[error("branch offset {offset} words does not fit the {bits}-bit field")]
    OffsetOutOfRange { offset: i32, bits: u32 },
    #[error("bit count {0} exceeds 63")]
    BitCountOutOfRange(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("undefined opcode field {opcode:#04x} in word {word:#010x}")]
    UndefinedOpcode { opcode: u32, word: u32 },
    #[error("reserved bits {mask:#010x} set in {opcode} word {word:#010x}")]
    ReservedBits { opcode: Opcode, mask: u32, word: u32 },
}

fn field(g: Gpr, shift: u32) -> u32 {
    u32::from(g.index()) << shift
}

fn r_form(op: Opcode, a: Gpr, b: Gpr, c: Gpr) -> u32 {
    op.code() << 26 | field(a, 21) | field(b, 16) | field(c, 11)
}

fn d_form(op: Opcode, a: Gpr, b: Gpr, imm: i16) -> u32 {
    op.code() << 26 | field(a, 21) | field(b, 16) | u32::from(imm as u16)
}

fn offset(target: &Target, instr: &Instruction, min: i32, max: i32, bits: u32) -> Result<u32, EncodeError> {
    match target {
        Target::Label(_) => Err(EncodeError::UnresolvedTarget(instr.to_string())),
        Target::Rel(w) if (min..=max).contains(w) => Ok((*w as u32) & ((1 << bits) - 1)),
        Target::Rel(w) => Err(EncodeError::OffsetOutOfRange { offset: *w, bits }),
    }
}

/// Encode one instruction into its 32-bit word.
pub fn encode(instr: &Instruction) -> Result<u32, EncodeError> {
    use Instruction::*;
    let op = instr.opcode();
    let word = match instr {
        Alu { rd, ra, rb, .. } => r_form(op, *rd, *ra, *rb),
        AluImm { rd, ra, imm, .. } => d_form(op, *rd, *ra, *imm),
        Bits { rd, ra, n, .. } => {
            if *n > 63 {
                return Err(EncodeError::BitCountOutOfRange(*n));
            }
            op.code() << 26 | field(*rd, 21) | field(*ra, 16) | u32::from(*n)
        }
        LdD { rd, base, imm } => d_form(op, *rd, *base, *imm),
        StD { rs, base, imm } => d_form(op, *rs, *base, *imm),
        LdX { rd, base, index } => r_form(op, *rd, *base, *index),
        StX { rs, base, index } => r_form(op, *rs, *base, *index),
        Mtlr { rs } | Mtctr { rs } => op.code() << 26 | field(*rs, 21),
        Mflr { rd } => op.code() << 26 | field(*rd, 21),
        B { target } | Bl { target } => {
            op.code() << 26 | offset(target, instr, OFFSET26_MIN, OFFSET26_MAX, 26)?
        }
        Bc { cond, rs, target } => {
            let c = match cond {
                Cond::Zero => 0,
                Cond::NonZero => 1 << 20,
            };
            op.code() << 26 | field(*rs, 21) | c | offset(target, instr, OFFSET20_MIN, OFFSET20_MAX, 20)?
        }
        Bctrl | Bctr | Blr | Fence | Nop | Halt => op.code() << 26,
    };
    Ok(word)
}

fn gpr_at(word: u32, shift: u32) -> Gpr {
    Gpr::new(((word >> shift) & 0x1f) as u8).expect("5-bit field")
}

fn sign_extend(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

/// Decode one word. Total over all `u32` inputs.
pub fn decode(word: u32) -> Result<Instruction, DecodeError> {
    let code = word >> 26;
    let op = Opcode::from_code(code).ok_or(DecodeError::UndefinedOpcode { opcode: code, word })?;
    let a = || gpr_at(word, 21);
    let b = || gpr_at(word, 16);
    let c = || gpr_at(word, 11);
    let imm = || word as u16 as i16;
    let reserved = match op {
        Opcode::Add
        | Opcode::Sub
        | Opcode::And
        | Opcode::Or
        | Opcode::Xor
        | Opcode::Shl
        | Opcode::Shr
        | Opcode::Cmp
        | Opcode::LdX
        | Opcode::StX => 0x7ff,
        Opcode::ClrLo | Opcode::ClrHi | Opcode::SetBit => 0xffc0,
        Opcode::Mtlr | Opcode::Mtctr | Opcode::Mflr => 0x1f_ffff,
        Opcode::Bctrl | Opcode::Bctr | Opcode::Blr | Opcode::Fence | Opcode::Nop | Opcode::Halt => 0x3ff_ffff,
        _ => 0,
    };
    if word & reserved != 0 {
        return Err(DecodeError::ReservedBits { opcode: op, mask: word & reserved, word });
    }
    let alu = |k| Instruction::alu(k, a(), b(), c());
    let alu_imm = |k| Instruction::AluImm { op: k, rd: a(), ra: b(), imm: imm() };
    let bits = |k| Instruction::bits(k, a(), b(), (word & 0x3f) as u8);
    Ok(match op {
        Opcode::Add => alu(AluOp::Add),
        Opcode::Sub => alu(AluOp::Sub),
        Opcode::And => alu(AluOp::And),
        Opcode::Or => alu(AluOp::Or),
        Opcode::Xor => alu(AluOp::Xor),
        Opcode::Shl => alu(AluOp::Shl),
        Opcode::Shr => alu(AluOp::Shr),
        Opcode::Cmp => alu(AluOp::Cmp),
        Opcode::Addi => alu_imm(ImmOp::Addi),
        Opcode::Andi => alu_imm(ImmOp::Andi),
        Opcode::Ori => alu_imm(ImmOp::Ori),
        Opcode::ClrLo => bits(BitOp::ClrLo),
        Opcode::ClrHi => bits(BitOp::ClrHi),
        Opcode::SetBit => bits(BitOp::SetBit),
        Opcode::LdD => Instruction::LdD { rd: a(), base: b(), imm: imm() },
        Opcode::StD => Instruction::StD { rs: a(), base: b(), imm: imm() },
        Opcode::LdX => Instruction::LdX { rd: a(), base: b(), index: c() },
        Opcode::StX => Instruction::StX { rs: a(), base: b(), index: c() },
        Opcode::Mtlr => Instruction::Mtlr { rs: a() },
        Opcode::Mtctr => Instruction::Mtctr { rs: a() },
        Opcode::Mflr => Instruction::Mflr { rd: a() },
        Opcode::B => Instruction::B { target: Target::Rel(sign_extend(word & 0x3ff_ffff, 26)) },
        Opcode::Bl => Instruction::Bl { target: Target::Rel(sign_extend(word & 0x3ff_ffff, 26)) },
        Opcode::Bc => Instruction::Bc {
            cond: if word & (1 << 20) != 0 { Cond::NonZero } else { Cond::Zero },
            rs: a(),
            target: Target::Rel(sign_extend(word & 0xf_ffff, 20)),
        },
        Opcode::Bctrl => Instruction::Bctrl,
        Opcode::Bctr => Instruction::Bctr,
        Opcode::Blr => Instruction::Blr,
        Opcode::Fence => Instruction::Fence,
        Opcode::Nop => Instruction::Nop,
        Opcode::Halt => Instruction::Halt,
    })
}
