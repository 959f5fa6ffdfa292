//! The toy fixed-width ISA: registers, instructions, the 4-byte binary
//! encoding and the textual assembly syntax.
//!
//! Every instruction occupies exactly one 32-bit little-endian word. Bit
//! numbering is value-based everywhere: bit `n` carries value `2^n`.

mod asm;
mod encoding;

use std::fmt;

pub use asm::{parse_asm, parse_instruction, print_asm, AsmFunction, AsmItem, AsmProgram, ParseError, ParseErrorKind};
pub use encoding::{decode, encode, DecodeError, EncodeError, NOP_WORD};

/// Width of every encoded instruction in bytes.
pub const INSTR_BYTES: u64 = 4;

/// Number of general-purpose registers.
pub const NUM_GPRS: u8 = 32;

/// General-purpose register `r0..r31`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gpr(u8);

impl Gpr {
    /// Register reserved by the toolchain for mask materialization and
    /// SFI spill sequences. Input programs may not use it.
    pub const SCRATCH: Gpr = Gpr(31);

    pub fn new(index: u8) -> Option<Gpr> {
        (index < NUM_GPRS).then_some(Gpr(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Gpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Any architecturally named register, including the two branch-target
/// special registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Register {
    Gpr(Gpr),
    Lr,
    Ctr,
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Register::Gpr(g) => g.fmt(f),
            Register::Lr => f.write_str("lr"),
            Register::Ctr => f.write_str("ctr"),
        }
    }
}

impl From<Gpr> for Register {
    fn from(g: Gpr) -> Self {
        Register::Gpr(g)
    }
}

/// Branch target of a direct control transfer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    /// Symbolic: a function-local label or a function name.
    Label(String),
    /// Resolved: signed offset in instruction words from the branch itself.
    Rel(i32),
}

impl Target {
    pub fn label(name: impl Into<String>) -> Self {
        Target::Label(name.into())
    }

    /// Absolute address of a resolved target for a branch located at `pc`.
    pub fn resolve(&self, pc: u64) -> Option<u64> {
        match self {
            Target::Label(_) => None,
            Target::Rel(words) => Some(pc.wrapping_add((*words as i64 as u64).wrapping_mul(INSTR_BYTES))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Label(l) => f.write_str(l),
            Target::Rel(w) => {
                let bytes = *w as i64 * INSTR_BYTES as i64;
                if bytes < 0 {
                    write!(f, ".-{}", -bytes)
                } else {
                    write!(f, ".+{bytes}")
                }
            }
        }
    }
}

/// Condition tested by `BC` against a general-purpose register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Zero,
    NonZero,
}

impl Cond {
    pub fn holds(self, value: u64) -> bool {
        match self {
            Cond::Zero => value == 0,
            Cond::NonZero => value != 0,
        }
    }
}

/// Operation selector. The set is closed; each variant has a fixed 6-bit
/// opcode in the binary encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Add,
    Sub,
    Addi,
    And,
    Or,
    Xor,
    Andi,
    Ori,
    Shl,
    Shr,
    ClrLo,
    ClrHi,
    SetBit,
    LdD,
    LdX,
    StD,
    StX,
    Mtlr,
    Mtctr,
    Mflr,
    B,
    Bc,
    Bl,
    Bctrl,
    Bctr,
    Blr,
    Cmp,
    Fence,
    Nop,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 30] = [
        Opcode::Add,
        Opcode::Sub,
        Opcode::Addi,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Andi,
        Opcode::Ori,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::ClrLo,
        Opcode::ClrHi,
        Opcode::SetBit,
        Opcode::LdD,
        Opcode::LdX,
        Opcode::StD,
        Opcode::StX,
        Opcode::Mtlr,
        Opcode::Mtctr,
        Opcode::Mflr,
        Opcode::B,
        Opcode::Bc,
        Opcode::Bl,
        Opcode::Bctrl,
        Opcode::Bctr,
        Opcode::Blr,
        Opcode::Cmp,
        Opcode::Fence,
        Opcode::Nop,
        Opcode::Halt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Addi => "addi",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Andi => "andi",
            Opcode::Ori => "ori",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::ClrLo => "clrlo",
            Opcode::ClrHi => "clrhi",
            Opcode::SetBit => "setbit",
            Opcode::LdD => "ld_d",
            Opcode::LdX => "ld_x",
            Opcode::StD => "st_d",
            Opcode::StX => "st_x",
            Opcode::Mtlr => "mtlr",
            Opcode::Mtctr => "mtctr",
            Opcode::Mflr => "mflr",
            Opcode::B => "b",
            Opcode::Bc => "bc",
            Opcode::Bl => "bl",
            Opcode::Bctrl => "bctrl",
            Opcode::Bctr => "bctr",
            Opcode::Blr => "blr",
            Opcode::Cmp => "cmp",
            Opcode::Fence => "fence",
            Opcode::Nop => "nop",
            Opcode::Halt => "halt",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| op.mnemonic() == s)
    }

    /// The 6-bit value stored in bits 26..=31 of the instruction word.
    pub fn code(self) -> u32 {
        // 0 and 31..=63 are undefined so that zero-filled memory never decodes.
        Opcode::ALL.iter().position(|&op| op == self).unwrap() as u32 + 1
    }

    pub fn from_code(code: u32) -> Option<Opcode> {
        match code {
            1..=30 => Some(Opcode::ALL[code as usize - 1]),
            _ => None,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Two-operand ALU kinds sharing the register-register form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    /// Unsigned less-than producing 1 or 0.
    Cmp,
}

impl AluOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a << (b & 63),
            AluOp::Shr => a >> (b & 63),
            AluOp::Cmp => (a < b) as u64,
        }
    }

    fn opcode(self) -> Opcode {
        match self {
            AluOp::Add => Opcode::Add,
            AluOp::Sub => Opcode::Sub,
            AluOp::And => Opcode::And,
            AluOp::Or => Opcode::Or,
            AluOp::Xor => Opcode::Xor,
            AluOp::Shl => Opcode::Shl,
            AluOp::Shr => Opcode::Shr,
            AluOp::Cmp => Opcode::Cmp,
        }
    }
}

/// Register-immediate ALU kinds. The immediate is sign-extended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImmOp {
    Addi,
    Andi,
    Ori,
}

impl ImmOp {
    pub fn apply(self, a: u64, imm: i16) -> u64 {
        let imm = imm as i64 as u64;
        match self {
            ImmOp::Addi => a.wrapping_add(imm),
            ImmOp::Andi => a & imm,
            ImmOp::Ori => a | imm,
        }
    }

    fn opcode(self) -> Opcode {
        match self {
            ImmOp::Addi => Opcode::Addi,
            ImmOp::Andi => Opcode::Andi,
            ImmOp::Ori => Opcode::Ori,
        }
    }
}

/// Bit-count operations used by the masking sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitOp {
    /// Clear the low `n` bits.
    ClrLo,
    /// Clear the high `n` bits.
    ClrHi,
    /// Set bit `n`.
    SetBit,
}

impl BitOp {
    pub fn apply(self, a: u64, n: u8) -> u64 {
        let n = u32::from(n);
        match self {
            BitOp::ClrLo => a.checked_shr(n).unwrap_or(0).checked_shl(n).unwrap_or(0),
            BitOp::ClrHi => a.checked_shl(n).unwrap_or(0).checked_shr(n).unwrap_or(0),
            BitOp::SetBit => a | (1u64 << (n & 63)),
        }
    }

    fn opcode(self) -> Opcode {
        match self {
            BitOp::ClrLo => Opcode::ClrLo,
            BitOp::ClrHi => Opcode::ClrHi,
            BitOp::SetBit => Opcode::SetBit,
        }
    }
}

/// One decoded instruction.
///
/// Memory operations move 8-byte little-endian doublewords. D-Form
/// addresses are `base + sign_extend(imm)`, X-Form addresses are
/// `base + index`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instruction {
    Alu { op: AluOp, rd: Gpr, ra: Gpr, rb: Gpr },
    AluImm { op: ImmOp, rd: Gpr, ra: Gpr, imm: i16 },
    /// `n` is a 6-bit count, `0..=63`.
    Bits { op: BitOp, rd: Gpr, ra: Gpr, n: u8 },
    LdD { rd: Gpr, base: Gpr, imm: i16 },
    LdX { rd: Gpr, base: Gpr, index: Gpr },
    StD { rs: Gpr, base: Gpr, imm: i16 },
    StX { rs: Gpr, base: Gpr, index: Gpr },
    Mtlr { rs: Gpr },
    Mtctr { rs: Gpr },
    Mflr { rd: Gpr },
    B { target: Target },
    Bc { cond: Cond, rs: Gpr, target: Target },
    Bl { target: Target },
    Bctrl,
    Bctr,
    Blr,
    Fence,
    Nop,
    Halt,
}

/// Control-transfer shape of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowKind {
    Straight,
    DirectBranch,
    Conditional,
    IndirectJump,
    Call,
    Return,
    Halt,
}

impl Instruction {
    pub fn alu(op: AluOp, rd: Gpr, ra: Gpr, rb: Gpr) -> Self {
        Instruction::Alu { op, rd, ra, rb }
    }

    pub fn bits(op: BitOp, rd: Gpr, ra: Gpr, n: u8) -> Self {
        Instruction::Bits { op, rd, ra, n }
    }

    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::Alu { op, .. } => op.opcode(),
            Instruction::AluImm { op, .. } => op.opcode(),
            Instruction::Bits { op, .. } => op.opcode(),
            Instruction::LdD { .. } => Opcode::LdD,
            Instruction::LdX { .. } => Opcode::LdX,
            Instruction::StD { .. } => Opcode::StD,
            Instruction::StX { .. } => Opcode::StX,
            Instruction::Mtlr { .. } => Opcode::Mtlr,
            Instruction::Mtctr { .. } => Opcode::Mtctr,
            Instruction::Mflr { .. } => Opcode::Mflr,
            Instruction::B { .. } => Opcode::B,
            Instruction::Bc { .. } => Opcode::Bc,
            Instruction::Bl { .. } => Opcode::Bl,
            Instruction::Bctrl => Opcode::Bctrl,
            Instruction::Bctr => Opcode::Bctr,
            Instruction::Blr => Opcode::Blr,
            Instruction::Fence => Opcode::Fence,
            Instruction::Nop => Opcode::Nop,
            Instruction::Halt => Opcode::Halt,
        }
    }

    pub fn flow(&self) -> FlowKind {
        match self {
            Instruction::B { .. } => FlowKind::DirectBranch,
            Instruction::Bc { .. } => FlowKind::Conditional,
            Instruction::Bctr => FlowKind::IndirectJump,
            Instruction::Bl { .. } | Instruction::Bctrl => FlowKind::Call,
            Instruction::Blr => FlowKind::Return,
            Instruction::Halt => FlowKind::Halt,
            _ => FlowKind::Straight,
        }
    }

    pub fn is_control_transfer(&self) -> bool {
        self.flow() != FlowKind::Straight
    }

    pub fn is_call(&self) -> bool {
        self.flow() == FlowKind::Call
    }

    pub fn is_load(&self) -> bool {
        matches!(self, Instruction::LdD { .. } | Instruction::LdX { .. })
    }

    pub fn is_store(&self) -> bool {
        matches!(self, Instruction::StD { .. } | Instruction::StX { .. })
    }

    /// Direct branch target, if this is `B`, `BC` or `BL`.
    pub fn target(&self) -> Option<&Target> {
        match self {
            Instruction::B { target } | Instruction::Bc { target, .. } | Instruction::Bl { target } => Some(target),
            _ => None,
        }
    }

    pub fn target_mut(&mut self) -> Option<&mut Target> {
        match self {
            Instruction::B { target } | Instruction::Bc { target, .. } | Instruction::Bl { target } => Some(target),
            _ => None,
        }
    }

    /// Registers read by this instruction.
    pub fn reads(&self) -> Vec<Register> {
        use Instruction::*;
        let g = Register::Gpr;
        match *self {
            Alu { ra, rb, .. } => vec![g(ra), g(rb)],
            AluImm { ra, .. } | Bits { ra, .. } => vec![g(ra)],
            LdD { base, .. } => vec![g(base)],
            LdX { base, index, .. } => vec![g(base), g(index)],
            StD { rs, base, .. } => vec![g(rs), g(base)],
            StX { rs, base, index } => vec![g(rs), g(base), g(index)],
            Mtlr { rs } | Mtctr { rs } => vec![g(rs)],
            Mflr { .. } => vec![Register::Lr],
            Bc { rs, .. } => vec![g(rs)],
            Bctrl | Bctr => vec![Register::Ctr],
            Blr => vec![Register::Lr],
            B { .. } | Bl { .. } | Fence | Nop | Halt => vec![],
        }
    }

    /// Registers written by this instruction.
    pub fn writes(&self) -> Vec<Register> {
        use Instruction::*;
        let g = Register::Gpr;
        match *self {
            Alu { rd, .. } | AluImm { rd, .. } | Bits { rd, .. } | LdD { rd, .. } | LdX { rd, .. } => vec![g(rd)],
            Mflr { rd } => vec![g(rd)],
            Mtlr { .. } | Bl { .. } | Bctrl => vec![Register::Lr],
            Mtctr { .. } => vec![Register::Ctr],
            _ => vec![],
        }
    }

    pub fn writes_reg(&self, r: Register) -> bool {
        self.writes().contains(&r)
    }

    /// Every GPR mentioned as an operand.
    pub fn gprs(&self) -> Vec<Gpr> {
        let mut out: Vec<Gpr> = self
            .reads()
            .into_iter()
            .chain(self.writes())
            .filter_map(|r| match r {
                Register::Gpr(g) => Some(g),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let m = self.opcode().mnemonic();
        match self {
            Alu { rd, ra, rb, .. } => write!(f, "{m} {rd}, {ra}, {rb}"),
            AluImm { rd, ra, imm, .. } => write!(f, "{m} {rd}, {ra}, {imm}"),
            Bits { rd, ra, n, .. } => write!(f, "{m} {rd}, {ra}, {n}"),
            LdD { rd, base, imm } => write!(f, "{m} {rd}, {base}, {imm}"),
            LdX { rd, base, index } => write!(f, "{m} {rd}, {base}, {index}"),
            StD { rs, base, imm } => write!(f, "{m} {rs}, {base}, {imm}"),
            StX { rs, base, index } => write!(f, "{m} {rs}, {base}, {index}"),
            Mtlr { rs } | Mtctr { rs } => write!(f, "{m} {rs}"),
            Mflr { rd } => write!(f, "{m} {rd}"),
            B { target } | Bl { target } => write!(f, "{m} {target}"),
            Bc { cond, rs, target } => {
                let c = match cond {
                    Cond::Zero => "z",
                    Cond::NonZero => "nz",
                };
                write!(f, "{m} {c}, {rs}, {target}")
            }
            Bctrl | Bctr | Blr | Fence | Nop | Halt => f.write_str(m),
        }
    }
}
