//! Assembly text.
//!
//! One instruction per line, `opcode operands` separated by commas.
//! Registers are `r0..r31`, `lr`, `ctr`. Labels are `name:`, functions are
//! bracketed by `.func name` / `.endfunc`, and `#` starts a comment. A
//! function may carry `.extern_called` to mark it as entered from
//! uninstrumented code. Direct branch targets are labels, function names,
//! or pc-relative byte offsets written `.+N` / `.-N`.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::{AluOp, BitOp, Cond, Gpr, ImmOp, Instruction, Opcode, Target, INSTR_BYTES};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsmItem {
    Label(String),
    Instr { instr: Instruction, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmFunction {
    pub name: String,
    pub extern_called: bool,
    pub items: Vec<AsmItem>,
    pub line: usize,
}

impl AsmFunction {
    pub fn new(name: impl Into<String>) -> Self {
        AsmFunction { name: name.into(), extern_called: false, items: Vec::new(), line: 0 }
    }

    pub fn label(mut self, name: &str) -> Self {
        self.items.push(AsmItem::Label(name.to_string()));
        self
    }

    pub fn instr(mut self, instr: Instruction) -> Self {
        self.items.push(AsmItem::Instr { instr, line: 0 });
        self
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.items.iter().filter_map(|it| match it {
            AsmItem::Instr { instr, .. } => Some(instr),
            AsmItem::Label(_) => None,
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.items.iter().filter_map(|it| match it {
            AsmItem::Label(l) => Some(l.as_str()),
            AsmItem::Instr { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmProgram {
    pub functions: Vec<AsmFunction>,
    /// Entry function: `main` when present, otherwise the first function.
    pub entry: String,
}

impl AsmProgram {
    pub fn new(functions: Vec<AsmFunction>) -> Self {
        let entry = default_entry(&functions);
        AsmProgram { functions, entry }
    }

    pub fn function(&self, name: &str) -> Option<&AsmFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.instructions().count()).sum()
    }
}

fn default_entry(functions: &[AsmFunction]) -> String {
    if functions.iter().any(|f| f.name == "main") {
        "main".to_string()
    } else {
        functions.first().map(|f| f.name.clone()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("immediate {0} out of 16-bit signed range")]
    ImmediateOutOfRange(i64),
    #[error("bit count {0} out of range 0..=63")]
    BitCountOutOfRange(i64),
    #[error("branch offset {0} is not a multiple of 4")]
    MisalignedOffset(i64),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

struct LineCtx<'a> {
    text: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err_at(&self, token: &str, kind: ParseErrorKind) -> ParseError {
        // Tokens are always subslices of the line.
        let col = if token.is_empty() {
            self.text.len() + 1
        } else {
            token.as_ptr() as usize - self.text.as_ptr() as usize + 1
        };
        ParseError { line: self.line, col, kind }
    }

    fn syntax(&self, token: &str, msg: impl Into<String>) -> ParseError {
        self.err_at(token, ParseErrorKind::Syntax(msg.into()))
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i64::from_str_radix(hex, 16).ok()?,
        None if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) => body.parse().ok()?,
        None => return None,
    };
    Some(if neg { -v } else { v })
}

fn gpr(ctx: &LineCtx, tok: &str) -> Result<Gpr, ParseError> {
    tok.strip_prefix('r')
        .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) && (d.len() == 1 || !d.starts_with('0')))
        .and_then(|d| d.parse::<u8>().ok())
        .and_then(Gpr::new)
        .ok_or_else(|| ctx.syntax(tok, format!("expected general-purpose register r0..r31, found `{tok}`")))
}

fn imm16(ctx: &LineCtx, tok: &str) -> Result<i16, ParseError> {
    let v = parse_int(tok).ok_or_else(|| ctx.syntax(tok, format!("expected integer immediate, found `{tok}`")))?;
    i16::try_from(v).map_err(|_| ctx.err_at(tok, ParseErrorKind::ImmediateOutOfRange(v)))
}

fn bit_count(ctx: &LineCtx, tok: &str) -> Result<u8, ParseError> {
    let v = parse_int(tok).ok_or_else(|| ctx.syntax(tok, format!("expected bit count, found `{tok}`")))?;
    if (0..=63).contains(&v) {
        Ok(v as u8)
    } else {
        Err(ctx.err_at(tok, ParseErrorKind::BitCountOutOfRange(v)))
    }
}

fn target(ctx: &LineCtx, tok: &str) -> Result<Target, ParseError> {
    if let Some(rest) = tok.strip_prefix('.') {
        let bytes = parse_int(rest)
            .filter(|_| rest.starts_with('+') || rest.starts_with('-'))
            .ok_or_else(|| ctx.syntax(tok, format!("expected `.+N` or `.-N`, found `{tok}`")))?;
        if bytes % INSTR_BYTES as i64 != 0 {
            return Err(ctx.err_at(tok, ParseErrorKind::MisalignedOffset(bytes)));
        }
        let words = i32::try_from(bytes / INSTR_BYTES as i64)
            .map_err(|_| ctx.syntax(tok, "branch offset out of range"))?;
        return Ok(Target::Rel(words));
    }
    if is_ident(tok) {
        Ok(Target::Label(tok.to_string()))
    } else {
        Err(ctx.syntax(tok, format!("expected branch target, found `{tok}`")))
    }
}

fn instruction(ctx: &LineCtx, mnemonic: &str, operands: &[&str]) -> Result<Instruction, ParseError> {
    let op = Opcode::from_mnemonic(mnemonic)
        .ok_or_else(|| ctx.err_at(mnemonic, ParseErrorKind::UnknownOpcode(mnemonic.to_string())))?;
    let want = match op {
        Opcode::Add
        | Opcode::Sub
        | Opcode::And
        | Opcode::Or
        | Opcode::Xor
        | Opcode::Shl
        | Opcode::Shr
        | Opcode::Cmp
        | Opcode::Addi
        | Opcode::Andi
        | Opcode::Ori
        | Opcode::ClrLo
        | Opcode::ClrHi
        | Opcode::SetBit
        | Opcode::LdD
        | Opcode::LdX
        | Opcode::StD
        | Opcode::StX
        | Opcode::Bc => 3,
        Opcode::Mtlr | Opcode::Mtctr | Opcode::Mflr | Opcode::B | Opcode::Bl => 1,
        Opcode::Bctrl | Opcode::Bctr | Opcode::Blr | Opcode::Fence | Opcode::Nop | Opcode::Halt => 0,
    };
    if operands.len() != want {
        let at = operands.get(want).copied().unwrap_or(mnemonic);
        return Err(ctx.syntax(at, format!("`{mnemonic}` takes {want} operand(s), found {}", operands.len())));
    }
    let o = operands;
    let alu = |k| Ok(Instruction::alu(k, gpr(ctx, o[0])?, gpr(ctx, o[1])?, gpr(ctx, o[2])?));
    let alu_imm = |k| Ok(Instruction::AluImm { op: k, rd: gpr(ctx, o[0])?, ra: gpr(ctx, o[1])?, imm: imm16(ctx, o[2])? });
    let bits = |k| Ok(Instruction::bits(k, gpr(ctx, o[0])?, gpr(ctx, o[1])?, bit_count(ctx, o[2])?));
    match op {
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
        Opcode::LdD => Ok(Instruction::LdD { rd: gpr(ctx, o[0])?, base: gpr(ctx, o[1])?, imm: imm16(ctx, o[2])? }),
        Opcode::LdX => Ok(Instruction::LdX { rd: gpr(ctx, o[0])?, base: gpr(ctx, o[1])?, index: gpr(ctx, o[2])? }),
        Opcode::StD => Ok(Instruction::StD { rs: gpr(ctx, o[0])?, base: gpr(ctx, o[1])?, imm: imm16(ctx, o[2])? }),
        Opcode::StX => Ok(Instruction::StX { rs: gpr(ctx, o[0])?, base: gpr(ctx, o[1])?, index: gpr(ctx, o[2])? }),
        Opcode::Mtlr => Ok(Instruction::Mtlr { rs: gpr(ctx, o[0])? }),
        Opcode::Mtctr => Ok(Instruction::Mtctr { rs: gpr(ctx, o[0])? }),
        Opcode::Mflr => Ok(Instruction::Mflr { rd: gpr(ctx, o[0])? }),
        Opcode::B => Ok(Instruction::B { target: target(ctx, o[0])? }),
        Opcode::Bl => Ok(Instruction::Bl { target: target(ctx, o[0])? }),
        Opcode::Bc => {
            let cond = match o[0] {
                "z" => Cond::Zero,
                "nz" => Cond::NonZero,
                other => return Err(ctx.syntax(other, format!("expected condition `z` or `nz`, found `{other}`"))),
            };
            Ok(Instruction::Bc { cond, rs: gpr(ctx, o[1])?, target: target(ctx, o[2])? })
        }
        Opcode::Bctrl => Ok(Instruction::Bctrl),
        Opcode::Bctr => Ok(Instruction::Bctr),
        Opcode::Blr => Ok(Instruction::Blr),
        Opcode::Fence => Ok(Instruction::Fence),
        Opcode::Nop => Ok(Instruction::Nop),
        Opcode::Halt => Ok(Instruction::Halt),
    }
}

/// Parse a single instruction line (no labels or directives).
pub fn parse_instruction(text: &str) -> Result<Instruction, ParseError> {
    let ctx = LineCtx { text, line: 1 };
    let body = text.split('#').next().unwrap_or("").trim();
    let (mnemonic, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
    let operands = split_operands(&ctx, rest)?;
    instruction(&ctx, mnemonic, &operands)
}

fn split_operands<'a>(ctx: &LineCtx, rest: &'a str) -> Result<Vec<&'a str>, ParseError> {
    let rest = rest.trim();
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    rest.split(',')
        .map(|t| {
            let t = t.trim();
            if t.is_empty() {
                Err(ctx.syntax(rest, "empty operand"))
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Parse a whole assembly source file.
pub fn parse_asm(text: &str) -> Result<AsmProgram, ParseError> {
    let mut functions: Vec<AsmFunction> = Vec::new();
    let mut current: Option<AsmFunction> = None;
    let mut label_sites: Vec<HashSet<String>> = Vec::new();
    let mut uses: Vec<(usize, usize, usize, String)> = Vec::new(); // (fn, line, col, label)

    for (idx, raw) in text.lines().enumerate() {
        let ctx = LineCtx { text: raw, line: idx + 1 };
        let code = raw.split('#').next().unwrap_or("");
        let mut body = code.trim();
        if body.is_empty() {
            continue;
        }

        if let Some(directive) = body.strip_prefix('.') {
            let (name, arg) = directive.split_once(char::is_whitespace).unwrap_or((directive, ""));
            let arg = arg.trim();
            match name {
                "func" => {
                    if current.is_some() {
                        return Err(ctx.syntax(body, "nested `.func`; missing `.endfunc`"));
                    }
                    if !is_ident(arg) {
                        return Err(ctx.syntax(if arg.is_empty() { body } else { arg }, "expected function name"));
                    }
                    if functions.iter().any(|f| f.name == arg) {
                        return Err(ctx.err_at(arg, ParseErrorKind::DuplicateFunction(arg.to_string())));
                    }
                    let mut f = AsmFunction::new(arg);
                    f.line = ctx.line;
                    current = Some(f);
                    label_sites.push(HashSet::new());
                }
                "endfunc" if arg.is_empty() => match current.take() {
                    Some(f) => functions.push(f),
                    None => return Err(ctx.syntax(body, "`.endfunc` without `.func`")),
                },
                "extern_called" if arg.is_empty() => match current.as_mut() {
                    Some(f) => f.extern_called = true,
                    None => return Err(ctx.syntax(body, "`.extern_called` outside a function")),
                },
                _ => return Err(ctx.syntax(body, format!("unknown directive `.{name}`"))),
            }
            continue;
        }

        let Some(func) = current.as_mut() else {
            return Err(ctx.syntax(body, "code outside `.func` ... `.endfunc`"));
        };
        let fn_idx = functions.len();
        let labels = label_sites.last_mut().expect("label set per open function");

        if let Some((label, rest)) = body.split_once(':') {
            let label = label.trim();
            if !is_ident(label) {
                return Err(ctx.syntax(label, format!("invalid label `{label}`")));
            }
            if !labels.insert(label.to_string()) {
                return Err(ctx.err_at(label, ParseErrorKind::DuplicateLabel(label.to_string())));
            }
            func.items.push(AsmItem::Label(label.to_string()));
            body = rest.trim();
            if body.is_empty() {
                continue;
            }
        }

        let (mnemonic, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        let operands = split_operands(&ctx, rest)?;
        let instr = instruction(&ctx, mnemonic, &operands)?;
        if let Some(Target::Label(l)) = instr.target() {
            let col = operands.last().map(|t| t.as_ptr() as usize - raw.as_ptr() as usize + 1).unwrap_or(1);
            uses.push((fn_idx, ctx.line, col, l.clone()));
        }
        func.items.push(AsmItem::Instr { instr, line: ctx.line });
    }

    if let Some(f) = current {
        return Err(ParseError {
            line: f.line,
            col: 1,
            kind: ParseErrorKind::Syntax(format!("function `{}` missing `.endfunc`", f.name)),
        });
    }

    let fn_names: HashSet<&str> = functions.iter().map(|f| f.name.as_str()).collect();
    for (fn_idx, line, col, label) in uses {
        if !label_sites[fn_idx].contains(&label) && !fn_names.contains(label.as_str()) {
            return Err(ParseError { line, col, kind: ParseErrorKind::UnresolvedLabel(label) });
        }
    }

    Ok(AsmProgram::new(functions))
}

/// Render a program in the syntax accepted by [`parse_asm`].
pub fn print_asm(prog: &AsmProgram) -> String {
    let mut out = String::new();
    for (i, f) in prog.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, ".func {}", f.name);
        if f.extern_called {
            out.push_str(".extern_called\n");
        }
        for item in &f.items {
            match item {
                AsmItem::Label(l) => {
                    let _ = writeln!(out, "{l}:");
                }
                AsmItem::Instr { instr, .. } => {
                    let _ = writeln!(out, "    {instr}");
                }
            }
        }
        out.push_str(".endfunc\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::encoding::tests::arb_instruction;
    use proptest::prelude::*;

    fn r(i: u8) -> Gpr {
        Gpr::new(i).unwrap()
    }

    #[test]
    fn ld_d_operands() {
        let i = parse_instruction("ld_d r3, r1, 8").unwrap();
        assert_eq!(i, Instruction::LdD { rd: r(3), base: r(1), imm: 8 });
    }

    #[test]
    fn nop_has_no_operands() {
        assert_eq!(parse_instruction("nop").unwrap(), Instruction::Nop);
        assert!(parse_instruction("nop r1").is_err());
    }

    #[test]
    fn immediate_range() {
        let e = parse_instruction("addi r1, r1, 70000").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::ImmediateOutOfRange(70000));
        assert_eq!(e.col, 14);
        assert!(parse_instruction("addi r1, r1, -32768").is_ok());
        assert!(parse_instruction("addi r1, r1, 0x7fff").is_ok());
        assert!(parse_instruction("addi r1, r1, 32768").is_err());
    }

    #[test]
    fn special_registers_rejected_as_gpr() {
        let e = parse_instruction("mtlr ctr").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));
        assert!(parse_instruction("add r1, r2, r32").is_err());
        assert!(parse_instruction("add r1, r2, r01").is_err());
    }

    #[test]
    fn unknown_opcode_reports_column() {
        let src = ".func f\n    frob r1\n    halt\n.endfunc\n";
        let e = parse_asm(src).unwrap_err();
        assert_eq!((e.line, e.col), (2, 5));
        assert_eq!(e.kind, ParseErrorKind::UnknownOpcode("frob".into()));
    }

    #[test]
    fn unresolved_label() {
        let src = ".func f\n  b nowhere\n.endfunc\n";
        let e = parse_asm(src).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnresolvedLabel("nowhere".into()));
        assert_eq!((e.line, e.col), (2, 5));
    }

    #[test]
    fn labels_directives_comments() {
        let src = "# header\n.func main\n.extern_called\nstart: addi r3, r3, 1 # bump\n  bc nz, r3, start\n  bl helper\n  halt\n.endfunc\n.func helper\n  blr\n.endfunc\n";
        let p = parse_asm(src).unwrap();
        assert_eq!(p.entry, "main");
        assert!(p.functions[0].extern_called);
        assert_eq!(p.functions[0].labels().collect::<Vec<_>>(), vec!["start"]);
        assert_eq!(p.instruction_count(), 5);
        let again = parse_asm(&print_asm(&p)).unwrap();
        let strip = |p: &AsmProgram| {
            p.functions.iter().map(|f| (f.name.clone(), f.labels().map(String::from).collect::<Vec<_>>(), f.instructions().cloned().collect::<Vec<_>>())).collect::<Vec<_>>()
        };
        assert_eq!(strip(&p), strip(&again));
    }

    #[test]
    fn duplicate_label_and_function() {
        assert!(matches!(
            parse_asm(".func f\na:\na:\nhalt\n.endfunc").unwrap_err().kind,
            ParseErrorKind::DuplicateLabel(_)
        ));
        assert!(matches!(
            parse_asm(".func f\nhalt\n.endfunc\n.func f\nhalt\n.endfunc").unwrap_err().kind,
            ParseErrorKind::DuplicateFunction(_)
        ));
    }

    #[test]
    fn rel_targets() {
        assert_eq!(parse_instruction("b .-8").unwrap(), Instruction::B { target: Target::Rel(-2) });
        assert!(matches!(parse_instruction("b .+6").unwrap_err().kind, ParseErrorKind::MisalignedOffset(6)));
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(i in arb_instruction()) {
            prop_assert_eq!(parse_instruction(&i.to_string()).unwrap(), i);
        }

        #[test]
        fn parser_never_panics(s in "\\PC{0,40}") {
            let _ = parse_asm(&s);
            let _ = parse_instruction(&s);
        }
    }
}
