//! The `.cap` trace language.
//!
//! ```text
//! # comment
//! alloc r1, 0x1000, 8
//! borrow r2, r1, mut
//! expect violation invalid-capability-store
//! sd r0, 0(r2), 8
//! halt
//! ```
//!
//! One item per line. An `expect` directive applies to the next event.
//! Serialization is canonical: single spaces after mnemonics and commas,
//! lowercase hex, no blank lines.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::BorrowKind;
use crate::machine::ViolationKind;

pub const NUM_REGS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u8);

impl Reg {
    pub const ZERO: Reg = Reg(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocKind {
    Ref,
    Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instr {
    Li {
        rd: Reg,
        imm: i64,
    },
    Mv {
        rd: Reg,
        rs: Reg,
    },
    Add {
        rd: Reg,
        rs1: Reg,
        rs2: Reg,
    },
    Addi {
        rd: Reg,
        rs: Reg,
        imm: i64,
    },
    Alloc {
        rd: Reg,
        addr: u64,
        len: u64,
        kind: Option<AllocKind>,
    },
    Borrow {
        rd: Reg,
        rs: Reg,
        kind: BorrowKind,
        bounds: Option<(u64, u64)>,
    },
    Drop {
        rs: Reg,
    },
    Ld {
        rd: Reg,
        off: i64,
        rs: Reg,
        width: u8,
    },
    Sd {
        rs2: Reg,
        off: i64,
        rs1: Reg,
        width: u8,
    },
    Halt,
}

impl Instr {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Li { .. } => "li",
            Instr::Mv { .. } => "mv",
            Instr::Add { .. } => "add",
            Instr::Addi { .. } => "addi",
            Instr::Alloc { .. } => "alloc",
            Instr::Borrow { .. } => "borrow",
            Instr::Drop { .. } => "drop",
            Instr::Ld { .. } => "ld",
            Instr::Sd { .. } => "sd",
            Instr::Halt => "halt",
        }
    }
}

/// Small magnitudes print in decimal, everything else in hex.
fn fmt_imm(v: i64) -> String {
    if v.unsigned_abs() < 4096 {
        v.to_string()
    } else if v < 0 {
        format!("-{:#x}", v.unsigned_abs())
    } else {
        format!("{v:#x}")
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instr::Li { rd, imm } => write!(f, "li {rd}, {}", fmt_imm(imm)),
            Instr::Mv { rd, rs } => write!(f, "mv {rd}, {rs}"),
            Instr::Add { rd, rs1, rs2 } => write!(f, "add {rd}, {rs1}, {rs2}"),
            Instr::Addi { rd, rs, imm } => write!(f, "addi {rd}, {rs}, {}", fmt_imm(imm)),
            Instr::Alloc { rd, addr, len, kind } => {
                write!(f, "alloc {rd}, {addr:#x}, {len}")?;
                match kind {
                    None => Ok(()),
                    Some(AllocKind::Ref) => f.write_str(", kind=ref"),
                    Some(AllocKind::Cell) => f.write_str(", kind=cell"),
                }
            }
            Instr::Borrow { rd, rs, kind, bounds } => {
                write!(f, "borrow {rd}, {rs}, {kind}")?;
                if let Some((lo, hi)) = bounds {
                    write!(f, ", {lo:#x}, {hi:#x}")?;
                }
                Ok(())
            }
            Instr::Drop { rs } => write!(f, "drop {rs}"),
            Instr::Ld { rd, off, rs, width } => write!(f, "ld {rd}, {}({rs}), {width}", fmt_imm(off)),
            Instr::Sd { rs2, off, rs1, width } => write!(f, "sd {rs2}, {}({rs1}), {width}", fmt_imm(off)),
            Instr::Halt => f.write_str("halt"),
        }
    }
}

/// Expected verdict for the event that follows an `expect` directive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expectation {
    Ok,
    Violation(ViolationKind),
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Ok => f.write_str("expect ok"),
            Expectation::Violation(kind) => write!(f, "expect violation {kind}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub instr: Instr,
    pub expect: Option<Expectation>,
    /// Full-line comments immediately preceding the event, without the `#`.
    pub comments: Vec<String>,
}

impl TraceEvent {
    pub fn new(instr: Instr) -> Self {
        TraceEvent {
            instr,
            expect: None,
            comments: Vec::new(),
        }
    }
}

impl From<Instr> for TraceEvent {
    fn from(instr: Instr) -> Self {
        TraceEvent::new(instr)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceProgram {
    pub events: Vec<TraceEvent>,
    /// 1-based source line of each event; empty for constructed programs.
    pub lines: Vec<usize>,
    pub trailing_comments: Vec<String>,
}

/// Structural equality; the line map is ignored.
impl PartialEq for TraceProgram {
    fn eq(&self, other: &Self) -> bool {
        self.events == other.events && self.trailing_comments == other.trailing_comments
    }
}

impl Eq for TraceProgram {}

impl TraceProgram {
    pub fn from_instrs(instrs: impl IntoIterator<Item = Instr>) -> Self {
        TraceProgram {
            events: instrs.into_iter().map(TraceEvent::new).collect(),
            lines: Vec::new(),
            trailing_comments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Source line of event `index`, when known.
    pub fn line_of(&self, index: usize) -> Option<usize> {
        self.lines.get(index).copied()
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instr> {
        self.events.iter().map(|e| &e.instr)
    }
}

impl fmt::Display for TraceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

impl FromStr for TraceProgram {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseErrorKind {
    SyntaxError,
    UnknownOpcode,
    OperandArity,
    OperandRange,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseErrorKind::SyntaxError => "syntax-error",
            ParseErrorKind::UnknownOpcode => "unknown-opcode",
            ParseErrorKind::OperandArity => "operand-arity",
            ParseErrorKind::OperandRange => "operand-range",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

/// An operand with its 1-based column.
struct Operand<'a> {
    text: &'a str,
    column: usize,
}

struct LineCtx {
    line: usize,
}

impl LineCtx {
    fn err(&self, column: usize, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            column,
            kind,
            message: message.into(),
        }
    }

    fn reg(&self, op: &Operand<'_>) -> Result<Reg, ParseError> {
        let digits = op
            .text
            .strip_prefix('r')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| {
                self.err(
                    op.column,
                    ParseErrorKind::SyntaxError,
                    format!("expected register, found `{}`", op.text),
                )
            })?;
        match digits.parse::<u8>() {
            Ok(n) if n < NUM_REGS && (digits == "0" || !digits.starts_with('0')) => Ok(Reg(n)),
            _ => Err(self.err(
                op.column,
                ParseErrorKind::OperandRange,
                format!("no register `{}`", op.text),
            )),
        }
    }

    /// Unsigned number, decimal or `0x` hex.
    fn unsigned(&self, text: &str, column: usize) -> Result<u64, ParseError> {
        let (digits, radix) = match text.strip_prefix("0x") {
            Some(hex) => (hex, 16),
            None => (text, 10),
        };
        let well_formed = !digits.is_empty() && digits.chars().all(|c| c.is_digit(radix));
        if !well_formed {
            return Err(self.err(
                column,
                ParseErrorKind::SyntaxError,
                format!("expected number, found `{text}`"),
            ));
        }
        u64::from_str_radix(digits, radix).map_err(|_| {
            self.err(
                column,
                ParseErrorKind::OperandRange,
                format!("number `{text}` does not fit in 64 bits"),
            )
        })
    }

    fn addr(&self, op: &Operand<'_>) -> Result<u64, ParseError> {
        self.unsigned(op.text, op.column)
    }

    /// Signed immediate; non-negative values up to `u64::MAX` wrap to i64.
    fn imm(&self, text: &str, column: usize) -> Result<i64, ParseError> {
        match text.strip_prefix('-') {
            Some(rest) => {
                let mag = self.unsigned(rest, column + 1)?;
                if mag > i64::MIN.unsigned_abs() {
                    return Err(self.err(
                        column,
                        ParseErrorKind::OperandRange,
                        format!("`{text}` is out of range"),
                    ));
                }
                Ok((mag as i64).wrapping_neg())
            }
            None => self.unsigned(text, column).map(|v| v as i64),
        }
    }

    fn width(&self, op: &Operand<'_>) -> Result<u8, ParseError> {
        match self.unsigned(op.text, op.column)? {
            w @ (1 | 2 | 4 | 8) => Ok(w as u8),
            w => Err(self.err(
                op.column,
                ParseErrorKind::OperandRange,
                format!("width {w} is not one of 1, 2, 4, 8"),
            )),
        }
    }

    /// `off(rN)`
    fn mem(&self, op: &Operand<'_>) -> Result<(i64, Reg), ParseError> {
        let bad = || {
            self.err(
                op.column,
                ParseErrorKind::SyntaxError,
                format!("expected `offset(register)`, found `{}`", op.text),
            )
        };
        let open = op.text.find('(').ok_or_else(bad)?;
        let inner = op.text[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let off_text = op.text[..open].trim_end();
        if off_text.is_empty() {
            return Err(bad());
        }
        let off = self.imm(off_text, op.column)?;
        let reg = self.reg(&Operand {
            text: inner.trim(),
            column: op.column + open + 1,
        })?;
        Ok((off, reg))
    }

    fn arity(&self, mnemonic: &str, ops: &[Operand<'_>], allowed: &[usize], column: usize) -> Result<(), ParseError> {
        if allowed.contains(&ops.len()) {
            return Ok(());
        }
        let want = allowed.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" or ");
        Err(self.err(
            column,
            ParseErrorKind::OperandArity,
            format!("`{mnemonic}` takes {want} operands, found {}", ops.len()),
        ))
    }
}

fn split_operands(rest: &str, base_column: usize) -> Vec<Operand<'_>> {
    if rest.trim().is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    for piece in rest.split(',') {
        let lead = piece.len() - piece.trim_start().len();
        out.push(Operand {
            text: piece.trim(),
            column: base_column + start + lead,
        });
        start += piece.len() + 1;
    }
    out
}

fn parse_instr(ctx: &LineCtx, mnemonic: &str, rest: &str, rest_column: usize) -> Result<Instr, ParseError> {
    let ops = split_operands(rest, rest_column);
    if let Some(empty) = ops.iter().find(|o| o.text.is_empty()) {
        return Err(ctx.err(empty.column, ParseErrorKind::SyntaxError, "empty operand"));
    }
    let col = rest_column;
    let instr = match mnemonic {
        "li" => {
            ctx.arity(mnemonic, &ops, &[2], col)?;
            Instr::Li {
                rd: ctx.reg(&ops[0])?,
                imm: ctx.imm(ops[1].text, ops[1].column)?,
            }
        }
        "mv" => {
            ctx.arity(mnemonic, &ops, &[2], col)?;
            Instr::Mv {
                rd: ctx.reg(&ops[0])?,
                rs: ctx.reg(&ops[1])?,
            }
        }
        "add" => {
            ctx.arity(mnemonic, &ops, &[3], col)?;
            Instr::Add {
                rd: ctx.reg(&ops[0])?,
                rs1: ctx.reg(&ops[1])?,
                rs2: ctx.reg(&ops[2])?,
            }
        }
        "addi" => {
            ctx.arity(mnemonic, &ops, &[3], col)?;
            Instr::Addi {
                rd: ctx.reg(&ops[0])?,
                rs: ctx.reg(&ops[1])?,
                imm: ctx.imm(ops[2].text, ops[2].column)?,
            }
        }
        "alloc" => {
            ctx.arity(mnemonic, &ops, &[3, 4], col)?;
            let rd = ctx.reg(&ops[0])?;
            let addr = ctx.addr(&ops[1])?;
            let len = ctx.addr(&ops[2])?;
            if len == 0 {
                return Err(ctx.err(
                    ops[2].column,
                    ParseErrorKind::OperandRange,
                    "allocation length must be non-zero",
                ));
            }
            if addr.checked_add(len).is_none() {
                return Err(ctx.err(
                    ops[2].column,
                    ParseErrorKind::OperandRange,
                    "allocation overflows the address space",
                ));
            }
            let kind = match ops.get(3) {
                None => None,
                Some(op) => match op.text.strip_prefix("kind=") {
                    Some("ref") => Some(AllocKind::Ref),
                    Some("cell") => Some(AllocKind::Cell),
                    Some(other) => {
                        return Err(ctx.err(
                            op.column,
                            ParseErrorKind::OperandRange,
                            format!("unknown allocation kind `{other}`"),
                        ))
                    }
                    None => {
                        return Err(ctx.err(
                            op.column,
                            ParseErrorKind::SyntaxError,
                            format!("expected `kind=...`, found `{}`", op.text),
                        ))
                    }
                },
            };
            Instr::Alloc { rd, addr, len, kind }
        }
        "borrow" => {
            ctx.arity(mnemonic, &ops, &[3, 5], col)?;
            let kind = BorrowKind::parse(ops[2].text).ok_or_else(|| {
                ctx.err(
                    ops[2].column,
                    ParseErrorKind::OperandRange,
                    format!("unknown borrow kind `{}`", ops[2].text),
                )
            })?;
            let bounds = if ops.len() == 5 {
                Some((ctx.addr(&ops[3])?, ctx.addr(&ops[4])?))
            } else {
                None
            };
            Instr::Borrow {
                rd: ctx.reg(&ops[0])?,
                rs: ctx.reg(&ops[1])?,
                kind,
                bounds,
            }
        }
        "drop" => {
            ctx.arity(mnemonic, &ops, &[1], col)?;
            Instr::Drop { rs: ctx.reg(&ops[0])? }
        }
        "ld" => {
            ctx.arity(mnemonic, &ops, &[3], col)?;
            let (off, rs) = ctx.mem(&ops[1])?;
            Instr::Ld {
                rd: ctx.reg(&ops[0])?,
                off,
                rs,
                width: ctx.width(&ops[2])?,
            }
        }
        "sd" => {
            ctx.arity(mnemonic, &ops, &[3], col)?;
            let (off, rs1) = ctx.mem(&ops[1])?;
            Instr::Sd {
                rs2: ctx.reg(&ops[0])?,
                off,
                rs1,
                width: ctx.width(&ops[2])?,
            }
        }
        "halt" => {
            ctx.arity(mnemonic, &ops, &[0], col)?;
            Instr::Halt
        }
        other => {
            return Err(ctx.err(1, ParseErrorKind::UnknownOpcode, format!("unknown opcode `{other}`")));
        }
    };
    Ok(instr)
}

fn parse_expect(ctx: &LineCtx, rest: &str, rest_column: usize) -> Result<Expectation, ParseError> {
    let mut words = rest.split_whitespace();
    match (words.next(), words.next(), words.next()) {
        (Some("ok"), None, None) => Ok(Expectation::Ok),
        (Some("violation"), Some(kind), None) => {
            kind.parse::<ViolationKind>().map(Expectation::Violation).map_err(|_| {
                ctx.err(
                    rest_column,
                    ParseErrorKind::OperandRange,
                    format!("unknown violation kind `{kind}`"),
                )
            })
        }
        _ => Err(ctx.err(
            rest_column,
            ParseErrorKind::SyntaxError,
            "expected `expect ok` or `expect violation <kind>`",
        )),
    }
}

/// Parses `.cap` text, stopping at the first error.
pub fn parse(text: &str) -> Result<TraceProgram, ParseError> {
    let mut program = TraceProgram::default();
    let mut pending_comments = Vec::new();
    let mut pending_expect: Option<(Expectation, usize)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let ctx = LineCtx { line: idx + 1 };
        let trimmed = raw.trim_start();
        let indent = raw.len() - trimmed.len();
        let body = trimmed.trim_end();
        if body.is_empty() {
            continue;
        }
        if let Some(comment) = body.strip_prefix('#') {
            pending_comments.push(comment.to_string());
            continue;
        }
        let (mnemonic, rest) = match body.find(char::is_whitespace) {
            Some(pos) => (&body[..pos], &body[pos..]),
            None => (body, ""),
        };
        let rest_column = indent + mnemonic.len() + 1;
        if mnemonic == "expect" {
            if pending_expect.is_some() {
                return Err(ctx.err(
                    indent + 1,
                    ParseErrorKind::SyntaxError,
                    "two `expect` directives in a row",
                ));
            }
            pending_expect = Some((parse_expect(&ctx, rest, rest_column)?, ctx.line));
            continue;
        }
        if !mnemonic.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(ctx.err(
                indent + 1,
                ParseErrorKind::SyntaxError,
                format!("malformed mnemonic `{mnemonic}`"),
            ));
        }
        let instr = parse_instr(&ctx, mnemonic, rest, rest_column).map_err(|mut e| {
            if e.kind == ParseErrorKind::UnknownOpcode {
                e.column = indent + 1;
            }
            e
        })?;
        program.events.push(TraceEvent {
            instr,
            expect: pending_expect.take().map(|(e, _)| e),
            comments: std::mem::take(&mut pending_comments),
        });
        program.lines.push(ctx.line);
    }
    if let Some((_, line)) = pending_expect {
        return Err(ParseError {
            line,
            column: 1,
            kind: ParseErrorKind::SyntaxError,
            message: "`expect` directive is not followed by an event".into(),
        });
    }
    program.trailing_comments = pending_comments;
    Ok(program)
}

/// Canonical text form. `parse(&serialize(p)) == p` for every program.
pub fn serialize(program: &TraceProgram) -> String {
    let mut out = String::new();
    for event in &program.events {
        for c in &event.comments {
            let _ = writeln!(out, "#{c}");
        }
        if let Some(e) = event.expect {
            let _ = writeln!(out, "{e}");
        }
        let _ = writeln!(out, "{}", event.instr);
    }
    for c in &program.trailing_comments {
        let _ = writeln!(out, "#{c}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_events() {
        let p = parse("alloc r1, 0x1000, 8\nsd r0, 0(r1), 8\nhalt").unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(
            p.events[0].instr,
            Instr::Alloc {
                rd: Reg(1),
                addr: 0x1000,
                len: 8,
                kind: None
            }
        );
        assert_eq!(
            p.events[1].instr,
            Instr::Sd {
                rs2: Reg(0),
                off: 0,
                rs1: Reg(1),
                width: 8
            }
        );
        assert_eq!(p.events[2].instr, Instr::Halt);
        assert_eq!(p.lines, vec![1, 2, 3]);
    }

    #[test]
    fn borrow_defaults_to_full_bounds() {
        let p = parse("borrow r2, r1, mut").unwrap();
        assert_eq!(
            p.events[0].instr,
            Instr::Borrow {
                rd: Reg(2),
                rs: Reg(1),
                kind: BorrowKind::Mut,
                bounds: None
            }
        );
    }

    #[test]
    fn missing_width_is_arity_error() {
        let e = parse("sd r0, 0(r9)").unwrap_err();
        assert_eq!((e.kind, e.line), (ParseErrorKind::OperandArity, 1));
    }

    #[test]
    fn error_kinds() {
        let kind = |s: &str| parse(s).unwrap_err().kind;
        assert_eq!(kind("jmp r1"), ParseErrorKind::UnknownOpcode);
        assert_eq!(kind("li r32, 1"), ParseErrorKind::OperandRange);
        assert_eq!(kind("ld r1, 0(r2), 3"), ParseErrorKind::OperandRange);
        assert_eq!(kind("alloc r1, 0x10, 0"), ParseErrorKind::OperandRange);
        assert_eq!(kind("alloc r1, 0xffffffffffffffff, 2"), ParseErrorKind::OperandRange);
        assert_eq!(kind("borrow r1, r2, weird"), ParseErrorKind::OperandRange);
        assert_eq!(kind("li r1, 0x1ffffffffffffffff"), ParseErrorKind::OperandRange);
        assert_eq!(kind("li r1, zz"), ParseErrorKind::SyntaxError);
        assert_eq!(kind("ld r1, 0 r2, 8"), ParseErrorKind::SyntaxError);
        assert_eq!(kind("mv r1,, r2"), ParseErrorKind::SyntaxError);
        assert_eq!(kind("mv r1, r2, r3"), ParseErrorKind::OperandArity);
        assert_eq!(kind("expect maybe\nhalt"), ParseErrorKind::SyntaxError);
        assert_eq!(kind("expect ok"), ParseErrorKind::SyntaxError);
        assert_eq!(kind("expect violation nope\nhalt"), ParseErrorKind::OperandRange);
        assert_eq!(kind("halt r1"), ParseErrorKind::OperandArity);
    }

    #[test]
    fn error_location() {
        let e = parse("halt\n  li r1, 0xzz").unwrap_err();
        assert_eq!((e.line, e.column), (2, 10));
        let e = parse("li r1, 1\nfoo r1").unwrap_err();
        assert_eq!((e.line, e.column, e.kind), (2, 1, ParseErrorKind::UnknownOpcode));
    }

    #[test]
    fn numbers_and_negative_offsets() {
        let p = parse("ld r1, -8(r2), 4\naddi r3, r3, -0x1000\nli r4, 0xffffffffffffffff").unwrap();
        assert_eq!(
            p.events[0].instr,
            Instr::Ld {
                rd: Reg(1),
                off: -8,
                rs: Reg(2),
                width: 4
            }
        );
        assert_eq!(
            p.events[1].instr,
            Instr::Addi {
                rd: Reg(3),
                rs: Reg(3),
                imm: -4096
            }
        );
        assert_eq!(p.events[2].instr, Instr::Li { rd: Reg(4), imm: -1 });
    }

    #[test]
    fn expectations_attach_to_next_event() {
        let text = "# setup\nalloc r1, 0x1000, 8\nexpect violation drop-invalid\ndrop r1\nexpect ok\nhalt\n# end\n";
        let p = parse(text).unwrap();
        assert_eq!(p.events[0].comments, vec![" setup".to_string()]);
        assert_eq!(p.events[0].expect, None);
        assert_eq!(
            p.events[1].expect,
            Some(Expectation::Violation(ViolationKind::DropInvalid))
        );
        assert_eq!(p.events[2].expect, Some(Expectation::Ok));
        assert_eq!(serialize(&p), text);
    }

    #[test]
    fn canonicalizes_spacing_and_hex() {
        let p = parse("  alloc   r1,0X10 , 8").unwrap_err();
        assert_eq!(p.kind, ParseErrorKind::SyntaxError);
        let p = parse("alloc  r1 ,  4096,8,kind=cell\nborrow r2,r1,imm,0x1000,4100\nli r3, 4096").unwrap();
        assert_eq!(
            serialize(&p),
            "alloc r1, 0x1000, 8, kind=cell\nborrow r2, r1, imm, 0x1000, 0x1004\nli r3, 0x1000\n"
        );
    }
}
