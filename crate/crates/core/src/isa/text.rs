//! Text form of programs.
//!
//! ```text
//! program  := line*
//! line     := comment | input | instr | output
//! comment  := '#' any*
//! input    := 'input' NAME BANDS
//! instr    := '%' ID ' = ' MNEMONIC '(' args? (';' attrs)? ')'
//! args     := '%' ID (', ' '%' ID)*
//! output   := 'output' '%' ID
//! ```
//!
//! Attributes per mnemonic: `CONST(; c)`, `INPUT(; name)`,
//! `CONV2D(%a; k w0 .. w{k*k-1})`, `BINARY(%a, %b; kind)`, `UNARY(%a; kind)`,
//! `SCALAR_BINARY(%a; kind s)`, `SELECT(%a; i0 i1 ..)`. `CAT`, `REDUCE_MAX` and
//! `UPSAMPLE_NEAREST` take no attributes. Floats use the canonical
//! scientific rendering of [`crate::decimal::format_f32`]; blank lines are ignored.

use std::fmt;

use crate::decimal::{format_f32, parse_f32};
use crate::isa::{BinaryKind, InputDecl, Instr, IsaError, Op, OpKind, Program, UnaryKind, ValueId};
use crate::tensor::Kernel2D;

fn attrs(op: &Op) -> Option<String> {
    match op {
        Op::Const(c) => Some(format_f32(*c)),
        Op::Input(n) => Some(n.clone()),
        Op::Conv2d(k) => {
            let mut s = k.size().to_string();
            for w in k.weights() {
                s.push(' ');
                s.push_str(&format_f32(*w));
            }
            Some(s)
        }
        Op::Binary(b) => Some(b.name().to_string()),
        Op::Unary(u) => Some(u.name().to_string()),
        Op::ScalarBinary(b, v) => Some(format!("{} {}", b.name(), format_f32(*v))),
        Op::Select(idx) => Some(idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")),
        Op::Cat | Op::ReduceMax | Op::UpsampleNearest => None,
    }
}

/// Writes `prog`, emitting each `(index, text)` comment right before instruction `index`.
pub(crate) fn write_program(
    prog: &Program,
    comments: &[(usize, String)],
    f: &mut dyn fmt::Write,
) -> fmt::Result {
    for d in &prog.inputs {
        writeln!(f, "input {} {}", d.name, d.bands)?;
    }
    let mut notes = comments.iter().peekable();
    for (i, ins) in prog.instrs.iter().enumerate() {
        while let Some((_, text)) = notes.next_if(|(at, _)| *at == i) {
            writeln!(f, "# {text}")?;
        }
        let args = ins.args.iter().map(|a| format!("%{a}")).collect::<Vec<_>>().join(", ");
        write!(f, "%{} = {}({args}", ins.dest, ins.op.kind().mnemonic())?;
        if let Some(a) = attrs(&ins.op) {
            write!(f, "; {a}")?;
        }
        writeln!(f, ")")?;
    }
    writeln!(f, "output %{}", prog.output)
}

fn value_id(s: &str) -> Option<ValueId> {
    s.trim().strip_prefix('%')?.parse().ok()
}

fn binary_kind(s: &str) -> Option<BinaryKind> {
    BinaryKind::ALL.into_iter().find(|k| k.name() == s)
}

fn unary_kind(s: &str) -> Option<UnaryKind> {
    UnaryKind::ALL.into_iter().find(|k| k.name() == s)
}

/// Parses the text form produced by [`Program::to_text`].
pub fn parse_program(text: &str) -> Result<Program, IsaError> {
    let mut prog = Program::default();
    let mut output = None;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let fail = |message: String| IsaError::Parse { line, message };
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(rest) = l.strip_prefix("input ") {
            let mut parts = rest.split_whitespace();
            let (name, bands) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(b), None) => (n, b),
                _ => return Err(fail("expected `input NAME BANDS`".into())),
            };
            let bands = bands.parse().map_err(|_| fail(format!("bad band count {bands}")))?;
            prog.inputs.push(InputDecl {
                name: name.to_string(),
                bands,
            });
            continue;
        }
        if let Some(rest) = l.strip_prefix("output ") {
            output = Some(value_id(rest).ok_or_else(|| fail(format!("bad output {rest}")))?);
            continue;
        }
        let (dest, rhs) = l
            .split_once(" = ")
            .ok_or_else(|| fail("expected `%ID = OP(...)`".into()))?;
        let dest = value_id(dest).ok_or_else(|| fail(format!("bad destination {dest}")))?;
        let open = rhs.find('(').ok_or_else(|| fail("missing `(`".into()))?;
        let body = rhs[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| fail("missing closing `)`".into()))?;
        let mnemonic = &rhs[..open];
        let kind = OpKind::ALL
            .into_iter()
            .find(|k| k.mnemonic() == mnemonic)
            .ok_or_else(|| fail(format!("unknown op {mnemonic}")))?;
        let (arg_text, attr_text) = match body.split_once(';') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (body.trim(), None),
        };
        let args = if arg_text.is_empty() {
            Vec::new()
        } else {
            arg_text
                .split(',')
                .map(|a| value_id(a).ok_or_else(|| fail(format!("bad argument {a}"))))
                .collect::<Result<Vec<_>, _>>()?
        };
        let attr = || attr_text.ok_or_else(|| fail(format!("{mnemonic} needs attributes")));
        let float = |s: &str| parse_f32(s).ok_or_else(|| fail(format!("bad number {s}")));
        let op = match kind {
            OpKind::Const => Op::Const(float(attr()?)?),
            OpKind::Input => Op::Input(attr()?.to_string()),
            OpKind::Conv2d => {
                let mut parts = attr()?.split_whitespace();
                let size: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| fail("bad kernel size".into()))?;
                let weights = parts.map(float).collect::<Result<Vec<_>, _>>()?;
                Op::Conv2d(Kernel2D::new(size, weights).map_err(|e| fail(e.to_string()))?)
            }
            OpKind::Binary => {
                let a = attr()?;
                Op::Binary(binary_kind(a).ok_or_else(|| fail(format!("unknown binary kind {a}")))?)
            }
            OpKind::Unary => {
                let a = attr()?;
                Op::Unary(unary_kind(a).ok_or_else(|| fail(format!("unknown unary kind {a}")))?)
            }
            OpKind::ScalarBinary => {
                let (k, v) = attr()?
                    .split_once(' ')
                    .ok_or_else(|| fail("expected `kind scalar`".into()))?;
                let k = binary_kind(k).ok_or_else(|| fail(format!("unknown binary kind {k}")))?;
                Op::ScalarBinary(k, float(v)?)
            }
            OpKind::Select => Op::Select(
                attr()?
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|_| fail(format!("bad band index {s}"))))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            OpKind::Cat => Op::Cat,
            OpKind::ReduceMax => Op::ReduceMax,
            OpKind::UpsampleNearest => Op::UpsampleNearest,
        };
        if attr_text.is_some() && matches!(kind, OpKind::Cat | OpKind::ReduceMax | OpKind::UpsampleNearest) {
            return Err(fail(format!("{mnemonic} takes no attributes")));
        }
        prog.instrs.push(Instr { dest, op, args });
    }
    prog.output = output.ok_or(IsaError::Parse {
        line: text.lines().count(),
        message: "missing `output` line".into(),
    })?;
    Ok(prog)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
input x 2
%0 = INPUT(; x)
%1 = SELECT(%0; 1 0)
%2 = CONV2D(%1; 3 1.000000000e+00 0.000000000e+00 0.000000000e+00 0.000000000e+00 -2.500000000e-01 0.000000000e+00 0.000000000e+00 0.000000000e+00 1.000000000e-01)
%3 = BINARY(%1, %2; max)
%4 = SCALAR_BINARY(%3; div 3.000000000e+00)
%5 = UNARY(%4; recip)
%6 = CONST(; 1.000000000e+00)
%7 = CAT(%5, %6)
%8 = REDUCE_MAX(%7)
%9 = UPSAMPLE_NEAREST(%8)
output %9
";

    #[test]
    fn golden_text_round_trip() {
        let p = parse_program(SAMPLE).unwrap();
        assert_eq!(p.instrs.len(), 10);
        assert_eq!(p.to_text(), SAMPLE);
        crate::isa::validate(&p).unwrap();
    }

    #[test]
    fn comments_are_skipped_and_errors_carry_lines() {
        let with_comment = SAMPLE.replace("%3 =", "# a note\n%3 =");
        assert_eq!(parse_program(&with_comment).unwrap(), parse_program(SAMPLE).unwrap());
        let broken = SAMPLE.replace("BINARY(%1, %2; max)", "BINARY(%1, %2; pow)");
        assert!(matches!(parse_program(&broken), Err(IsaError::Parse { line: 5, .. })));
        assert!(parse_program("input x 1\n%0 = INPUT(; x)\n").is_err());
    }
}
