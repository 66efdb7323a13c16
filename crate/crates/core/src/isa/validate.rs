use std::collections::BTreeMap;

use crate::isa::{IsaError, Op, OpKind, Program, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueInfo {
    pub bands: usize,
    /// Power-of-two scale; each REDUCE_MAX adds one, each UPSAMPLE_NEAREST removes one.
    pub level: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub values: BTreeMap<ValueId, ValueInfo>,
    pub output: ValueInfo,
    /// Deepest scale reached; input sizes must be divisible by `2^max_level`.
    pub max_level: i32,
}

/// Type-checks band counts and scales of every instruction.
pub fn validate(prog: &Program) -> Result<ValidationReport, IsaError> {
    let mut values: BTreeMap<ValueId, ValueInfo> = BTreeMap::new();
    let mut max_level = 0;
    for (name_idx, decl) in prog.inputs.iter().enumerate() {
        if decl.bands == 0 {
            return Err(IsaError::Input(format!("input {} declares zero bands", decl.name)));
        }
        if prog.inputs[..name_idx].iter().any(|d| d.name == decl.name) {
            return Err(IsaError::Input(format!("input {} declared twice", decl.name)));
        }
    }
    for (index, ins) in prog.instrs.iter().enumerate() {
        let fail = |message: String| IsaError::Validation {
            index,
            dest: ins.dest,
            message,
        };
        if values.contains_key(&ins.dest) {
            return Err(fail(format!("%{} assigned twice", ins.dest)));
        }
        let mut args = Vec::with_capacity(ins.args.len());
        for a in &ins.args {
            match values.get(a) {
                Some(v) => args.push(*v),
                None => return Err(fail(format!("%{a} used before definition"))),
            }
        }
        let arity = |n: usize| -> Result<(), IsaError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(fail(format!(
                    "{} takes {n} argument(s), got {}",
                    ins.op.kind().mnemonic(),
                    args.len()
                )))
            }
        };
        let info = match &ins.op {
            Op::Const(c) => {
                arity(0)?;
                if !c.is_finite() {
                    return Err(fail("constant is not finite".into()));
                }
                ValueInfo { bands: 1, level: 0 }
            }
            Op::Input(name) => {
                arity(0)?;
                let decl = prog
                    .inputs
                    .iter()
                    .find(|d| &d.name == name)
                    .ok_or_else(|| fail(format!("unknown input {name}")))?;
                ValueInfo {
                    bands: decl.bands,
                    level: 0,
                }
            }
            Op::Conv2d(_) | Op::Unary(_) => {
                arity(1)?;
                args[0]
            }
            Op::ScalarBinary(_, s) => {
                arity(1)?;
                if !s.is_finite() {
                    return Err(fail("scalar operand is not finite".into()));
                }
                args[0]
            }
            Op::Binary(kind) => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                if a.bands != b.bands {
                    return Err(fail(format!(
                        "band-count mismatch in {}: {} vs {}",
                        kind.name(),
                        a.bands,
                        b.bands
                    )));
                }
                if a.level != b.level {
                    return Err(fail(format!(
                        "scale mismatch in {}: level {} vs {}",
                        kind.name(),
                        a.level,
                        b.level
                    )));
                }
                a
            }
            Op::Cat => {
                if args.is_empty() {
                    return Err(fail("CAT needs at least one argument".into()));
                }
                if let Some(bad) = args.iter().find(|v| v.level != args[0].level) {
                    return Err(fail(format!(
                        "scale mismatch in CAT: level {} vs {}",
                        args[0].level, bad.level
                    )));
                }
                ValueInfo {
                    bands: args.iter().map(|v| v.bands).sum(),
                    level: args[0].level,
                }
            }
            Op::Select(idx) => {
                arity(1)?;
                if idx.is_empty() {
                    return Err(fail("SELECT needs at least one band".into()));
                }
                if let Some(i) = idx.iter().find(|&&i| i >= args[0].bands) {
                    return Err(fail(format!(
                        "band {i} out of range for a {}-band value",
                        args[0].bands
                    )));
                }
                ValueInfo {
                    bands: idx.len(),
                    level: args[0].level,
                }
            }
            Op::ReduceMax => {
                arity(1)?;
                ValueInfo {
                    bands: args[0].bands,
                    level: args[0].level + 1,
                }
            }
            Op::UpsampleNearest => {
                arity(1)?;
                ValueInfo {
                    bands: args[0].bands,
                    level: args[0].level - 1,
                }
            }
        };
        max_level = max_level.max(info.level);
        values.insert(ins.dest, info);
    }
    let output = *values
        .get(&prog.output)
        .ok_or(IsaError::UndefinedOutput(prog.output))?;
    Ok(ValidationReport {
        values,
        output,
        max_level,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProgramStats {
    pub counts: BTreeMap<OpKind, usize>,
    /// Total single-band kernel applications across all CONV2D instructions.
    pub conv_applications: usize,
    pub instructions: usize,
}

impl ProgramStats {
    pub fn count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }
}

/// Instruction counts by kind. Pure analysis; requires a valid program.
pub fn program_stats(prog: &Program) -> Result<ProgramStats, IsaError> {
    if prog.instrs.is_empty() {
        return Ok(ProgramStats::default());
    }
    let report = validate(prog)?;
    let mut stats = ProgramStats {
        instructions: prog.instrs.len(),
        ..Default::default()
    };
    for ins in &prog.instrs {
        *stats.counts.entry(ins.op.kind()).or_default() += 1;
        if let Op::Conv2d(_) = ins.op {
            stats.conv_applications += report.values[&ins.args[0]].bands;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{BinaryKind, InputDecl, Instr};

    fn prog(instrs: Vec<Instr>, output: ValueId) -> Program {
        Program {
            inputs: vec![InputDecl {
                name: "in".into(),
                bands: 3,
            }],
            instrs,
            output,
        }
    }

    fn ins(dest: ValueId, op: Op, args: &[ValueId]) -> Instr {
        Instr {
            dest,
            op,
            args: args.to_vec(),
        }
    }

    #[test]
    fn closure_of_add() {
        let p = prog(
            vec![
                ins(0, Op::Input("in".into()), &[]),
                ins(1, Op::Binary(BinaryKind::Add), &[0, 0]),
            ],
            1,
        );
        let r = validate(&p).unwrap();
        assert_eq!(r.output, ValueInfo { bands: 3, level: 0 });
    }

    #[test]
    fn scale_mismatch_is_reported() {
        let p = prog(
            vec![
                ins(0, Op::Input("in".into()), &[]),
                ins(1, Op::ReduceMax, &[0]),
                ins(2, Op::Binary(BinaryKind::Add), &[1, 0]),
            ],
            2,
        );
        let err = validate(&p).unwrap_err();
        assert!(matches!(err, IsaError::Validation { index: 2, dest: 2, .. }), "{err}");
        assert!(err.to_string().contains("scale mismatch"));
    }

    #[test]
    fn other_errors() {
        let use_before_def = prog(vec![ins(1, Op::Unary(crate::isa::UnaryKind::Neg), &[0])], 1);
        assert!(validate(&use_before_def).unwrap_err().to_string().contains("before definition"));
        let bands = prog(
            vec![
                ins(0, Op::Input("in".into()), &[]),
                ins(1, Op::Select(vec![0]), &[0]),
                ins(2, Op::Binary(BinaryKind::Mul), &[0, 1]),
            ],
            2,
        );
        assert!(validate(&bands).unwrap_err().to_string().contains("band-count"));
        let dup = prog(
            vec![ins(0, Op::Input("in".into()), &[]), ins(0, Op::Const(1.0), &[])],
            0,
        );
        assert!(validate(&dup).is_err());
        let undefined = prog(vec![ins(0, Op::Input("in".into()), &[])], 7);
        assert_eq!(validate(&undefined).unwrap_err(), IsaError::UndefinedOutput(7));
        let unknown = prog(vec![ins(0, Op::Input("x".into()), &[])], 0);
        assert!(validate(&unknown).is_err());
    }

    #[test]
    fn empty_program_stats() {
        let s = program_stats(&Program::default()).unwrap();
        assert_eq!(s, ProgramStats::default());
        assert!(OpKind::ALL.iter().all(|k| s.count(*k) == 0));
    }
}
