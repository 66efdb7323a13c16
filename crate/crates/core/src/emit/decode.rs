//! Recovers helper-level calls from a lowered program.
//!
//! Each region's instruction slice is matched against the exact sequence that
//! the corresponding script helper performs. Each extracted constant is then
//! compared bit for bit with the parameter tensor the script will read. A
//! successful decode therefore proves that the script replays the verified program.

use crate::error::{Error, Result};
use crate::isa::{validate, BinaryKind, Instr, Op, UnaryKind, ValidationReport, ValueId};
use crate::layers::BELOW_ONE;
use crate::lower::{bn_divisor, LoweredNetwork, LOGIT_FLOOR};
use crate::model::{ModelConfig, NodeKind, ParamSet};
use crate::tensor::ConvWeights;

/// Constants of one recovered multi-band convolution.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvCall {
    pub in_bands: usize,
    pub out_bands: usize,
    /// Kernels in output-major, input-minor order, row-major inside a kernel.
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct UnitCall {
    pub conv: ConvCall,
    pub mean: Vec<f32>,
    pub divisor: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub slope: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum CallKind {
    Input { bands: usize },
    Tcbp(Box<[UnitCall; 2]>),
    MaxPool,
    Upsample,
    Concat,
    Head(ConvCall),
}

/// One helper invocation: the value it defines and the values it reads.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Call {
    pub name: String,
    pub output: ValueId,
    pub inputs: Vec<ValueId>,
    pub kind: CallKind,
}

fn mismatch(region: &str, at: usize, what: impl std::fmt::Display) -> Error {
    Error::Lowering(format!("region {region}, instruction {at}: {what}"))
}

struct Cursor<'a> {
    region: &'a str,
    instrs: &'a [Instr],
    pos: usize,
    end: usize,
    report: &'a ValidationReport,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Result<&'a Instr> {
        if self.pos >= self.end {
            return Err(mismatch(self.region, self.pos, format!("expected {what}, region ended")));
        }
        let ins = &self.instrs[self.pos];
        self.pos += 1;
        Ok(ins)
    }

    fn fail(&self, what: impl std::fmt::Display) -> Error {
        mismatch(self.region, self.pos.saturating_sub(1), what)
    }

    fn bands(&self, v: ValueId) -> usize {
        self.report.values[&v].bands
    }

    /// Expects `op` applied to exactly `args`; kernels and scalars are returned via the op.
    fn expect(&mut self, args: &[ValueId], what: &str, pred: impl Fn(&Op) -> bool) -> Result<&'a Instr> {
        let ins = self.next(what)?;
        if !pred(&ins.op) || ins.args != args {
            return Err(self.fail(format!("expected {what} of {args:?}, found {:?} of {:?}", ins.op.kind(), ins.args)));
        }
        Ok(ins)
    }

    fn select(&mut self, x: ValueId, band: usize) -> Result<ValueId> {
        Ok(self
            .expect(&[x], "SELECT", |op| matches!(op, Op::Select(b) if b == &[band]))?
            .dest)
    }

    fn scalar(&mut self, x: ValueId, kind: BinaryKind) -> Result<(ValueId, f32)> {
        let ins = self.expect(&[x], kind.name(), |op| matches!(op, Op::ScalarBinary(k, _) if *k == kind))?;
        match ins.op {
            Op::ScalarBinary(_, s) => Ok((ins.dest, s)),
            _ => unreachable!(),
        }
    }

    fn cat(&mut self, parts: Vec<ValueId>) -> Result<ValueId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(self.expect(&parts, "CAT", |op| matches!(op, Op::Cat))?.dest)
    }

    fn conv(&mut self, x: ValueId, out_bands: usize, bias: bool) -> Result<(ValueId, ConvCall)> {
        let in_bands = self.bands(x);
        let sel = (0..in_bands).map(|i| self.select(x, i)).collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut outs = Vec::with_capacity(out_bands);
        for _ in 0..out_bands {
            let mut terms = Vec::with_capacity(in_bands);
            for &s in &sel {
                let ins = self.expect(&[s], "CONV2D", |op| matches!(op, Op::Conv2d(_)))?;
                if let Op::Conv2d(k) = &ins.op {
                    weights.extend_from_slice(k.weights());
                }
                terms.push(ins.dest);
            }
            while terms.len() > 1 {
                let mut next = Vec::with_capacity(terms.len().div_ceil(2));
                for pair in terms.chunks(2) {
                    next.push(match *pair {
                        [a, b] => {
                            self.expect(&[a, b], "add", |op| matches!(op, Op::Binary(BinaryKind::Add)))?
                                .dest
                        }
                        [a] => a,
                        _ => unreachable!("chunks of two"),
                    });
                }
                terms = next;
            }
            let mut v = terms[0];
            if bias {
                let (d, b) = self.scalar(v, BinaryKind::Add)?;
                v = d;
                biases.push(b);
            }
            outs.push(v);
        }
        let conv = ConvCall {
            in_bands,
            out_bands,
            weights,
            bias: bias.then_some(biases),
        };
        Ok((self.cat(outs)?, conv))
    }

    fn unit(&mut self, x: ValueId, width: usize) -> Result<(ValueId, UnitCall)> {
        let (z, conv) = self.conv(x, width, false)?;
        let (mut mean, mut divisor, mut gamma, mut beta) = (vec![], vec![], vec![], vec![]);
        let mut outs = Vec::with_capacity(width);
        for c in 0..width {
            let v = self.select(z, c)?;
            let (v, m) = self.scalar(v, BinaryKind::Sub)?;
            let (v, d) = self.scalar(v, BinaryKind::Div)?;
            let (v, g) = self.scalar(v, BinaryKind::Mul)?;
            let (v, b) = self.scalar(v, BinaryKind::Add)?;
            mean.push(m);
            divisor.push(d);
            gamma.push(g);
            beta.push(b);
            outs.push(v);
        }
        let y = self.cat(outs)?;
        let mut slope = Vec::with_capacity(width);
        let mut outs = Vec::with_capacity(width);
        for c in 0..width {
            let v = self.select(y, c)?;
            let pos = self.expect(&[v], "maxzero", |op| matches!(op, Op::Unary(UnaryKind::MaxZero)))?.dest;
            let neg = self.expect(&[v], "minzero", |op| matches!(op, Op::Unary(UnaryKind::MinZero)))?.dest;
            let (scaled, a) = self.scalar(neg, BinaryKind::Mul)?;
            slope.push(a);
            outs.push(
                self.expect(&[pos, scaled], "add", |op| matches!(op, Op::Binary(BinaryKind::Add)))?
                    .dest,
            );
        }
        let out = self.cat(outs)?;
        Ok((
            out,
            UnitCall {
                conv,
                mean,
                divisor,
                gamma,
                beta,
                slope,
            },
        ))
    }

    fn head(&mut self, x: ValueId) -> Result<(ValueId, ConvCall)> {
        let (mut v, conv) = self.conv(x, 1, true)?;
        let steps: [(&str, Box<dyn Fn(&Op) -> bool>); 6] = [
            ("max floor", Box::new(|op| *op == Op::ScalarBinary(BinaryKind::Max, LOGIT_FLOOR))),
            ("neg", Box::new(|op| *op == Op::Unary(UnaryKind::Neg))),
            ("exp", Box::new(|op| *op == Op::Unary(UnaryKind::Exp))),
            ("add one", Box::new(|op| *op == Op::ScalarBinary(BinaryKind::Add, 1.0))),
            ("recip", Box::new(|op| *op == Op::Unary(UnaryKind::Recip))),
            ("min cap", Box::new(|op| *op == Op::ScalarBinary(BinaryKind::Min, BELOW_ONE))),
        ];
        for (what, pred) in steps {
            v = self.expect(&[v], what, pred)?.dest;
        }
        Ok((v, conv))
    }

    fn finish(&self, out: ValueId, expected: ValueId) -> Result<()> {
        if self.pos != self.end {
            return Err(mismatch(self.region, self.pos, "unexpected trailing instructions"));
        }
        if out != expected {
            return Err(mismatch(self.region, self.pos, format!("region output %{expected}, recovered %{out}")));
        }
        Ok(())
    }
}

/// Splits the program into helper calls, requiring every instruction to be covered.
pub(crate) fn decode(net: &LoweredNetwork, cfg: &ModelConfig) -> Result<Vec<Call>> {
    let report = validate(&net.program)?;
    let instrs = &net.program.instrs;
    if instrs.iter().enumerate().any(|(i, ins)| ins.dest != i) {
        return Err(Error::Lowering("value ids are not dense in emission order".into()));
    }
    let mut next_start = 0;
    let mut calls = Vec::with_capacity(net.regions.len());
    for r in &net.regions {
        if r.instrs.start != next_start {
            return Err(Error::Lowering(format!("region {} does not follow its predecessor", r.name)));
        }
        next_start = r.instrs.end;
        let mut cur = Cursor {
            region: &r.name,
            instrs,
            pos: r.instrs.start,
            end: r.instrs.end,
            report: &report,
        };
        let input = |i: usize| {
            r.inputs
                .get(i)
                .copied()
                .ok_or_else(|| Error::Lowering(format!("region {} lacks input {i}", r.name)))
        };
        let (out, kind) = match &r.kind {
            NodeKind::Input => {
                let ins = cur.expect(&[], "INPUT", |op| matches!(op, Op::Input(_)))?;
                (ins.dest, CallKind::Input { bands: cur.bands(ins.dest) })
            }
            NodeKind::Tcbp(_) => {
                let (a, u1) = cur.unit(input(0)?, cfg.width)?;
                let (b, u2) = cur.unit(a, cfg.width)?;
                (b, CallKind::Tcbp(Box::new([u1, u2])))
            }
            NodeKind::MaxPool => {
                let d = cur.expect(&[input(0)?], "REDUCE_MAX", |op| matches!(op, Op::ReduceMax))?.dest;
                (d, CallKind::MaxPool)
            }
            NodeKind::Upsample => {
                let d = cur
                    .expect(&[input(0)?], "UPSAMPLE_NEAREST", |op| matches!(op, Op::UpsampleNearest))?
                    .dest;
                (d, CallKind::Upsample)
            }
            NodeKind::Concat => {
                let d = cur.expect(&r.inputs, "CAT", |op| matches!(op, Op::Cat))?.dest;
                (d, CallKind::Concat)
            }
            NodeKind::Head => {
                let (d, conv) = cur.head(input(0)?)?;
                (d, CallKind::Head(conv))
            }
        };
        cur.finish(out, r.output)?;
        calls.push(Call {
            name: r.name.clone(),
            output: out,
            inputs: r.inputs.clone(),
            kind,
        });
    }
    if next_start != instrs.len() {
        return Err(Error::Lowering("instructions after the last region".into()));
    }
    Ok(calls)
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn check_conv(name: &str, call: &ConvCall, w: &ConvWeights) -> Result<()> {
    let ok = call.in_bands == w.in_channels()
        && call.out_bands == w.out_channels()
        && same_bits(&call.weights, w.weights())
        && match (&call.bias, w.bias()) {
            (None, None) => true,
            (Some(a), Some(b)) => same_bits(a, b),
            _ => false,
        };
    if ok {
        Ok(())
    } else {
        Err(Error::Lowering(format!("{name}: program constants differ from the parameter tensors")))
    }
}

/// Confirms that every constant the program uses equals the tensor values the script reads.
pub(crate) fn check_against_params(calls: &[Call], cfg: &ModelConfig, p: &ParamSet) -> Result<()> {
    let mut blocks = (1..=cfg.depth)
        .map(|d| &p.down[d - 1])
        .chain((1..=cfg.depth).rev().map(|u| &p.up[u - 1]));
    for c in calls {
        match &c.kind {
            CallKind::Tcbp(units) => {
                let t = blocks
                    .next()
                    .ok_or_else(|| Error::Lowering("more blocks in the program than in the model".into()))?;
                for (i, u) in units.iter().enumerate() {
                    let (w, bn, pr) = t.unit(i);
                    let div = bn
                        .running_var
                        .iter()
                        .map(|&v| bn_divisor(v, bn.epsilon))
                        .collect::<Result<Vec<_>>>()?;
                    check_conv(&c.name, &u.conv, w)?;
                    let ok = same_bits(&u.mean, &bn.running_mean)
                        && same_bits(&u.divisor, &div)
                        && same_bits(&u.gamma, &bn.gamma)
                        && same_bits(&u.beta, &bn.beta)
                        && same_bits(&u.slope, &pr.slope);
                    if !ok {
                        return Err(Error::Lowering(format!(
                            "{}: batch norm or PReLU constants differ from the parameter tensors",
                            c.name
                        )));
                    }
                }
            }
            CallKind::Head(conv) => check_conv(&c.name, conv, &p.head)?,
            _ => {}
        }
    }
    Ok(())
}
