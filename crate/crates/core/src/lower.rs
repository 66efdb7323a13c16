//! Compilation of the network graph onto the restricted instruction set.
//!
//! A multi-channel convolution becomes one `CONV2D` per (output, input) band
//! pair. Output channels are built in order; each one convolves every input
//! band, then sums the terms pairwise with `BINARY add` (neighbours in input
//! order are added level by level, an odd last term passing up unchanged).
//! Pairwise sums keep float32 rounding growth logarithmic in the band count.
//! Batch norm, PReLU and the logistic head are built from scalar arithmetic. Constants are folded in f64 at lowering time and rounded to
//! float32 once.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::isa::{
    validate, write_program, BinaryKind, InputDecl, Instr, Op, Program, UnaryKind, ValueId, ValueInfo,
};
use crate::layers::BELOW_ONE;
use crate::model::{GraphSpec, NodeId, NodeKind, ParamSet};
use crate::tensor::{BNParams, ConvWeights, PReLUParams};

/// Logits are clamped here before negation so `exp` stays finite in float32.
pub const LOGIT_FLOOR: f32 = -87.0;

/// Incremental program builder tracking band count and scale of every value.
#[derive(Clone, Debug, Default)]
pub struct LoweringContext {
    inputs: Vec<InputDecl>,
    instrs: Vec<Instr>,
    info: Vec<ValueInfo>,
    size: Option<(usize, usize)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Lowering(msg.into())
}

impl LoweringContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// A context that also knows the input grid, so pooling an odd-sized value is caught here.
    pub fn with_input_size(height: usize, width: usize) -> Self {
        LoweringContext {
            size: Some((height, width)),
            ..Self::default()
        }
    }

    /// Declares an input image and emits the `INPUT` that reads it.
    pub fn input(&mut self, name: &str, bands: usize) -> Result<ValueId> {
        if bands == 0 {
            return Err(err(format!("input {name} needs at least one band")));
        }
        if self.inputs.iter().any(|d| d.name == name) {
            return Err(err(format!("input {name} declared twice")));
        }
        self.inputs.push(InputDecl {
            name: name.to_string(),
            bands,
        });
        Ok(self.emit(Op::Input(name.to_string()), vec![], ValueInfo { bands, level: 0 }))
    }

    pub fn info(&self, id: ValueId) -> Result<ValueInfo> {
        self.info
            .get(id)
            .copied()
            .ok_or_else(|| err(format!("%{id} is not defined")))
    }

    /// Number of instructions emitted so far.
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Emits one instruction; ids are allocated densely in emission order.
    fn emit(&mut self, op: Op, args: Vec<ValueId>, info: ValueInfo) -> ValueId {
        let dest = self.instrs.len();
        self.instrs.push(Instr { dest, op, args });
        self.info.push(info);
        dest
    }

    fn band(&mut self, op: Op, args: Vec<ValueId>, level: i32) -> ValueId {
        self.emit(op, args, ValueInfo { bands: 1, level })
    }

    fn cat(&mut self, parts: Vec<ValueId>, level: i32) -> ValueId {
        if parts.len() == 1 {
            return parts[0];
        }
        let bands = parts.iter().map(|&p| self.info[p].bands).sum();
        self.emit(Op::Cat, parts, ValueInfo { bands, level })
    }

    fn expect_bands(&self, x: ValueId, bands: usize, what: &str) -> Result<ValueInfo> {
        let info = self.info(x)?;
        if info.bands != bands {
            return Err(err(format!("{what} expects {bands} bands, %{x} has {}", info.bands)));
        }
        Ok(info)
    }

    /// Validates the accumulated instructions and seals them into a program.
    pub fn finish(self, output: ValueId) -> Result<Program> {
        self.info(output)?;
        let prog = Program {
            inputs: self.inputs,
            instrs: self.instrs,
            output,
        };
        validate(&prog)?;
        Ok(prog)
    }
}

/// Multi-channel "same" convolution from per-band 2-D convolutions.
pub fn lower_conv(ctx: &mut LoweringContext, x: ValueId, w: &ConvWeights) -> Result<ValueId> {
    let level = ctx.expect_bands(x, w.in_channels(), "convolution")?.level;
    let bands: Vec<ValueId> = (0..w.in_channels())
        .map(|i| ctx.band(Op::Select(vec![i]), vec![x], level))
        .collect();
    let mut outs = Vec::with_capacity(w.out_channels());
    for o in 0..w.out_channels() {
        let mut terms: Vec<ValueId> = bands
            .iter()
            .enumerate()
            .map(|(i, &b)| ctx.band(Op::Conv2d(w.kernel(o, i)), vec![b], level))
            .collect();
        while terms.len() > 1 {
            let mut next = Vec::with_capacity(terms.len().div_ceil(2));
            for pair in terms.chunks(2) {
                next.push(match pair {
                    [a, b] => ctx.band(Op::Binary(BinaryKind::Add), vec![*a, *b], level),
                    [a] => *a,
                    _ => unreachable!(),
                });
            }
            terms = next;
        }
        let mut acc = terms[0];
        if let Some(bias) = w.bias() {
            acc = ctx.band(Op::ScalarBinary(BinaryKind::Add, bias[o]), vec![acc], level);
        }
        outs.push(acc);
    }
    Ok(ctx.cat(outs, level))
}

/// The batch-norm divisor `sqrt(var + eps)`, evaluated in f64 and rounded once.
pub fn bn_divisor(var: f32, eps: f32) -> Result<f32> {
    let s = var as f64 + eps as f64;
    if !(s > 0.0) {
        return Err(err(format!("batch norm var + eps = {s} is not positive")));
    }
    Ok(s.sqrt() as f32)
}

/// Inference-mode batch norm with running statistics.
pub fn lower_bn(ctx: &mut LoweringContext, x: ValueId, p: &BNParams) -> Result<ValueId> {
    p.check()?;
    let level = ctx.expect_bands(x, p.channels(), "batch norm")?.level;
    let divisors = (0..p.channels())
        .map(|c| bn_divisor(p.running_var[c], p.epsilon))
        .collect::<Result<Vec<_>>>()?;
    let mut outs = Vec::with_capacity(p.channels());
    for (c, &d) in divisors.iter().enumerate() {
        let mut v = ctx.band(Op::Select(vec![c]), vec![x], level);
        for (kind, s) in [
            (BinaryKind::Sub, p.running_mean[c]),
            (BinaryKind::Div, d),
            (BinaryKind::Mul, p.gamma[c]),
            (BinaryKind::Add, p.beta[c]),
        ] {
            v = ctx.band(Op::ScalarBinary(kind, s), vec![v], level);
        }
        outs.push(v);
    }
    Ok(ctx.cat(outs, level))
}

/// `maxzero(x) + a * minzero(x)` per band.
pub fn lower_prelu(ctx: &mut LoweringContext, x: ValueId, p: &PReLUParams) -> Result<ValueId> {
    let level = ctx.expect_bands(x, p.channels(), "prelu")?.level;
    let mut outs = Vec::with_capacity(p.channels());
    for (c, &a) in p.slope.iter().enumerate() {
        let v = ctx.band(Op::Select(vec![c]), vec![x], level);
        let pos = ctx.band(Op::Unary(UnaryKind::MaxZero), vec![v], level);
        let neg = ctx.band(Op::Unary(UnaryKind::MinZero), vec![v], level);
        let scaled = ctx.band(Op::ScalarBinary(BinaryKind::Mul, a), vec![neg], level);
        outs.push(ctx.band(Op::Binary(BinaryKind::Add), vec![pos, scaled], level));
    }
    Ok(ctx.cat(outs, level))
}

pub fn lower_pool(ctx: &mut LoweringContext, x: ValueId) -> Result<ValueId> {
    let info = ctx.info(x)?;
    if let Some((h, w)) = ctx.size {
        let step = 1usize << (info.level + 1).max(0);
        if h % step != 0 || w % step != 0 {
            return Err(err(format!(
                "pooling %{x} needs even sides, but {h}x{w} at level {} gives {}x{}",
                info.level,
                h >> info.level.max(0),
                w >> info.level.max(0)
            )));
        }
    }
    let out = ValueInfo {
        level: info.level + 1,
        ..info
    };
    Ok(ctx.emit(Op::ReduceMax, vec![x], out))
}

pub fn lower_upsample(ctx: &mut LoweringContext, x: ValueId) -> Result<ValueId> {
    let info = ctx.info(x)?;
    let out = ValueInfo {
        level: info.level - 1,
        ..info
    };
    Ok(ctx.emit(Op::UpsampleNearest, vec![x], out))
}

/// Band concatenation in argument order.
pub fn lower_concat(ctx: &mut LoweringContext, parts: &[ValueId]) -> Result<ValueId> {
    let first = ctx.info(*parts.first().ok_or_else(|| err("concatenation of nothing"))?)?;
    let mut bands = 0;
    for &p in parts {
        let info = ctx.info(p)?;
        if info.level != first.level {
            return Err(err(format!(
                "concatenation mixes scale levels {} and {}",
                first.level, info.level
            )));
        }
        bands += info.bands;
    }
    Ok(ctx.emit(
        Op::Cat,
        parts.to_vec(),
        ValueInfo {
            bands,
            level: first.level,
        },
    ))
}

/// Head convolution followed by `1 / (1 + exp(-x))`.
///
/// The logit is floored at [`LOGIT_FLOOR`] so `exp` cannot overflow, and the
/// result is capped just below one, keeping the output strictly inside (0, 1).
pub fn lower_head(ctx: &mut LoweringContext, x: ValueId, w: &ConvWeights) -> Result<ValueId> {
    if w.out_channels() != 1 {
        return Err(err(format!("the head must have one filter, got {}", w.out_channels())));
    }
    let logit = lower_conv(ctx, x, w)?;
    let level = ctx.info(logit)?.level;
    let steps = [
        Op::ScalarBinary(BinaryKind::Max, LOGIT_FLOOR),
        Op::Unary(UnaryKind::Neg),
        Op::Unary(UnaryKind::Exp),
        Op::ScalarBinary(BinaryKind::Add, 1.0),
        Op::Unary(UnaryKind::Recip),
        Op::ScalarBinary(BinaryKind::Min, BELOW_ONE),
    ];
    let mut v = logit;
    for op in steps {
        v = ctx.band(op, vec![v], level);
    }
    Ok(v)
}

/// The one conv-BN-PReLU pair repeated twice inside every TCBP block.
fn lower_tcbp(ctx: &mut LoweringContext, x: ValueId, p: &crate::model::TcbpParams) -> Result<ValueId> {
    let mut v = x;
    for unit in 0..2 {
        let (c, bn, pr) = p.unit(unit);
        v = lower_conv(ctx, v, c)?;
        v = lower_bn(ctx, v, bn)?;
        v = lower_prelu(ctx, v, pr)?;
    }
    Ok(v)
}

/// Deliberate miscompilations, used as negative controls for the verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Concatenate the skip stream before the upsampled one.
    SwapConcat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LowerOptions {
    /// Known input grid, enabling size checks at pooling.
    pub input_size: Option<(usize, usize)>,
    pub fault: Option<Fault>,
}

/// The contiguous instructions that implement one graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub node: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub instrs: Range<usize>,
    /// Values consumed from earlier regions, in graph input order.
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

/// A lowered network together with its per-node instruction regions.
#[derive(Clone, Debug, PartialEq)]
pub struct LoweredNetwork {
    pub program: Program,
    pub regions: Vec<Region>,
}

/// Name of the single program input.
pub const INPUT_NAME: &str = "image";

pub fn kind_name(kind: &NodeKind) -> &'static str {
    match kind {
        NodeKind::Input => "input",
        NodeKind::Tcbp(_) => "tcbp",
        NodeKind::MaxPool => "maxpool",
        NodeKind::Upsample => "upsample",
        NodeKind::Concat => "concat",
        NodeKind::Head => "head",
    }
}

impl LoweredNetwork {
    /// Program text with a `# region NAME KIND` comment before each node's instructions.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LoweredNetwork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let comments: Vec<(usize, String)> = self
            .regions
            .iter()
            .map(|r| (r.instrs.start, format!("region {} {}", r.name, kind_name(&r.kind))))
            .collect();
        write_program(&self.program, &comments, f)
    }
}

/// Lowers the whole network into a validated program.
pub fn lower_network(g: &GraphSpec, p: &ParamSet) -> Result<Program> {
    Ok(lower_network_with(g, p, &LowerOptions::default())?.program)
}

pub fn lower_network_with(g: &GraphSpec, p: &ParamSet, opts: &LowerOptions) -> Result<LoweredNetwork> {
    let cfg = g.config();
    p.check(cfg)?;
    let mut ctx = match opts.input_size {
        Some((h, w)) => LoweringContext::with_input_size(h, w),
        None => LoweringContext::new(),
    };
    let mut values: Vec<ValueId> = Vec::with_capacity(g.nodes().len());
    let mut regions = Vec::with_capacity(g.nodes().len());
    for (id, node) in g.nodes().iter().enumerate() {
        let start = ctx.len();
        let mut inputs: Vec<ValueId> = node.inputs.iter().map(|&i| values[i]).collect();
        let out = match &node.kind {
            NodeKind::Input => ctx.input(INPUT_NAME, cfg.in_bands)?,
            NodeKind::Tcbp(b) => lower_tcbp(&mut ctx, inputs[0], p.block(*b))?,
            NodeKind::MaxPool => lower_pool(&mut ctx, inputs[0])?,
            NodeKind::Upsample => lower_upsample(&mut ctx, inputs[0])?,
            NodeKind::Concat => {
                if opts.fault == Some(Fault::SwapConcat) {
                    inputs.reverse();
                }
                lower_concat(&mut ctx, &inputs)?
            }
            NodeKind::Head => lower_head(&mut ctx, inputs[0], &p.head)?,
        };
        values.push(out);
        regions.push(Region {
            node: id,
            name: node.name.clone(),
            kind: node.kind.clone(),
            instrs: start..ctx.len(),
            inputs,
            output: out,
        });
    }
    let output = values[g.output()];
    Ok(LoweredNetwork {
        program: ctx.finish(output)?,
        regions,
    })
}
