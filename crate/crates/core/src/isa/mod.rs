//! A closed instruction set of whole-image 2-D operations and its interpreter.
//!
//! Values are stacks of float32 bands on a common grid. Semantics, one line each:
//!
//! | op | result |
//! |----|--------|
//! | `CONST(c)` | one band filled with `c`, full resolution |
//! | `INPUT(name)` | the declared input image |
//! | `CONV2D(k)` | every band convolved independently with the odd kernel `k`, zero padding, f64 sums |
//! | `BINARY(kind)` | bandwise `a kind b`; equal band counts and scale |
//! | `UNARY(kind)` | elementwise `exp`, `sqrt`, `neg`, `recip` (1/x), `maxzero` (max(x,0)), `minzero` (min(x,0)) |
//! | `SCALAR_BINARY(kind, s)` | elementwise `x kind s` |
//! | `CAT` | bands of all arguments in argument order |
//! | `SELECT(i..)` | the listed bands, in the listed order |
//! | `REDUCE_MAX` | per-band 2x2 block maximum, halves the grid |
//! | `UPSAMPLE_NEAREST` | 2x2 replication, doubles the grid |
//!
//! Binary kinds are `add`, `sub`, `mul`, `div`, `min`, `max`. Every computed
//! band must be finite; a NaN or infinity aborts interpretation.

mod interp;
mod text;
mod validate;

pub use interp::interpret;
pub use text::parse_program;
pub(crate) use text::write_program;
pub use validate::{program_stats, validate, ProgramStats, ValidationReport, ValueInfo};

use std::fmt;

use thiserror::Error;

use crate::error::Result;
use crate::tensor::{Kernel2D, Tensor};

pub type ValueId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl BinaryKind {
    pub const ALL: [BinaryKind; 6] = [
        BinaryKind::Add,
        BinaryKind::Sub,
        BinaryKind::Mul,
        BinaryKind::Div,
        BinaryKind::Min,
        BinaryKind::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
            BinaryKind::Min => "min",
            BinaryKind::Max => "max",
        }
    }

    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
            BinaryKind::Min => a.min(b),
            BinaryKind::Max => a.max(b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryKind {
    Exp,
    Sqrt,
    Neg,
    Recip,
    MaxZero,
    MinZero,
}

impl UnaryKind {
    pub const ALL: [UnaryKind; 6] = [
        UnaryKind::Exp,
        UnaryKind::Sqrt,
        UnaryKind::Neg,
        UnaryKind::Recip,
        UnaryKind::MaxZero,
        UnaryKind::MinZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Exp => "exp",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Neg => "neg",
            UnaryKind::Recip => "recip",
            UnaryKind::MaxZero => "maxzero",
            UnaryKind::MinZero => "minzero",
        }
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            UnaryKind::Exp => (x as f64).exp() as f32,
            UnaryKind::Sqrt => (x as f64).sqrt() as f32,
            UnaryKind::Neg => -x,
            UnaryKind::Recip => 1.0 / x,
            UnaryKind::MaxZero => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryKind::MinZero => {
                if x < 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Const(f32),
    Input(String),
    Conv2d(Kernel2D),
    Binary(BinaryKind),
    Unary(UnaryKind),
    ScalarBinary(BinaryKind, f32),
    Cat,
    Select(Vec<usize>),
    ReduceMax,
    UpsampleNearest,
}

/// Every op kind, used for statistics and the closed-set checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Const,
    Input,
    Conv2d,
    Binary,
    Unary,
    ScalarBinary,
    Cat,
    Select,
    ReduceMax,
    UpsampleNearest,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Const,
        OpKind::Input,
        OpKind::Conv2d,
        OpKind::Binary,
        OpKind::Unary,
        OpKind::ScalarBinary,
        OpKind::Cat,
        OpKind::Select,
        OpKind::ReduceMax,
        OpKind::UpsampleNearest,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::Const => "CONST",
            OpKind::Input => "INPUT",
            OpKind::Conv2d => "CONV2D",
            OpKind::Binary => "BINARY",
            OpKind::Unary => "UNARY",
            OpKind::ScalarBinary => "SCALAR_BINARY",
            OpKind::Cat => "CAT",
            OpKind::Select => "SELECT",
            OpKind::ReduceMax => "REDUCE_MAX",
            OpKind::UpsampleNearest => "UPSAMPLE_NEAREST",
        }
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Const(_) => OpKind::Const,
            Op::Input(_) => OpKind::Input,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Binary(_) => OpKind::Binary,
            Op::Unary(_) => OpKind::Unary,
            Op::ScalarBinary(..) => OpKind::ScalarBinary,
            Op::Cat => OpKind::Cat,
            Op::Select(_) => OpKind::Select,
            Op::ReduceMax => OpKind::ReduceMax,
            Op::UpsampleNearest => OpKind::UpsampleNearest,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instr {
    pub dest: ValueId,
    pub op: Op,
    pub args: Vec<ValueId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputDecl {
    pub name: String,
    pub bands: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Program {
    pub inputs: Vec<InputDecl>,
    pub instrs: Vec<Instr>,
    pub output: ValueId,
}

impl Program {
    /// Line-oriented text form; see [`parse_program`] for the grammar.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        text::write_program(self, &[], f)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IsaError {
    #[error("instruction {index} (%{dest}): {message}")]
    Validation {
        index: usize,
        dest: ValueId,
        message: String,
    },
    #[error("program output %{0} is never defined")]
    UndefinedOutput(ValueId),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("instruction {index} (%{dest}) produced a non-finite value")]
    NonFinite { index: usize, dest: ValueId },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A band-named float32 image on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    height: usize,
    width: usize,
    bands: Vec<Band>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub name: String,
    pub values: Vec<f32>,
}

impl GridImage {
    pub fn new(height: usize, width: usize, bands: Vec<Band>) -> Result<Self> {
        use crate::error::Error;
        if height == 0 || width == 0 {
            return Err(Error::dim("image dimensions must be positive"));
        }
        for (i, b) in bands.iter().enumerate() {
            if b.values.len() != height * width {
                return Err(Error::dim(format!(
                    "band {} has {} values, expected {}",
                    b.name,
                    b.values.len(),
                    height * width
                )));
            }
            if bands[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::dim(format!("duplicate band name {}", b.name)));
            }
        }
        Ok(GridImage {
            height,
            width,
            bands,
        })
    }

    /// Bands named by `names`, or `b0, b1, ...` when `names` is empty.
    pub fn from_tensor(t: &Tensor, names: &[String]) -> Result<Self> {
        let bands = (0..t.channels())
            .map(|c| Band {
                name: names.get(c).cloned().unwrap_or_else(|| format!("b{c}")),
                values: t.plane(c).to_vec(),
            })
            .collect();
        Self::new(t.height(), t.width(), bands)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self.bands.iter().flat_map(|b| b.values.iter().copied()).collect();
        Tensor::new(self.bands.len(), self.height, self.width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }
}
