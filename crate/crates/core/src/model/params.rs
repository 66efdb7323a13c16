use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Block, ModelConfig};
use crate::tensor::{BNParams, ConvWeights, PReLUParams};

/// Parameters of one TCBP block: two conv -> BN -> PReLU units.
#[derive(Clone, Debug, PartialEq)]
pub struct TcbpParams {
    pub conv1: ConvWeights,
    pub bn1: BNParams,
    pub prelu1: PReLUParams,
    pub conv2: ConvWeights,
    pub bn2: BNParams,
    pub prelu2: PReLUParams,
}

impl TcbpParams {
    fn identity(in_ch: usize, width: usize, k: usize, eps: f32, slope: f32) -> Result<Self> {
        Ok(TcbpParams {
            conv1: ConvWeights::zeros(width, in_ch, k, false)?,
            bn1: BNParams::identity(width, eps),
            prelu1: PReLUParams::uniform(width, slope),
            conv2: ConvWeights::zeros(width, width, k, false)?,
            bn2: BNParams::identity(width, eps),
            prelu2: PReLUParams::uniform(width, slope),
        })
    }

    pub fn unit(&self, unit: usize) -> (&ConvWeights, &BNParams, &PReLUParams) {
        match unit {
            0 => (&self.conv1, &self.bn1, &self.prelu1),
            _ => (&self.conv2, &self.bn2, &self.prelu2),
        }
    }
}

/// Every tensor of the network. `up[u - 1]` holds up level `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub down: Vec<TcbpParams>,
    pub up: Vec<TcbpParams>,
    pub head: ConvWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
    Slope,
}

impl ParamRole {
    /// Running statistics are updated by momentum, not by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn block_name(b: Block) -> String {
    match b {
        Block::Down(d) => format!("down{d}"),
        Block::Up(u) => format!("up{u}"),
    }
}

/// Blocks in graph order: down1..downD, upD..up1.
pub(crate) fn blocks(cfg: &ModelConfig) -> Vec<Block> {
    (1..=cfg.depth)
        .map(Block::Down)
        .chain((1..=cfg.depth).rev().map(Block::Up))
        .collect()
}

pub(crate) fn block_in_channels(cfg: &ModelConfig, b: Block) -> usize {
    match b {
        Block::Down(1) => cfg.in_bands,
        Block::Down(_) => cfg.width,
        Block::Up(_) => 2 * cfg.width,
    }
}

impl ParamSet {
    /// Ordered tensor registry: blocks in graph order, then the head.
    pub fn registry(cfg: &ModelConfig) -> Result<Vec<TensorSpec>> {
        cfg.validate()?;
        let (w, k) = (cfg.width, cfg.kernel_size);
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, role| specs.push(TensorSpec { name, shape, role });
        for b in blocks(cfg) {
            let p = block_name(b);
            for unit in 1..=2 {
                let cin = if unit == 1 { block_in_channels(cfg, b) } else { w };
                add(format!("{p}.conv{unit}.weight"), vec![w, cin, k, k], ParamRole::ConvWeight);
                add(format!("{p}.bn{unit}.gamma"), vec![w], ParamRole::Gamma);
                add(format!("{p}.bn{unit}.beta"), vec![w], ParamRole::Beta);
                add(format!("{p}.bn{unit}.running_mean"), vec![w], ParamRole::RunningMean);
                add(format!("{p}.bn{unit}.running_var"), vec![w], ParamRole::RunningVar);
                add(format!("{p}.prelu{unit}.slope"), vec![w], ParamRole::Slope);
            }
        }
        add("head.weight".into(), vec![1, w, k, k], ParamRole::ConvWeight);
        add("head.bias".into(), vec![1], ParamRole::Bias);
        Ok(specs)
    }

    /// All convolution weights zero, identity batch norm, the given PReLU slope, zero head bias.
    pub fn zeros(cfg: &ModelConfig, slope: f32) -> Result<Self> {
        cfg.validate()?;
        let (w, k, eps) = (cfg.width, cfg.kernel_size, cfg.bn_eps);
        let mk = |b| TcbpParams::identity(block_in_channels(cfg, b), w, k, eps, slope);
        Ok(ParamSet {
            down: (1..=cfg.depth).map(|d| mk(Block::Down(d))).collect::<Result<_>>()?,
            up: (1..=cfg.depth).map(|u| mk(Block::Up(u))).collect::<Result<_>>()?,
            head: ConvWeights::zeros(1, w, k, true)?,
        })
    }

    pub fn block(&self, b: Block) -> &TcbpParams {
        match b {
            Block::Down(d) => &self.down[d - 1],
            Block::Up(u) => &self.up[u - 1],
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut TcbpParams {
        match b {
            Block::Down(d) => &mut self.down[d - 1],
            Block::Up(u) => &mut self.up[u - 1],
        }
    }

    /// Flat copies of every tensor in registry order.
    pub fn to_flat(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        let blocks = (0..self.down.len())
            .map(|i| &self.down[i])
            .chain(self.up.iter().rev());
        for t in blocks {
            for unit in 0..2 {
                let (c, bn, pr) = t.unit(unit);
                out.push(c.weights().to_vec());
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
                out.push(bn.running_mean.clone());
                out.push(bn.running_var.clone());
                out.push(pr.slope.clone());
            }
        }
        out.push(self.head.weights().to_vec());
        out.push(self.head.bias().map(<[f32]>::to_vec).unwrap_or_default());
        out
    }

    /// Rebuilds a parameter set from registry-ordered flat tensors.
    pub fn from_flat(cfg: &ModelConfig, flat: Vec<Vec<f32>>) -> Result<Self> {
        let specs = Self::registry(cfg)?;
        if flat.len() != specs.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                flat.len()
            )));
        }
        for (s, t) in specs.iter().zip(&flat) {
            if s.len() != t.len() {
                return Err(Error::ParamMismatch(format!(
                    "tensor {} needs {} values, got {}",
                    s.name,
                    s.len(),
                    t.len()
                )));
            }
        }
        let (w, k, eps) = (cfg.width, cfg.kernel_size, cfg.bn_eps);
        let mut it = flat.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut build = |b: Block| -> Result<TcbpParams> {
            let mut unit = |cin: usize| -> Result<(ConvWeights, BNParams, PReLUParams)> {
                let conv = ConvWeights::new(w, cin, k, next(), None)?;
                let bn = BNParams {
                    gamma: next(),
                    beta: next(),
                    running_mean: next(),
                    running_var: next(),
                    epsilon: eps,
                };
                Ok((conv, bn, PReLUParams { slope: next() }))
            };
            let (conv1, bn1, prelu1) = unit(block_in_channels(cfg, b))?;
            let (conv2, bn2, prelu2) = unit(w)?;
            Ok(TcbpParams {
                conv1,
                bn1,
                prelu1,
                conv2,
                bn2,
                prelu2,
            })
        };
        let down = (1..=cfg.depth).map(|d| build(Block::Down(d))).collect::<Result<Vec<_>>>()?;
        let mut up = (1..=cfg.depth).rev().map(|u| build(Block::Up(u))).collect::<Result<Vec<_>>>()?;
        up.reverse();
        let head_w = next();
        let head_b = next();
        Ok(ParamSet {
            down,
            up,
            head: ConvWeights::new(1, w, k, head_w, Some(head_b))?,
        })
    }

    /// Verifies that the tensors are exactly the ones registered for `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.down.len() != cfg.depth || self.up.len() != cfg.depth {
            return Err(Error::ParamMismatch(format!(
                "depth {} model expects {} down and {} up blocks, got {} and {}",
                cfg.depth,
                cfg.depth,
                cfg.depth,
                self.down.len(),
                self.up.len()
            )));
        }
        let specs = Self::registry(cfg)?;
        let flat = self.to_flat();
        for (s, t) in specs.iter().zip(&flat) {
            if s.len() != t.len() {
                return Err(Error::ParamMismatch(format!(
                    "tensor {} needs {} values, got {}",
                    s.name,
                    s.len(),
                    t.len()
                )));
            }
        }
        for b in blocks(cfg) {
            let t = self.block(b);
            for unit in 0..2 {
                let (c, bn, pr) = t.unit(unit);
                if c.bias().is_some() {
                    return Err(Error::ParamMismatch(format!(
                        "convolutions followed by batch norm carry no bias ({b:?})"
                    )));
                }
                if c.in_channels() != if unit == 0 { block_in_channels(cfg, b) } else { cfg.width } {
                    return Err(Error::ParamMismatch(format!("{b:?} unit {unit} input width")));
                }
                if bn.epsilon != cfg.bn_eps {
                    return Err(Error::ParamMismatch(format!("{b:?} unit {unit} batch-norm epsilon")));
                }
                if pr.channels() != cfg.width {
                    return Err(Error::ParamMismatch(format!("{b:?} unit {unit} slope count")));
                }
            }
        }
        if self.head.bias().is_none() {
            return Err(Error::ParamMismatch("head convolution needs a bias".into()));
        }
        Ok(())
    }

    /// Random but well-scaled parameters for equivalence testing: He-scaled
    /// normal kernels, positive variances and generic affine terms, so every
    /// code path (negative PReLU branch, nonzero means) is exercised.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = Self::registry(cfg)?
            .iter()
            .map(|s| {
                let n = s.len();
                match s.role {
                    ParamRole::ConvWeight => {
                        let fan_in = s.shape[1..].iter().product::<usize>() as f64;
                        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                    }
                    ParamRole::Gamma => (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
                    ParamRole::Beta | ParamRole::RunningMean => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    ParamRole::RunningVar => (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
                    ParamRole::Slope => (0..n).map(|_| rng.gen_range(0.0..0.5)).collect(),
                    ParamRole::Bias => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        Self::from_flat(cfg, flat)
    }

    /// True when no tensor holds NaN or infinity.
    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().flatten().all(|v| v.is_finite())
    }
}

/// Number of scalars in the parameter registry of `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(ParamSet::registry(cfg)?.iter().map(TensorSpec::len).sum())
}
