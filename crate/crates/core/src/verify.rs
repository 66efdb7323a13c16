//! Randomized equivalence trials between the reference engine and the
//! interpreted lowered program.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::isa::{interpret, GridImage};
use crate::lower::{lower_network_with, Fault, LowerOptions, INPUT_NAME};
use crate::model::{build_graph, forward, ModelConfig, ParamSet};
use crate::tensor::Tensor;

/// Largest tolerated max-abs difference between the two engines.
pub const TOLERANCE: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub trials: usize,
    /// Depths cycled through when no fixed model is given.
    pub depths: Vec<usize>,
    pub seed: u64,
    pub in_bands: usize,
    /// Inclusive side range; sides are drawn among multiples of `2^depth`.
    pub min_size: usize,
    pub max_size: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            trials: 100,
            depths: vec![1, 2, 3],
            seed: 0,
            in_bands: 10,
            min_size: 16,
            max_size: 64,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Seed from which the trial's model and input are drawn.
    pub seed: u64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub max_abs: f32,
}

impl TrialResult {
    pub fn passed(&self) -> bool {
        self.max_abs <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub trials: Vec<TrialResult>,
    pub max_abs: f32,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &TrialResult> {
        self.trials.iter().filter(|t| !t.passed())
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Runs the reference forward pass and the lowered program on `x` and returns both outputs.
pub fn run_both(cfg: &ModelConfig, p: &ParamSet, x: &Tensor, fault: Option<Fault>) -> Result<(Tensor, Tensor)> {
    let g = build_graph(cfg)?;
    let opts = LowerOptions {
        input_size: Some((x.height(), x.width())),
        fault,
    };
    let net = lower_network_with(&g, p, &opts)?;
    let reference = forward(x, &g, p)?;
    let inputs = [(INPUT_NAME.to_string(), GridImage::from_tensor(x, &[])?)].into();
    let lowered = interpret(&net.program, &inputs)?.to_tensor()?;
    Ok((reference, lowered))
}

fn draw_side(rng: &mut ChaCha8Rng, lo: usize, hi: usize, m: usize) -> Result<usize> {
    let (a, b) = (lo.div_ceil(m), hi / m);
    if a > b || b == 0 {
        return Err(Error::config(format!("no multiple of {m} lies in {lo}..={hi}")));
    }
    Ok(rng.gen_range(a.max(1)..=b) * m)
}

/// Runs `cfg.trials` trials. With `model`, every trial uses that model;
/// otherwise each draws a random model at the next depth in `cfg.depths`.
pub fn run_trials(cfg: &VerifyConfig, model: Option<(&ModelConfig, &ParamSet)>) -> Result<VerifyReport> {
    if cfg.trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    if model.is_none() && cfg.depths.is_empty() {
        return Err(Error::config("at least one depth is required"));
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size {
        return Err(Error::config(format!(
            "invalid size range {}..={}",
            cfg.min_size, cfg.max_size
        )));
    }
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let seed = cfg.seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_model;
        let (mc, p) = match model {
            Some((mc, p)) => (*mc, p),
            None => {
                let mc = ModelConfig {
                    in_bands: cfg.in_bands,
                    ..ModelConfig::with_depth(cfg.depths[t % cfg.depths.len()])
                };
                random_model = ParamSet::random(&mc, seed)?;
                (mc, &random_model)
            }
        };
        let m = mc.size_multiple();
        let (h, w) = (
            draw_side(&mut rng, cfg.min_size, cfg.max_size, m)?,
            draw_side(&mut rng, cfg.min_size, cfg.max_size, m)?,
        );
        let x = Tensor::from_fn(mc.in_bands, h, w, |_, _, _| rng.gen_range(0.0..1.0))?;
        let (reference, lowered) = run_both(&mc, p, &x, cfg.fault)?;
        trials.push(TrialResult {
            trial: t,
            seed,
            depth: mc.depth,
            height: h,
            width: w,
            max_abs: reference.max_abs_diff(&lowered),
        });
    }
    let max_abs = trials.iter().map(|t| t.max_abs).fold(0.0, f32::max);
    Ok(VerifyReport { trials, max_abs })
}
