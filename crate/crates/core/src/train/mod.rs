//! From-scratch training: batched forward/backward through every layer,
//! binary cross-entropy on the logit, and Adam.
//!
//! Training runs in f32 storage; convolutions use f32 matrix multiplies while
//! every other reduction is accumulated in f64. The same generic code runs in
//! f64 for gradient checking.

pub mod gradcheck;
pub mod net;
pub mod ops;
mod synth;

pub use net::{backward_train, forward_train, loss_and_grads, BnStat, Step, Tape};
pub use ops::Batch;
pub use synth::{synth_dataset, synth_dataset_with, SynthConfig, BAND_NAMES};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::Real;
use crate::metrics::{confusion, report, threshold, ConfusionMatrix, MaskImage};
use crate::model::{GraphSpec, ModelConfig, ParamRole, ParamSet};
use crate::tensor::Tensor;

/// PReLU negative slope used at initialization and in the He scaling.
pub const INIT_SLOPE: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    /// Stop once the inference-mode accuracy over the dataset reaches this.
    pub target_oa: Option<f64>,
    /// Record the inference-mode accuracy after every epoch.
    pub evaluate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 10,
            patch_size: 64,
            epochs: 300,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            target_oa: None,
            evaluate: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config(format!("bad batch-norm momentum {}", self.bn_momentum)));
        }
        if self.target_oa.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::config("target accuracy must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A training example: `in_bands x p x p` values and the matching binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub bands: Tensor,
    pub mask: MaskImage,
}

impl LabeledPatch {
    pub fn new(bands: Tensor, mask: MaskImage) -> Result<Self> {
        if (bands.height(), bands.width()) != (mask.height(), mask.width()) {
            return Err(Error::dim(format!(
                "bands are {}x{}, mask is {}x{}",
                bands.height(),
                bands.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(LabeledPatch { bands, mask })
    }
}

/// He-style normal kernels with variance `2 / ((1 + a^2) fan_in)`, identity
/// batch norm, PReLU slopes `a = 0.25`, zero head bias.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = INIT_SLOPE as f64;
    let flat = ParamSet::registry(cfg)?
        .iter()
        .map(|s| match s.role {
            ParamRole::ConvWeight => {
                let fan_in = s.shape[1..].iter().product::<usize>() as f64;
                let std = (2.0 / ((1.0 + a * a) * fan_in)).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..s.len()).map(|_| normal.sample(&mut rng) as f32).collect()
            }
            ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; s.len()],
            ParamRole::Beta | ParamRole::RunningMean | ParamRole::Bias => vec![0.0; s.len()],
            ParamRole::Slope => vec![INIT_SLOPE; s.len()],
        })
        .collect();
    ParamSet::from_flat(cfg, flat)
}

fn to_batch<T: Real>(patches: &[&LabeledPatch]) -> (Batch<T>, Vec<u8>) {
    let b0 = &patches[0].bands;
    let mut data = Vec::with_capacity(patches.len() * b0.data().len());
    let mut masks = Vec::with_capacity(patches.len() * b0.plane_len());
    for p in patches {
        data.extend(p.bands.data().iter().map(|&v| T::of_f64(v as f64)));
        masks.extend_from_slice(p.mask.values());
    }
    let batch = Batch {
        n: patches.len(),
        c: b0.channels(),
        h: b0.height(),
        w: b0.width(),
        data,
    };
    (batch, masks)
}

fn check_patches(cfg: &ModelConfig, patches: &[&LabeledPatch]) -> Result<()> {
    let first = patches.first().ok_or_else(|| Error::config("no training patches"))?;
    let dims = (first.bands.channels(), first.bands.height(), first.bands.width());
    if patches
        .iter()
        .any(|p| (p.bands.channels(), p.bands.height(), p.bands.width()) != dims)
    {
        return Err(Error::dim("all patches must share band count and size"));
    }
    if dims.0 != cfg.in_bands {
        return Err(Error::dim(format!("model expects {} bands, patches have {}", cfg.in_bands, dims.0)));
    }
    let m = cfg.size_multiple();
    if dims.1 % m != 0 || dims.2 % m != 0 {
        return Err(Error::dim(format!("patch {}x{} is not divisible by {m}", dims.1, dims.2)));
    }
    Ok(())
}

/// Gradients of the mean loss over a batch, with that batch's BN statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// One tensor per registry entry; running statistics are zero.
    pub tensors: Vec<Vec<f32>>,
    pub bn_stats: Vec<BnStat>,
}

/// Training-mode forward and backward pass over `batch`.
pub fn backward(batch: &[LabeledPatch], g: &GraphSpec, p: &ParamSet) -> Result<Gradients> {
    let refs: Vec<&LabeledPatch> = batch.iter().collect();
    check_patches(g.config(), &refs)?;
    p.check(g.config())?;
    let (x, masks) = to_batch::<f32>(&refs);
    let step = loss_and_grads(g, &p.to_flat(), x, &masks)?;
    Ok(Gradients {
        loss: step.loss,
        tensors: step.grads,
        bn_stats: step.bn_stats,
    })
}

/// First and second moment estimates per scalar, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let zeros: Vec<Vec<f32>> = ParamSet::registry(cfg)?.iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }
}

/// Bias-corrected Adam on the trainable tensors of flat `params`.
fn adam_update(params: &mut [Vec<f32>], grads: &[Vec<f32>], trainable: &[bool], st: &mut AdamState, cfg: &TrainConfig) {
    st.step += 1;
    let t = st.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, ((p, g), &train)) in params.iter_mut().zip(grads).zip(trainable).enumerate() {
        if !train {
            continue;
        }
        for (j, (p, &g)) in p.iter_mut().zip(g).enumerate() {
            let g = g as f64;
            let m = b1 * st.m[i][j] as f64 + (1.0 - b1) * g;
            let v = b2 * st.v[i][j] as f64 + (1.0 - b2) * g * g;
            st.m[i][j] = m as f32;
            st.v[i][j] = v as f32;
            let update = cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
            *p = (*p as f64 - update) as f32;
        }
    }
}

/// One Adam step over every trainable tensor of `p`.
pub fn adam_step(
    p: &ParamSet,
    grads: &Gradients,
    st: &mut AdamState,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    let specs = ParamSet::registry(model)?;
    let mut flat = p.to_flat();
    if grads.tensors.len() != flat.len() || st.m.len() != flat.len() {
        return Err(Error::ParamMismatch("gradient or optimizer state does not match the model".into()));
    }
    let trainable: Vec<bool> = specs.iter().map(|s| s.role.trainable()).collect();
    adam_update(&mut flat, &grads.tensors, &trainable, st, cfg);
    ParamSet::from_flat(model, flat)
}

/// Momentum update of running mean and (unbiased) running variance.
fn update_running(params: &mut [Vec<f32>], stats: &[BnStat], momentum: f64) {
    for s in stats {
        let correction = s.count as f64 / (s.count.max(2) - 1) as f64;
        for c in 0..s.mean.len() {
            let rm = &mut params[s.mean_tensor][c];
            *rm = ((1.0 - momentum) * *rm as f64 + momentum * s.mean[c]) as f32;
            let rv = &mut params[s.mean_tensor + 1][c];
            *rv = ((1.0 - momentum) * *rv as f64 + momentum * s.var[c] * correction) as f32;
        }
    }
}

/// Per-epoch record: mean batch loss and accuracy of that epoch's predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode logits (batch statistics) seen while stepping.
    pub oa: f64,
    /// Accuracy of the end-of-epoch model in inference mode over the whole
    /// dataset, when evaluation is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_oa: Option<f64>,
}

/// Overall accuracy of inference-mode predictions (probability >= 0.5) over `dataset`.
pub fn evaluate_oa(dataset: &[LabeledPatch], model: &ModelConfig, params: &ParamSet) -> Result<f64> {
    let g = crate::model::build_graph(model)?;
    let mut cm = ConfusionMatrix::default();
    for p in dataset {
        let prob = crate::model::forward(&p.bands, &g, params)?;
        cm = cm + confusion(&threshold(&prob, 0.5)?, &p.mask)?;
    }
    Ok(report(&cm)?.oa)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<EpochLog>,
}

/// Trains from a seeded initialization over shuffled minibatches.
///
/// Each epoch's `oa` is measured on the training-mode predictions made
/// while stepping through that epoch. When `evaluate` or `target_oa` is set,
/// the end-of-epoch model is also evaluated in inference mode, and training
/// stops once that accuracy reaches `target_oa`. `on_epoch` sees every record
/// as it is produced.
pub fn train(
    dataset: &[LabeledPatch],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let g = crate::model::build_graph(model)?;
    let refs: Vec<&LabeledPatch> = dataset.iter().collect();
    check_patches(model, &refs)?;
    let specs = ParamSet::registry(model)?;
    let trainable: Vec<bool> = specs.iter().map(|s| s.role.trainable()).collect();
    let mut params = init_params(model, cfg.seed)?.to_flat();
    let mut adam = AdamState::new(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut cm = ConfusionMatrix::default();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledPatch> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, masks) = to_batch::<f32>(&batch);
            let step = loss_and_grads(&g, &params, x, &masks)?;
            for (&z, &m) in step.logits.data.iter().zip(&masks) {
                match (z >= 0.0, m == 1) {
                    (true, true) => cm.tp += 1,
                    (true, false) => cm.fp += 1,
                    (false, true) => cm.fn_ += 1,
                    (false, false) => cm.tn += 1,
                }
            }
            loss_sum += step.loss * chunk.len() as f64;
            adam_update(&mut params, &step.grads, &trainable, &mut adam, cfg);
            update_running(&mut params, &step.bn_stats, cfg.bn_momentum);
        }
        let eval_oa = if cfg.evaluate || cfg.target_oa.is_some() {
            let current = ParamSet::from_flat(model, params.clone())?;
            Some(evaluate_oa(dataset, model, &current)?)
        } else {
            None
        };
        let record = EpochLog {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            oa: report(&cm)?.oa,
            eval_oa,
        };
        on_epoch(&record);
        log.push(record);
        if cfg.target_oa.zip(eval_oa).is_some_and(|(t, oa)| oa >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        params: ParamSet::from_flat(model, params)?,
        log,
    })
}

/// Mean binary cross-entropy of probabilities against a mask, evaluated from
/// the logit `ln(p / (1 - p))` in the stable form.
pub fn loss_bce(prob: &Tensor, mask: &MaskImage) -> Result<f64> {
    if prob.channels() != 1 || (prob.height(), prob.width()) != (mask.height(), mask.width()) {
        return Err(Error::dim("probability map and mask must be single-band and equally sized"));
    }
    if let Some(p) = prob.data().iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::NumericDomain(format!("probability {p} outside (0, 1)")));
    }
    let logits: Vec<f64> = prob
        .data()
        .iter()
        .map(|&p| {
            let p = p as f64;
            p.ln() - (-p).ln_1p()
        })
        .collect();
    Ok(ops::bce_logits(&logits, mask.values()).0)
}
