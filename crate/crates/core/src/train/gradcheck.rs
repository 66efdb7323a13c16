//! Central finite-difference checks of the analytic gradients, in f64.
//!
//! Each check perturbs a whole tensor along a random direction `v` and
//! compares `grad . v` with `(L(x + h v) - L(x - h v)) / 2h`, where `v` has
//! unit RMS and `h` is [`STEP`] relative to the tensor's RMS. One check thus
//! covers every entry of the tensor at the cost of two loss evaluations.
//! The step is small enough that a perturbation of a random network rarely
//! moves a pre-activation across a PReLU kink or flips a max-pool winner;
//! at `1e-4` such crossings dominate the difference quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{build_graph, ModelConfig, ParamSet};
use crate::train::net::{loss, loss_and_grads};
use crate::train::ops::{
    bce_logits, bn_train_bwd, bn_train_fwd, concat_bwd, concat_fwd, conv_bwd, conv_fwd, pool_bwd, pool_fwd,
    prelu_bwd, prelu_fwd, upsample_bwd, upsample_fwd, Batch,
};

/// Relative step size of the central differences.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Compares `grad` with central differences of `f` around `x` along a random direction.
pub fn directional(
    name: impl Into<String>,
    x: &[f64],
    grad: &[f64],
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let v: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let h = STEP * rms(x).max(1e-2);
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, d)| a + s * h * d).collect() };
    let numeric = (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * h);
    GradCheck {
        name: name.into(),
        analytic: grad.iter().zip(&v).map(|(g, d)| g * d).sum(),
        numeric,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn with_data(b: &Batch<f64>, data: &[f64]) -> Batch<f64> {
    Batch {
        data: data.to_vec(),
        ..b.clone()
    }
}

/// `sum(r * out)`, the linear probe used for layers in isolation.
fn probe(r: &[f64], out: &Batch<f64>) -> f64 {
    r.iter().zip(&out.data).map(|(a, b)| a * b).sum()
}

/// Checks every layer kind in isolation against a random linear probe.
pub fn layer_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Convolution with bias.
    let x = Batch::from_fn(2, 3, 6, 5, |_| rng.gen_range(-1.0..1.0));
    let w = uniform(&mut rng, 4 * 3 * 9, -0.5, 0.5);
    let b = uniform(&mut rng, 4, -0.5, 0.5);
    let r = uniform(&mut rng, 2 * 4 * 30, -1.0, 1.0);
    let dout = Batch { c: 4, data: r.clone(), ..x.clone() };
    let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 4]);
    let dx = conv_bwd(&x, &w, &dout, 3, &mut dw, Some(&mut db), true).expect("requested");
    let f = |x: &Batch<f64>, w: &[f64], b: &[f64]| probe(&r, &conv_fwd(x, w, Some(b), 4, 3));
    out.push(directional("conv.weight", &w, &dw, &mut rng, |w| f(&x, w, &b)));
    out.push(directional("conv.bias", &b, &db, &mut rng, |b| f(&x, &w, b)));
    out.push(directional("conv.input", &x.data, &dx.data, &mut rng, |d| f(&with_data(&x, d), &w, &b)));

    // Training-mode batch norm.
    let z = Batch::from_fn(3, 4, 5, 5, |_| rng.gen_range(-2.0..2.0));
    let gamma = uniform(&mut rng, 4, 0.5, 1.5);
    let beta = uniform(&mut rng, 4, -0.5, 0.5);
    let r = uniform(&mut rng, z.data.len(), -1.0, 1.0);
    let (_, cache) = bn_train_fwd(&z, &gamma, &beta, 1e-5);
    let (mut dg, mut dbeta) = (vec![0.0; 4], vec![0.0; 4]);
    let dz = bn_train_bwd(&with_data(&z, &r), &cache, &gamma, &mut dg, &mut dbeta);
    let f = |z: &Batch<f64>, g: &[f64], b: &[f64]| probe(&r, &bn_train_fwd(z, g, b, 1e-5).0);
    out.push(directional("bn.gamma", &gamma, &dg, &mut rng, |g| f(&z, g, &beta)));
    out.push(directional("bn.beta", &beta, &dbeta, &mut rng, |b| f(&z, &gamma, b)));
    out.push(directional("bn.input", &z.data, &dz.data, &mut rng, |d| f(&with_data(&z, d), &gamma, &beta)));

    // PReLU.
    let y = Batch::from_fn(2, 3, 4, 4, |_| rng.gen_range(-1.0..1.0));
    let slope = uniform(&mut rng, 3, 0.0, 0.5);
    let r = uniform(&mut rng, y.data.len(), -1.0, 1.0);
    let mut ds = vec![0.0; 3];
    let dy = prelu_bwd(&y, &slope, &with_data(&y, &r), &mut ds);
    out.push(directional("prelu.slope", &slope, &ds, &mut rng, |s| probe(&r, &prelu_fwd(&y, s))));
    out.push(directional("prelu.input", &y.data, &dy.data, &mut rng, |d| {
        probe(&r, &prelu_fwd(&with_data(&y, d), &slope))
    }));

    // Max pooling and nearest upsampling.
    let x = Batch::from_fn(2, 2, 6, 4, |_| rng.gen_range(-1.0..1.0));
    let (pooled, arg) = pool_fwd(&x);
    let r = uniform(&mut rng, pooled.data.len(), -1.0, 1.0);
    let dx = pool_bwd(&with_data(&pooled, &r), &arg, x.h, x.w);
    out.push(directional("maxpool.input", &x.data, &dx.data, &mut rng, |d| {
        probe(&r, &pool_fwd(&with_data(&x, d)).0)
    }));
    let r = uniform(&mut rng, x.data.len() * 4, -1.0, 1.0);
    let up = upsample_fwd(&x);
    let dx = upsample_bwd(&with_data(&up, &r));
    out.push(directional("upsample.input", &x.data, &dx.data, &mut rng, |d| {
        probe(&r, &upsample_fwd(&with_data(&x, d)))
    }));

    // Concatenation.
    let a = Batch::from_fn(2, 2, 3, 3, |_| rng.gen_range(-1.0..1.0));
    let b = Batch::from_fn(2, 3, 3, 3, |_| rng.gen_range(-1.0..1.0));
    let r = uniform(&mut rng, 2 * 5 * 9, -1.0, 1.0);
    let (da, dbb) = concat_bwd(&with_data(&concat_fwd(&a, &b), &r), 2);
    out.push(directional("concat.first", &a.data, &da.data, &mut rng, |d| {
        probe(&r, &concat_fwd(&with_data(&a, d), &b))
    }));
    out.push(directional("concat.second", &b.data, &dbb.data, &mut rng, |d| {
        probe(&r, &concat_fwd(&a, &with_data(&b, d)))
    }));

    // Cross-entropy on logits.
    let z = uniform(&mut rng, 50, -4.0, 4.0);
    let m: Vec<u8> = (0..50).map(|_| rng.gen_bool(0.4) as u8).collect();
    let (_, dz) = bce_logits(&z, &m);
    out.push(directional("bce.logits", &z, &dz, &mut rng, |z| bce_logits(z, &m).0));
    out
}

/// Checks every trainable tensor of a random network end to end in training mode.
pub fn network_checks(depth: usize, size: usize, batch: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = ModelConfig::with_depth(depth);
    let g = build_graph(&cfg)?;
    let specs = ParamSet::registry(&cfg)?;
    let params: Vec<Vec<f64>> = ParamSet::random(&cfg, seed)?
        .to_flat()
        .into_iter()
        .map(|t| t.into_iter().map(f64::from).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let x = Batch::from_fn(batch, cfg.in_bands, size, size, |_| rng.gen_range(0.0..1.0));
    let masks: Vec<u8> = (0..batch * size * size).map(|_| rng.gen_bool(0.4) as u8).collect();
    let step = loss_and_grads(&g, &params, x.clone(), &masks)?;
    let mut out = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        if !s.role.trainable() {
            continue;
        }
        let mut trial = params.clone();
        out.push(directional(s.name.clone(), &params[i], &step.grads[i], &mut rng, |t| {
            trial[i].copy_from_slice(t);
            loss(&g, &trial, x.clone(), &masks).expect("shapes already checked")
        }));
    }
    Ok(out)
}
