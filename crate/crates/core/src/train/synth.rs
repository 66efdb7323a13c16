//! Seeded synthetic scenes standing in for calibrated 10-band patches.
//!
//! Terrain is two smooth value-noise fields, "greenness" `v` and
//! "brightness" `s`, mixed per band into plausible clear-sky reflectances
//! (about 0.03 to 0.35) and warm brightness temperatures (scaled to about
//! 0.55 to 0.85). Clouds are random ellipses added one at a time until a
//! per-patch cloud-fraction target drawn from [0.25, 0.5] is reached without
//! exceeding 0.6. Inside an ellipse every band takes the cloud signature
//! (bright in the optical bands, cold in the thermal ones) times a
//! low-amplitude texture, and the mask is exactly the union of the ellipses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::MaskImage;
use crate::tensor::Tensor;
use crate::train::LabeledPatch;

/// Band order of the synthetic (and expected real) inputs.
pub const BAND_NAMES: [&str; 10] = [
    "coastal", "blue", "green", "red", "nir", "swir1", "swir2", "cirrus", "tir1", "tir2",
];

/// Clear-sky band value as `base + v_gain * v + s_gain * s`.
const TERRAIN: [(f32, f32, f32); 10] = [
    (0.08, -0.01, 0.06),
    (0.06, -0.01, 0.08),
    (0.05, 0.02, 0.10),
    (0.04, -0.03, 0.14),
    (0.12, 0.20, 0.03),
    (0.10, -0.02, 0.15),
    (0.05, -0.02, 0.12),
    (0.004, 0.0, 0.01),
    (0.62, -0.05, 0.18),
    (0.60, -0.05, 0.17),
];

const CLOUD: [f32; 10] = [0.70, 0.72, 0.70, 0.70, 0.72, 0.55, 0.40, 0.08, 0.30, 0.28];

/// Relative amplitude of the in-cloud texture.
const CLOUD_TEXTURE: f32 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub cap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_fraction: 0.25,
            max_fraction: 0.5,
            cap: 0.6,
        }
    }
}

/// Smooth field in [0, 1]: random lattice values with smoothstep interpolation.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let n = size / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (gy, ty) = (y / cell, smooth((y % cell) as f32 / cell as f32));
        for x in 0..size {
            let (gx, tx) = (x / cell, smooth((x % cell) as f32 / cell as f32));
            let at = |j: usize, i: usize| lattice[j * n + i];
            let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
            let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn ellipse(rng: &mut ChaCha8Rng, size: usize) -> impl Fn(usize, usize) -> bool {
    let s = size as f32;
    let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let (a, b) = (rng.gen_range(s / 10.0..s / 4.0), rng.gen_range(s / 10.0..s / 4.0));
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let (sin, cos) = theta.sin_cos();
    move |y, x| {
        let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
        let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

fn cloud_support(rng: &mut ChaCha8Rng, size: usize, cfg: &SynthConfig) -> Vec<bool> {
    let target = rng.gen_range(cfg.min_fraction..cfg.max_fraction);
    let total = (size * size) as f64;
    let mut mask = vec![false; size * size];
    let mut covered = 0usize;
    for _ in 0..64 {
        if covered as f64 / total >= target {
            break;
        }
        let inside = ellipse(rng, size);
        let mut next = mask.clone();
        let mut added = 0;
        for (i, m) in next.iter_mut().enumerate() {
            if !*m && inside(i / size, i % size) {
                *m = true;
                added += 1;
            }
        }
        if (covered + added) as f64 / total <= cfg.cap {
            mask = next;
            covered += added;
        }
    }
    mask
}

fn patch(rng: &mut ChaCha8Rng, size: usize, cfg: &SynthConfig) -> Result<LabeledPatch> {
    let cell = (size / 4).max(2);
    let v = value_noise(rng, size, cell);
    let s = value_noise(rng, size, cell);
    let texture = value_noise(rng, size, (size / 8).max(2));
    let support = cloud_support(rng, size, cfg);
    let px = size * size;
    let mut data = Vec::with_capacity(BAND_NAMES.len() * px);
    for (b, &(base, vg, sg)) in TERRAIN.iter().enumerate() {
        data.extend((0..px).map(|i| {
            if support[i] {
                CLOUD[b] * (1.0 + CLOUD_TEXTURE * (2.0 * texture[i] - 1.0))
            } else {
                base + vg * v[i] + sg * s[i]
            }
        }));
    }
    let bands = Tensor::new(BAND_NAMES.len(), size, size, data)?;
    let mask = MaskImage::new(size, size, support.iter().map(|&m| m as u8).collect())?;
    LabeledPatch::new(bands, mask)
}

/// `n` seeded `10 x patch x patch` scenes with their cloud masks.
pub fn synth_dataset(n: usize, patch_size: usize, seed: u64) -> Result<Vec<LabeledPatch>> {
    synth_dataset_with(n, patch_size, seed, &SynthConfig::default())
}

pub fn synth_dataset_with(n: usize, patch_size: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<LabeledPatch>> {
    if patch_size < 4 {
        return Err(Error::config(format!("patch size must be at least 4, got {patch_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| patch(&mut rng, patch_size, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_properties() {
        let data = synth_dataset(20, 64, 7).unwrap();
        assert_eq!(data, synth_dataset(20, 64, 7).unwrap());
        let clouds: usize = data.iter().map(|p| p.mask.cloud_pixels()).sum();
        let frac = clouds as f64 / (20.0 * 64.0 * 64.0);
        assert!((0.2..=0.6).contains(&frac), "cloud fraction {frac}");
        for p in &data {
            for (i, &m) in p.mask.values().iter().enumerate() {
                let bright = p.bands.plane(1)[i];
                assert_eq!(m == 1, bright > 0.5, "mask must be the injected support");
            }
        }
    }
}
