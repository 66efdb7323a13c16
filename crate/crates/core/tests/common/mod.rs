//! Oracles and fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::path::PathBuf;

use cloudlift::emit::{emit, EmitOptions, EmittedBundle};
use cloudlift::metrics::MaskImage;
use cloudlift::model::{build_graph, ModelConfig, ParamSet};
use rand::Rng;

pub const GOLDEN_SNAPSHOT: &str = "emit_depth1.snap";

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// The depth-1 model whose fully inlined script is kept as a golden snapshot.
pub fn tiny_bundle() -> EmittedBundle {
    let cfg = ModelConfig::with_depth(1);
    let p = ParamSet::random(&cfg, 0).unwrap();
    let opts = EmitOptions {
        inline_threshold: None,
        ..EmitOptions::default()
    };
    emit(&build_graph(&cfg).unwrap(), &p, &opts).unwrap()
}

/// Straight-line metric formulas over per-pixel counts, independent of the library.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMetrics {
    pub oa: f64,
    pub commission: Option<f64>,
    pub omission: Option<f64>,
    pub miou: Option<f64>,
}

pub fn oracle_metrics(pred: &[u8], reference: &[u8]) -> OracleMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &r) in pred.iter().zip(reference) {
        match (p, r) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => tn += 1.0,
        }
    }
    let div = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
    let ious: Vec<f64> = [div(tp, tp + fp + fn_), div(tn, tn + fp + fn_)].into_iter().flatten().collect();
    OracleMetrics {
        oa: (tp + tn) / (tp + fp + fn_ + tn),
        commission: div(fp, tp + fp),
        omission: div(fn_, tp + fn_),
        miou: if ious.is_empty() { None } else { Some(ious.iter().sum::<f64>() / ious.len() as f64) },
    }
}

/// Closeness of two optional metrics; both must be undefined or both within `tol`.
pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

/// Brute-force dilation: a pixel is cloud when any cloud pixel lies within
/// Chebyshev distance `r`.
pub fn chebyshev_oracle(m: &MaskImage, r: usize) -> Vec<u8> {
    let (h, w) = (m.height(), m.width());
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = (y.saturating_sub(r)..(y + r + 1).min(h))
                .any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| m.get(yy, xx)));
            out[y * w + x] = hit as u8;
        }
    }
    out
}

/// Random mask with a random size in `1..=max_side` and cloud fraction.
pub fn random_mask(rng: &mut impl Rng, max_side: usize) -> MaskImage {
    let (h, w) = (rng.gen_range(1..=max_side), rng.gen_range(1..=max_side));
    random_mask_sized(rng, h, w)
}

pub fn random_mask_sized(rng: &mut impl Rng, h: usize, w: usize) -> MaskImage {
    let fraction: f64 = rng.gen_range(0.0..0.3);
    let values = (0..h * w).map(|_| rng.gen_bool(fraction) as u8).collect();
    MaskImage::new(h, w, values).unwrap()
}
