//! Binary cloud masks, the confusion-matrix accuracy measures, and square
//! (Chebyshev) dilation of masks.
//!
//! Cloud is the positive class. With `N = tp + fp + fn + tn`:
//!
//! | measure | definition |
//! |---------|------------|
//! | `oa` | `(tp + tn) / N` |
//! | `commission` | `fp / (tp + fp)`, the false-cloud share of predicted cloud |
//! | `omission` | `fn / (tp + fn)`, the missed share of reference cloud |
//! | `iou_cloud` | `tp / (tp + fp + fn)` |
//! | `iou_clear` | `tn / (tn + fp + fn)` |
//! | `miou` | mean of `iou_cloud` and `iou_clear` |
//!
//! A zero denominator makes a measure undefined (`None`), never zero. `miou`
//! averages whichever class IoUs are defined.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A binary mask; 1 is cloud, 0 is clear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("mask dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::dim(format!("mask value {} at {i} is not 0 or 1", values[i])));
        }
        Ok(MaskImage { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let values = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn cloud_pixels(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Crops the `h x w` window at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim("crop window exceeds the mask"));
        }
        Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }
}

/// Cloud wherever `prob >= t`.
pub fn threshold(prob: &Tensor, t: f32) -> Result<MaskImage> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("threshold must lie in [0, 1], got {t}")));
    }
    if prob.channels() != 1 {
        return Err(Error::dim(format!(
            "probability raster must have one band, got {}",
            prob.channels()
        )));
    }
    if let Some(v) = prob.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::NumericDomain(format!("probability {v} outside [0, 1]")));
    }
    MaskImage::new(
        prob.height(),
        prob.width(),
        prob.data().iter().map(|&p| (p >= t) as u8).collect(),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &MaskImage, reference: &MaskImage) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (reference.height, reference.width) {
        return Err(Error::dim(format!(
            "prediction is {}x{}, reference is {}x{}",
            pred.height, pred.width, reference.height, reference.width
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &r) in pred.values.iter().zip(&reference.values) {
        match (p, r) {
            (1, 1) => cm.tp += 1,
            (1, _) => cm.fp += 1,
            (_, 1) => cm.fn_ += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub counts: ConfusionMatrix,
    pub oa: f64,
    pub commission: Option<f64>,
    pub omission: Option<f64>,
    pub iou_cloud: Option<f64>,
    pub iou_clear: Option<f64>,
    pub miou: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::dim("no pixels to evaluate"));
    }
    let iou_cloud = ratio(cm.tp, cm.tp + cm.fp + cm.fn_);
    let iou_clear = ratio(cm.tn, cm.tn + cm.fp + cm.fn_);
    let defined: Vec<f64> = [iou_cloud, iou_clear].into_iter().flatten().collect();
    Ok(MetricReport {
        counts: *cm,
        oa: (cm.tp + cm.tn) as f64 / n as f64,
        commission: ratio(cm.fp, cm.tp + cm.fp),
        omission: ratio(cm.fn_, cm.tp + cm.fn_),
        iou_cloud,
        iou_clear,
        miou: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
    })
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

/// `name: value  # definition` lines, counts first.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.counts;
        writeln!(f, "pixels: {}", c.total())?;
        writeln!(f, "tp: {}  # predicted cloud, reference cloud", c.tp)?;
        writeln!(f, "fp: {}  # predicted cloud, reference clear", c.fp)?;
        writeln!(f, "fn: {}  # predicted clear, reference cloud", c.fn_)?;
        writeln!(f, "tn: {}  # predicted clear, reference clear", c.tn)?;
        writeln!(f, "oa: {:.6}  # (tp + tn) / (tp + fp + fn + tn)", self.oa)?;
        writeln!(f, "commission: {}  # fp / (tp + fp)", show(self.commission))?;
        writeln!(f, "omission: {}  # fn / (tp + fn)", show(self.omission))?;
        writeln!(f, "iou_cloud: {}  # tp / (tp + fp + fn)", show(self.iou_cloud))?;
        writeln!(f, "iou_clear: {}  # tn / (tn + fp + fn)", show(self.iou_clear))?;
        writeln!(f, "miou: {}  # mean of the defined iou_cloud and iou_clear", show(self.miou))
    }
}

/// Running-window OR along one axis: `out[i]` is set when any of `src[i-r..=i+r]` is.
fn dilate_line(src: impl Iterator<Item = u8>, len: usize, r: usize, out: &mut Vec<u8>) {
    let mut prefix = Vec::with_capacity(len + 1);
    prefix.push(0usize);
    for v in src {
        prefix.push(prefix.last().unwrap() + v as usize);
    }
    out.clear();
    out.extend((0..len).map(|i| {
        let (lo, hi) = (i.saturating_sub(r), (i + r + 1).min(len));
        (prefix[hi] > prefix[lo]) as u8
    }));
}

/// Cloud wherever any cloud pixel lies within Chebyshev distance `r`.
///
/// The square structuring element is separable, so rows and then columns are
/// dilated independently.
pub fn dilate_chebyshev(mask: &MaskImage, r: usize) -> MaskImage {
    let (h, w) = (mask.height, mask.width);
    let mut rows = vec![0u8; h * w];
    let mut line = Vec::new();
    for y in 0..h {
        dilate_line(mask.values[y * w..(y + 1) * w].iter().copied(), w, r, &mut line);
        rows[y * w..(y + 1) * w].copy_from_slice(&line);
    }
    let mut out = vec![0u8; h * w];
    for x in 0..w {
        dilate_line((0..h).map(|y| rows[y * w + x]), h, r, &mut line);
        for (y, &v) in line.iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    MaskImage { height: h, width: w, values: out }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> MaskImage {
        MaskImage::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn worked_example() {
        let cm = confusion(&mask(1, 4, &[1, 1, 0, 0]), &mask(1, 4, &[1, 0, 0, 0])).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 1, fn_: 0, tn: 2 });
        let r = report(&cm).unwrap();
        assert_eq!(r.oa, 0.75);
        assert_eq!(r.commission, Some(0.5));
        assert_eq!(r.omission, Some(0.0));
        assert_eq!(r.iou_cloud, Some(0.5));
        assert!((r.iou_clear.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.miou.unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_inverted_and_undefined() {
        let m = mask(2, 2, &[1, 0, 0, 1]);
        let r = report(&confusion(&m, &m).unwrap()).unwrap();
        assert_eq!((r.oa, r.miou, r.commission, r.omission), (1.0, Some(1.0), Some(0.0), Some(0.0)));
        let inv = mask(2, 2, &[0, 1, 1, 0]);
        let cm = confusion(&inv, &m).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
        let clear = mask(2, 2, &[0; 4]);
        let r = report(&confusion(&clear, &clear).unwrap()).unwrap();
        assert_eq!((r.oa, r.commission, r.omission, r.iou_cloud), (1.0, None, None, None));
        assert_eq!(r.miou, Some(1.0));
        assert!(r.to_string().contains("commission: undefined"));
        assert!(report(&ConfusionMatrix::default()).is_err());
        assert!(confusion(&m, &mask(1, 4, &[0; 4])).is_err());
    }

    #[test]
    fn report_text_is_pinned() {
        let r = report(&ConfusionMatrix { tp: 1, fp: 1, fn_: 0, tn: 2 }).unwrap();
        let want = "\
pixels: 4
tp: 1  # predicted cloud, reference cloud
fp: 1  # predicted cloud, reference clear
fn: 0  # predicted clear, reference cloud
tn: 2  # predicted clear, reference clear
oa: 0.750000  # (tp + tn) / (tp + fp + fn + tn)
commission: 0.500000  # fp / (tp + fp)
omission: 0.000000  # fn / (tp + fn)
iou_cloud: 0.500000  # tp / (tp + fp + fn)
iou_clear: 0.666667  # tn / (tn + fp + fn)
miou: 0.583333  # mean of the defined iou_cloud and iou_clear
";
        assert_eq!(r.to_string(), want);
    }

    #[test]
    fn threshold_rules() {
        let p = Tensor::new(1, 1, 3, vec![0.5, 0.49, 1.0]).unwrap();
        assert_eq!(threshold(&p, 0.5).unwrap().values(), &[1, 0, 1]);
        assert_eq!(threshold(&p, 0.0).unwrap().cloud_pixels(), 3);
        assert!(threshold(&p, 1.01).is_err());
        assert!(threshold(&p, -0.1).is_err());
        let bad = Tensor::new(1, 1, 1, vec![1.5]).unwrap();
        assert!(threshold(&bad, 0.5).is_err());
    }

    #[test]
    fn dilation_geometry() {
        let seed = MaskImage::from_fn(9, 9, |y, x| y == 4 && x == 4).unwrap();
        let d = dilate_chebyshev(&seed, 3);
        assert_eq!(d, MaskImage::from_fn(9, 9, |y, x| (1..=7).contains(&y) && (1..=7).contains(&x)).unwrap());
        let corner = MaskImage::from_fn(5, 5, |y, x| y == 0 && x == 0).unwrap();
        assert_eq!(dilate_chebyshev(&corner, 3).cloud_pixels(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MaskImage::from_fn(7, 5, |_, _| rng.gen_bool(0.3)).unwrap();
        assert_eq!(dilate_chebyshev(&m, 0), m);
    }

    #[test]
    fn mask_invariants() {
        assert!(MaskImage::new(1, 2, vec![0, 2]).is_err());
        assert!(MaskImage::new(1, 2, vec![0]).is_err());
        assert!(MaskImage::new(0, 2, vec![]).is_err());
    }
}
