//! Batched forward and backward kernels for every layer, generic over the
//! element type so the same code trains in f32 and is gradient-checked in f64.
//!
//! Reductions (batch-norm statistics, bias and slope gradients, the loss) are
//! accumulated in f64 regardless of the element type.

use crate::gemm::{conv_backward, conv_forward, ConvShape, Real};

/// `n` samples of `c x h x w` maps, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Batch {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_fn(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize) -> T) -> Self {
        Batch {
            n,
            c,
            h,
            w,
            data: (0..n * c * h * w).map(&mut f).collect(),
        }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Plane `ch` of sample `i`.
    pub fn plane(&self, i: usize, ch: usize) -> &[T] {
        let p = self.plane_len();
        let start = (i * self.c + ch) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, i: usize, ch: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (i * self.c + ch) * p;
        &mut self.data[start..start + p]
    }

    pub fn add_assign(&mut self, other: &Batch<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }
}

fn conv_shape<T: Real>(x: &Batch<T>, out_ch: usize, k: usize) -> ConvShape {
    ConvShape {
        in_ch: x.c,
        out_ch,
        height: x.h,
        width: x.w,
        k,
    }
}

/// "Same" convolution of every sample; weights are `out_ch x c x k x k`.
pub fn conv_fwd<T: Real>(x: &Batch<T>, w: &[T], bias: Option<&[T]>, out_ch: usize, k: usize) -> Batch<T> {
    let s = conv_shape(x, out_ch, k);
    let mut out = Batch::zeros(x.n, out_ch, x.h, x.w);
    for i in 0..x.n {
        conv_forward(s, x.sample(i), |v| v, w, bias, out.sample_mut(i));
    }
    out
}

/// Accumulates weight (and bias) gradients; returns the input gradient when asked.
pub fn conv_bwd<T: Real>(
    x: &Batch<T>,
    w: &[T],
    dout: &Batch<T>,
    k: usize,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Batch<T>> {
    let s = conv_shape(x, dout.c, k);
    let mut dx = want_dx.then(|| Batch::zeros(x.n, x.c, x.h, x.w));
    for i in 0..x.n {
        conv_backward(
            s,
            x.sample(i),
            w,
            dout.sample(i),
            dw,
            db.as_deref_mut(),
            dx.as_mut().map(|d| d.sample_mut(i)),
        );
    }
    dx
}

/// What batch-norm backward needs from its forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Batch<T>,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance per channel.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl<T> BnCache<T> {
    /// Elements per channel entering the statistics.
    pub fn count(&self) -> usize
    where
        T: Real,
    {
        self.xhat.n * self.xhat.plane_len()
    }
}

/// Training-mode batch norm: statistics over samples and pixels per channel.
pub fn bn_train_fwd<T: Real>(z: &Batch<T>, gamma: &[T], beta: &[T], eps: f64) -> (Batch<T>, BnCache<T>) {
    let m = (z.n * z.plane_len()) as f64;
    let mut y = z.clone();
    let mut xhat = z.clone();
    let (mut means, mut vars, mut inv) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..z.c {
        let mean = (0..z.n)
            .map(|i| z.plane(i, c).iter().map(|v| v.as_f64()).sum::<f64>())
            .sum::<f64>()
            / m;
        let var = (0..z.n)
            .map(|i| z.plane(i, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / m;
        let inv_std = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma[c].as_f64(), beta[c].as_f64());
        for i in 0..z.n {
            for (xh, yv) in xhat.plane_mut(i, c).iter_mut().zip(y.plane_mut(i, c)) {
                let v = (xh.as_f64() - mean) * inv_std;
                *xh = T::of_f64(v);
                *yv = T::of_f64(g * v + b);
            }
        }
        means.push(mean);
        vars.push(var);
        inv.push(inv_std);
    }
    (
        y,
        BnCache {
            xhat,
            inv_std: inv,
            mean: means,
            var: vars,
        },
    )
}

pub fn bn_train_bwd<T: Real>(
    dy: &Batch<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Batch<T> {
    let xh = &cache.xhat;
    let m = cache.count() as f64;
    let mut dz = dy.clone();
    for c in 0..dy.c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
        for i in 0..dy.n {
            for (&d, &x) in dy.plane(i, c).iter().zip(xh.plane(i, c)) {
                sum_dy += d.as_f64();
                sum_dy_xh += d.as_f64() * x.as_f64();
            }
        }
        dgamma[c] += T::of_f64(sum_dy_xh);
        dbeta[c] += T::of_f64(sum_dy);
        let scale = gamma[c].as_f64() * cache.inv_std[c] / m;
        for i in 0..dy.n {
            for (d, &x) in dz.plane_mut(i, c).iter_mut().zip(xh.plane(i, c)) {
                *d = T::of_f64(scale * (m * d.as_f64() - sum_dy - x.as_f64() * sum_dy_xh));
            }
        }
    }
    dz
}

pub fn prelu_fwd<T: Real>(y: &Batch<T>, slope: &[T]) -> Batch<T> {
    let mut out = y.clone();
    for i in 0..y.n {
        for (c, &a) in slope.iter().enumerate() {
            out.plane_mut(i, c).iter_mut().for_each(|v| {
                if *v <= T::zero() {
                    *v = a * *v
                }
            });
        }
    }
    out
}

/// Input gradient; slope gradients are accumulated into `dslope`.
pub fn prelu_bwd<T: Real>(y: &Batch<T>, slope: &[T], dout: &Batch<T>, dslope: &mut [T]) -> Batch<T> {
    let mut dy = dout.clone();
    for (c, &a) in slope.iter().enumerate() {
        let mut ds = 0.0f64;
        for i in 0..y.n {
            for (d, &v) in dy.plane_mut(i, c).iter_mut().zip(y.plane(i, c)) {
                if v <= T::zero() {
                    ds += d.as_f64() * v.as_f64();
                    *d = *d * a;
                }
            }
        }
        dslope[c] += T::of_f64(ds);
    }
    dy
}

/// 2x2 max pooling; also returns, per output element, the flat input index of
/// the maximum (the first one in row-major order on ties).
pub fn pool_fwd<T: Real>(x: &Batch<T>) -> (Batch<T>, Vec<usize>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Batch::zeros(x.n, x.c, oh, ow);
    let mut arg = Vec::with_capacity(out.data.len());
    let mut k = 0;
    for plane in 0..x.n * x.c {
        let base = plane * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                out.data[k] = x.data[best];
                arg.push(best);
                k += 1;
            }
        }
    }
    (out, arg)
}

pub fn pool_bwd<T: Real>(dout: &Batch<T>, arg: &[usize], h: usize, w: usize) -> Batch<T> {
    let mut dx = Batch::zeros(dout.n, dout.c, h, w);
    for (&d, &i) in dout.data.iter().zip(arg) {
        dx.data[i] += d;
    }
    dx
}

pub fn upsample_fwd<T: Real>(x: &Batch<T>) -> Batch<T> {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Batch::zeros(x.n, x.c, oh, ow);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

/// Sums each 2x2 block of the output gradient.
pub fn upsample_bwd<T: Real>(dout: &Batch<T>) -> Batch<T> {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Batch::zeros(dout.n, dout.c, h, w);
    for plane in 0..dout.n * dout.c {
        let src = &dout.data[plane * dout.h * dout.w..(plane + 1) * dout.h * dout.w];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dst[(y / 2) * w + xx / 2] += src[y * dout.w + xx];
            }
        }
    }
    dx
}

/// Channel concatenation per sample, `a` first.
pub fn concat_fwd<T: Real>(a: &Batch<T>, b: &Batch<T>) -> Batch<T> {
    let mut out = Batch::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let s = out.sample_mut(i);
        s[..a.sample_len()].copy_from_slice(a.sample(i));
        s[a.sample_len()..].copy_from_slice(b.sample(i));
    }
    out
}

/// Splits a concatenation gradient back into its `a_channels` and remaining parts.
pub fn concat_bwd<T: Real>(d: &Batch<T>, a_channels: usize) -> (Batch<T>, Batch<T>) {
    let mut da = Batch::zeros(d.n, a_channels, d.h, d.w);
    let mut db = Batch::zeros(d.n, d.c - a_channels, d.h, d.w);
    let split = a_channels * d.plane_len();
    for i in 0..d.n {
        let s = d.sample(i);
        da.sample_mut(i).copy_from_slice(&s[..split]);
        db.sample_mut(i).copy_from_slice(&s[split..]);
    }
    (da, db)
}

/// Logistic function in f64 with the overflow-safe sign branch.
pub fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of logits `z` against masks `m`, and its gradient.
///
/// Uses `max(z, 0) - z m + ln(1 + exp(-|z|))`, which never takes the log of zero.
pub fn bce_logits<T: Real>(z: &[T], m: &[u8]) -> (f64, Vec<T>) {
    let n = z.len() as f64;
    let mut loss = 0.0;
    let grad = z
        .iter()
        .zip(m)
        .map(|(&z, &m)| {
            let (z, m) = (z.as_f64(), m as f64);
            loss += z.max(0.0) - z * m + (-z.abs()).exp().ln_1p();
            T::of_f64((sigmoid64(z) - m) / n)
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_ties_route_to_first_element() {
        let x = Batch::<f64> {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
            data: vec![3.0, 3.0, 3.0, 3.0],
        };
        let (y, arg) = pool_fwd(&x);
        assert_eq!((y.data[0], arg[0]), (3.0, 0));
        let dx = pool_bwd(&Batch { data: vec![1.0], ..y }, &arg, 2, 2);
        assert_eq!(dx.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let d = Batch::<f64>::from_fn(1, 1, 4, 4, |i| i as f64);
        let dx = upsample_bwd(&d);
        assert_eq!(dx.data, vec![0.0 + 1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0, 8.0 + 9.0 + 12.0 + 13.0, 10.0 + 11.0 + 14.0 + 15.0]);
        assert_eq!(pool_fwd(&upsample_fwd(&dx)).0, dx);
    }

    #[test]
    fn bce_known_values() {
        let (l, g) = bce_logits::<f64>(&[0.0, 0.0], &[0, 1]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![0.25, -0.25]);
        let (l, _) = bce_logits::<f64>(&[60.0, -60.0], &[1, 0]);
        assert!(l < 1e-25);
        let (l, _) = bce_logits::<f64>(&[800.0], &[0]);
        assert!((l - 800.0).abs() < 1e-12);
    }

    #[test]
    fn prelu_slope_gradient_vanishes_on_positive_inputs() {
        let y = Batch::<f64>::from_fn(2, 1, 2, 2, |i| 1.0 + i as f64);
        let d = Batch::from_fn(2, 1, 2, 2, |_| 1.0);
        let mut ds = [0.0];
        let dx = prelu_bwd(&y, &[0.25], &d, &mut ds);
        assert_eq!(ds, [0.0]);
        assert_eq!(dx, d);
    }
}
