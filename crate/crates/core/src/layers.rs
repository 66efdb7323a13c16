//! Reference implementations of every layer in the network.
//!
//! These are the ground truth the lowered programs are checked against. All
//! functions are pure; convolution sums are accumulated in `f64` and stored
//! as `f32`.

use crate::error::{Error, Result};
use crate::gemm::{conv_forward, ConvShape};
use crate::tensor::{BNParams, ConvWeights, PReLUParams, Tensor};

/// Zero-padded convolution preserving height and width.
pub fn conv2d_same(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    if x.channels() != w.in_channels() {
        return Err(Error::dim(format!(
            "conv expects {} input channels, got {}",
            w.in_channels(),
            x.channels()
        )));
    }
    let shape = ConvShape {
        in_ch: w.in_channels(),
        out_ch: w.out_channels(),
        height: x.height(),
        width: x.width(),
        k: w.kernel_size(),
    };
    let weights: Vec<f64> = w.weights().iter().map(|&v| v as f64).collect();
    let bias: Option<Vec<f64>> = w.bias().map(|b| b.iter().map(|&v| v as f64).collect());
    let mut acc = vec![0.0f64; shape.out_ch * x.plane_len()];
    conv_forward(shape, x.data(), |v: f32| v as f64, &weights, bias.as_deref(), &mut acc);
    Tensor::new(
        shape.out_ch,
        x.height(),
        x.width(),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Inference-mode batch normalization with running statistics.
pub fn batchnorm_infer(x: &Tensor, p: &BNParams) -> Result<Tensor> {
    p.check()?;
    if x.channels() != p.channels() {
        return Err(Error::dim(format!(
            "batch norm has {} channels, input has {}",
            p.channels(),
            x.channels()
        )));
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        let denom = (p.running_var[c] as f64 + p.epsilon as f64).sqrt();
        if !(p.running_var[c] as f64 + p.epsilon as f64 > 0.0) {
            return Err(Error::NumericDomain(format!(
                "channel {c}: var + eps = {} is not positive",
                p.running_var[c] as f64 + p.epsilon as f64
            )));
        }
        let (g, b, m) = (p.gamma[c] as f64, p.beta[c] as f64, p.running_mean[c] as f64);
        for v in out.plane_mut(c) {
            *v = (g * (*v as f64 - m) / denom + b) as f32;
        }
    }
    Ok(out)
}

/// `x` for positive inputs, `a_c * x` otherwise.
pub fn prelu(x: &Tensor, p: &PReLUParams) -> Result<Tensor> {
    if x.channels() != p.channels() {
        return Err(Error::dim(format!(
            "prelu has {} slopes, input has {} channels",
            p.channels(),
            x.channels()
        )));
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        let a = p.slope[c];
        for v in out.plane_mut(c) {
            if *v <= 0.0 {
                *v *= a;
            }
        }
    }
    Ok(out)
}

/// Channel-wise 2x2 max pooling with stride 2.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    if x.height() % 2 != 0 || x.width() % 2 != 0 {
        return Err(Error::dim(format!(
            "max pooling needs even dimensions, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    let (h, w) = (x.height() / 2, x.width() / 2);
    Tensor::from_fn(x.channels(), h, w, |c, y, xx| {
        let a = x.at(c, 2 * y, 2 * xx);
        let b = x.at(c, 2 * y, 2 * xx + 1);
        let d = x.at(c, 2 * y + 1, 2 * xx);
        let e = x.at(c, 2 * y + 1, 2 * xx + 1);
        a.max(b).max(d).max(e)
    })
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2_nearest(x: &Tensor) -> Result<Tensor> {
    Tensor::from_fn(x.channels(), x.height() * 2, x.width() * 2, |c, y, xx| {
        x.at(c, y / 2, xx / 2)
    })
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::dim(format!(
            "cannot concatenate {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Largest float32 strictly below one.
pub const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// Logistic function evaluated in f64; the sign branch keeps `exp` from overflowing.
pub fn sigmoid(z: f32) -> f32 {
    let z = z as f64;
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep the result inside the open unit interval after rounding.
    (p as f32).clamp(f32::from_bits(1), BELOW_ONE)
}

/// Cloud probability from the single-logit head.
pub fn head_sigmoid(x: &Tensor) -> Result<Tensor> {
    if x.channels() != 1 {
        return Err(Error::dim(format!(
            "the head expects a single logit channel, got {}",
            x.channels()
        )));
    }
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Kernel2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Independent quadruple-loop convolution.
    fn conv_oracle(x: &Tensor, w: &ConvWeights) -> Tensor {
        let k = w.kernel_size() as isize;
        let r = k / 2;
        Tensor::from_fn(w.out_channels(), x.height(), x.width(), |o, y, xx| {
            let mut acc = 0.0f64;
            for i in 0..x.channels() {
                let kern = w.kernel(o, i);
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky - r;
                        let sx = xx as isize + kx - r;
                        if sy >= 0 && sx >= 0 && (sy as usize) < x.height() && (sx as usize) < x.width() {
                            acc += kern.weights()[(ky * k + kx) as usize] as f64
                                * x.at(i, sy as usize, sx as usize) as f64;
                        }
                    }
                }
            }
            if let Some(b) = w.bias() {
                acc += b[o] as f64;
            }
            acc as f32
        })
        .unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 1, 4, 4);
        let w = ConvWeights::new(1, 1, 3, Kernel2D::identity(3).unwrap().weights().to_vec(), None).unwrap();
        assert_eq!(conv2d_same(&x, &w).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_counts_border_taps() {
        let c = 1.5f32;
        let x = Tensor::filled(1, 4, 4, c).unwrap();
        let w = ConvWeights::new(1, 1, 3, vec![1.0; 9], None).unwrap();
        let y = conv2d_same(&x, &w).unwrap();
        assert_eq!(y.at(0, 0, 0), 4.0 * c);
        assert_eq!(y.at(0, 3, 3), 4.0 * c);
        assert_eq!(y.at(0, 0, 1), 6.0 * c);
        assert_eq!(y.at(0, 2, 0), 6.0 * c);
        assert_eq!(y.at(0, 1, 1), 9.0 * c);
        assert_eq!(y.at(0, 2, 2), 9.0 * c);
    }

    #[test]
    fn random_conv_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 2, 5, 5);
        let wv: Vec<f32> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = ConvWeights::new(3, 2, 3, wv, Some(vec![0.1, -0.2, 0.3])).unwrap();
        assert!(conv2d_same(&x, &w).unwrap().max_abs_diff(&conv_oracle(&x, &w)) <= 1e-6);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(2, 4, 4).unwrap();
        let w = ConvWeights::zeros(1, 3, 3, false).unwrap();
        assert!(matches!(conv2d_same(&x, &w), Err(Error::Dimension(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn conv_matches_oracle_up_to_8ch_16px(
            cin in 1usize..=8, cout in 1usize..=8, h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, cin, h, w);
            let wv: Vec<f32> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cw = ConvWeights::new(cout, cin, 3, wv, None).unwrap();
            prop_assert!(conv2d_same(&x, &cw).unwrap().max_abs_diff(&conv_oracle(&x, &cw)) <= 1e-6);
        }

        #[test]
        fn prelu_zero_slope_is_rectifier(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 3, 4, 5);
            let y = prelu(&x, &PReLUParams::uniform(3, 0.0)).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                prop_assert_eq!(*a, b.max(0.0));
            }
        }

        #[test]
        fn upsample_then_pool_is_identity(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, c, h, w);
            prop_assert_eq!(maxpool2(&upsample2_nearest(&x).unwrap()).unwrap(), x);
        }

        #[test]
        fn sigmoid_range_and_monotone(a in -200.0f32..200.0, b in -200.0f32..200.0) {
            let (sa, sb) = (sigmoid(a), sigmoid(b));
            prop_assert!(sa > 0.0 && sa < 1.0);
            if a <= b { prop_assert!(sa <= sb); }
            prop_assert!((sigmoid(-a) as f64 - (1.0 - sa as f64)).abs() <= 1e-7);
        }
    }

    #[test]
    fn batchnorm_identity_and_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 2, 3, 3);
        let mut p = BNParams::identity(2, 0.0);
        assert_eq!(batchnorm_infer(&x, &p).unwrap(), x);
        p.running_mean = vec![0.25, -0.5];
        p.beta = vec![3.0, -2.0];
        p.gamma = vec![0.7, 1.9];
        let centered = Tensor::from_fn(2, 3, 3, |c, _, _| p.running_mean[c]).unwrap();
        let y = batchnorm_infer(&centered, &p).unwrap();
        assert!(y.plane(0).iter().all(|&v| v == 3.0));
        assert!(y.plane(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn batchnorm_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 4, 5, 5);
        let p = BNParams {
            gamma: (0..4).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_mean: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            running_var: (0..4).map(|_| rng.gen_range(0.1..2.0)).collect(),
            epsilon: 1e-5,
        };
        let y = batchnorm_infer(&x, &p).unwrap();
        for c in 0..4 {
            for (a, b) in y.plane(c).iter().zip(x.plane(c)) {
                let want = p.gamma[c] as f64 * (*b as f64 - p.running_mean[c] as f64)
                    / (p.running_var[c] as f64 + 1e-5f32 as f64).sqrt()
                    + p.beta[c] as f64;
                assert!((*a as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_rejects_nonpositive_variance() {
        let x = Tensor::zeros(1, 2, 2).unwrap();
        let mut p = BNParams::identity(1, 0.0);
        p.running_var[0] = 0.0;
        assert!(matches!(batchnorm_infer(&x, &p), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn prelu_examples() {
        let x = Tensor::new(1, 1, 2, vec![2.0, -2.0]).unwrap();
        let y = prelu(&x, &PReLUParams::uniform(1, 0.25)).unwrap();
        assert_eq!(y.data(), &[2.0, -0.5]);
        assert_eq!(prelu(&x, &PReLUParams::uniform(1, 1.0)).unwrap(), x);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::filled(2, 4, 6, 0.5).unwrap();
        assert_eq!(maxpool2(&c).unwrap(), Tensor::filled(2, 2, 3, 0.5).unwrap());
        assert!(maxpool2(&Tensor::zeros(1, 3, 4).unwrap()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random(&mut rng, 1, 6, 6);
        let y = maxpool2(&r).unwrap();
        for by in 0..3 {
            for bx in 0..3 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(r.at(0, 2 * by + dy, 2 * bx + dx));
                    }
                }
                assert_eq!(y.at(0, by, bx), m);
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            upsample2_nearest(&x).unwrap().data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random(&mut rng, 1, 3, 3);
        let u = upsample2_nearest(&r).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(u.at(0, i, j), r.at(0, i / 2, j / 2));
            }
        }
    }

    #[test]
    fn concat_orders_and_slices_back() {
        let a = Tensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let b = Tensor::new(1, 2, 2, vec![2.0; 4]).unwrap();
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.data(), &[1., 1., 1., 1., 2., 2., 2., 2.]);
        assert!(Tensor::zeros(0, 2, 2).is_err());
        assert!(concat_channels(&a, &Tensor::zeros(1, 2, 3).unwrap()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (ca, cb) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let a = random(&mut rng, ca, 3, 4);
            let b = random(&mut rng, cb, 3, 4);
            let ab = concat_channels(&a, &b).unwrap();
            assert_eq!(ab.channels(), ca + cb);
            assert_eq!(ab.slice_channels(0, ca).unwrap(), a);
            assert_eq!(ab.slice_channels(ca, ca + cb).unwrap(), b);
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        for z in [-10.0f32, -1.0, 0.0, 1.0, 10.0] {
            let want = 1.0 / (1.0 + (-(z as f64)).exp());
            assert!((sigmoid(z) as f64 - want).abs() <= 1e-7);
        }
        assert!(head_sigmoid(&Tensor::zeros(2, 1, 1).unwrap()).is_err());
    }

    #[test]
    fn ops_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 3, 6, 6);
        let wv: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = ConvWeights::new(2, 3, 3, wv, None).unwrap();
        let a = conv2d_same(&x, &w).unwrap();
        let b = conv2d_same(&x, &w).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
