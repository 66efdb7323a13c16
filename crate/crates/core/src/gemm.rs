//! Matrix-multiply backed 3x3 "same" convolution kernels shared by the
//! reference engine and the trainer.
//!
//! Layout conventions: feature maps are `C x H x W` row-major, weights are
//! `O x C x k x k` row-major, and the column matrix is `(C*k*k) x pixels`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point element usable by the convolution kernels.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! check_extent {
    ($buf:expr, $rows:expr, $cols:expr, $rs:expr, $cs:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows as isize - 1) * $rs + ($cols as isize - 1) * $cs;
            assert!(
                $rs >= 0 && $cs >= 0 && (last as usize) < $buf.len(),
                "gemm operand out of bounds"
            );
        }
    };
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(a, m, k, rsa, csa);
        check_extent!(b, k, n, rsb, csb);
        check_extent!(c, m, n, rsc, csc);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(a, m, k, rsa, csa);
        check_extent!(b, k, n, rsb, csb);
        check_extent!(c, m, n, rsc, csc);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Upper bound on column-matrix elements materialized at once.
const COLS_BUDGET: usize = 1 << 21;

fn rows_per_chunk(cols_rows: usize, width: usize, height: usize) -> usize {
    (COLS_BUDGET / (cols_rows * width).max(1)).clamp(1, height)
}

/// Fills `cols` with the zero-padded patches for image rows `y0..y1`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Copy, D: Real>(
    src: &[S],
    cast: impl Fn(S) -> D,
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    y0: usize,
    y1: usize,
    cols: &mut [D],
) {
    let r = (k / 2) as isize;
    let pixels = (y1 - y0) * width;
    for c in 0..channels {
        let plane = &src[c * height * width..(c + 1) * height * width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                let dx = kx as isize - r;
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - r;
                    let out = &mut dst[(y - y0) * width..(y - y0 + 1) * width];
                    if sy < 0 || sy >= height as isize {
                        out.fill(D::zero());
                        continue;
                    }
                    let line = &plane[sy as usize * width..(sy as usize + 1) * width];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= width as isize {
                            D::zero()
                        } else {
                            cast(line[sx as usize])
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back into an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    y0: usize,
    y1: usize,
    dst: &mut [T],
) {
    let r = (k / 2) as isize;
    let pixels = (y1 - y0) * width;
    for c in 0..channels {
        let plane = &mut dst[c * height * width..(c + 1) * height * width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                let dx = kx as isize - r;
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let line = &mut plane[sy as usize * width..(sy as usize + 1) * width];
                    let grad = &src[(y - y0) * width..(y - y0 + 1) * width];
                    for (x, g) in grad.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < width as isize {
                            line[sx as usize] += *g;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of one convolution: `in_ch -> out_ch` over an `height x width` plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

impl ConvShape {
    fn kdim(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Convolution with inputs of type `S` accumulated in `A`; `out` is `out_ch x pixels`.
/// Bias (if any) is added in the accumulator type.
pub(crate) fn conv_forward<S: Copy, A: Real>(
    s: ConvShape,
    input: &[S],
    cast: impl Fn(S) -> A + Copy,
    weights: &[A],
    bias: Option<&[A]>,
    out: &mut [A],
) {
    let kd = s.kdim();
    let px = s.pixels();
    debug_assert_eq!(input.len(), s.in_ch * px);
    debug_assert_eq!(weights.len(), s.out_ch * kd);
    debug_assert_eq!(out.len(), s.out_ch * px);
    let chunk = rows_per_chunk(kd, s.width, s.height);
    let mut cols = vec![A::zero(); kd * chunk * s.width];
    let mut y0 = 0;
    while y0 < s.height {
        let y1 = (y0 + chunk).min(s.height);
        let n = (y1 - y0) * s.width;
        let cols = &mut cols[..kd * n];
        im2col(input, cast, s.in_ch, s.height, s.width, s.k, y0, y1, cols);
        A::gemm(
            s.out_ch,
            kd,
            n,
            A::one(),
            weights,
            kd as isize,
            1,
            cols,
            n as isize,
            1,
            A::zero(),
            &mut out[y0 * s.width..],
            px as isize,
            1,
        );
        y0 = y1;
    }
    if let Some(bias) = bias {
        for (plane, &b) in out.chunks_mut(px).zip(bias) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Backward pass of [`conv_forward`] for same-typed input.
///
/// Accumulates into `dweights` (and `dbias`); writes `dinput` when requested.
pub(crate) fn conv_backward<T: Real>(
    s: ConvShape,
    input: &[T],
    weights: &[T],
    dout: &[T],
    dweights: &mut [T],
    dbias: Option<&mut [T]>,
    mut dinput: Option<&mut [T]>,
) {
    let kd = s.kdim();
    let px = s.pixels();
    let chunk = rows_per_chunk(kd, s.width, s.height);
    let mut cols = vec![T::zero(); kd * chunk * s.width];
    let mut dcols = if dinput.is_some() {
        vec![T::zero(); kd * chunk * s.width]
    } else {
        Vec::new()
    };
    if let Some(d) = dinput.as_deref_mut() {
        d.fill(T::zero());
    }
    let mut y0 = 0;
    while y0 < s.height {
        let y1 = (y0 + chunk).min(s.height);
        let n = (y1 - y0) * s.width;
        let cols = &mut cols[..kd * n];
        im2col(input, |v| v, s.in_ch, s.height, s.width, s.k, y0, y1, cols);
        let dy = &dout[y0 * s.width..];
        // dW += dY * cols^T
        T::gemm(
            s.out_ch,
            n,
            kd,
            T::one(),
            dy,
            px as isize,
            1,
            cols,
            1,
            n as isize,
            T::one(),
            dweights,
            kd as isize,
            1,
        );
        if let Some(dx) = dinput.as_deref_mut() {
            let dcols = &mut dcols[..kd * n];
            // dcols = W^T * dY
            T::gemm(
                kd,
                s.out_ch,
                n,
                T::one(),
                weights,
                1,
                kd as isize,
                dy,
                px as isize,
                1,
                T::zero(),
                dcols,
                n as isize,
                1,
            );
            col2im(dcols, s.in_ch, s.height, s.width, s.k, y0, y1, dx);
        }
        y0 = y1;
    }
    if let Some(db) = dbias {
        for (b, plane) in db.iter_mut().zip(dout.chunks(px)) {
            let sum: f64 = plane.iter().map(|v| v.as_f64()).sum();
            *b += T::of_f64(sum);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(s: ConvShape, x: &[f64], w: &[f64]) -> Vec<f64> {
        let r = (s.k / 2) as isize;
        let mut out = vec![0.0; s.out_ch * s.pixels()];
        for o in 0..s.out_ch {
            for y in 0..s.height as isize {
                for xx in 0..s.width as isize {
                    let mut acc = 0.0;
                    for i in 0..s.in_ch {
                        for ky in 0..s.k as isize {
                            for kx in 0..s.k as isize {
                                let (sy, sx) = (y + ky - r, xx + kx - r);
                                if sy < 0 || sx < 0 || sy >= s.height as isize || sx >= s.width as isize {
                                    continue;
                                }
                                let wv = w[((o * s.in_ch + i) * s.k + ky as usize) * s.k + kx as usize];
                                acc += wv * x[(i * s.height + sy as usize) * s.width + sx as usize];
                            }
                        }
                    }
                    out[(o * s.height + y as usize) * s.width + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn forward_matches_brute_force() {
        let mut seed = 3;
        let s = ConvShape { in_ch: 3, out_ch: 2, height: 5, width: 7, k: 3 };
        let x: Vec<f64> = (0..3 * 35).map(|_| lcg(&mut seed)).collect();
        let w: Vec<f64> = (0..2 * 27).map(|_| lcg(&mut seed)).collect();
        let mut out = vec![0.0; 2 * 35];
        conv_forward(s, &x, |v| v, &w, None, &mut out);
        for (a, b) in out.iter().zip(brute(s, &x, &w)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dY, conv(x)> = <dW, W> ... checked via linearity: dX . x + dW . w = 2 <dY, y>
        // fails for no bias only if one of the gradients is wrong.
        let mut seed = 11;
        let s = ConvShape { in_ch: 2, out_ch: 3, height: 4, width: 6, k: 3 };
        let x: Vec<f64> = (0..2 * 24).map(|_| lcg(&mut seed)).collect();
        let w: Vec<f64> = (0..3 * 18).map(|_| lcg(&mut seed)).collect();
        let dy: Vec<f64> = (0..3 * 24).map(|_| lcg(&mut seed)).collect();
        let mut y = vec![0.0; 3 * 24];
        conv_forward(s, &x, |v| v, &w, None, &mut y);
        let mut dw = vec![0.0; w.len()];
        let mut dx = vec![0.0; x.len()];
        conv_backward(s, &x, &w, &dy, &mut dw, None, Some(&mut dx));
        let lhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
            + dw.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let rhs: f64 = 2.0 * dy.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
