//! Dense channel-major feature maps and per-layer parameter containers.

use crate::error::{Error, Result};

/// A `channels x height x width` float32 feature map, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::dim("tensor size overflows"))?;
        if data.len() != expected {
            return Err(Error::dim(format!(
                "tensor {channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::dim("tensor size overflows"))?;
        Self::new(channels, height, width, vec![value; len])
    }

    /// Builds a tensor by evaluating `f(c, y, x)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copies channels `start..end` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.channels {
            return Err(Error::dim(format!(
                "channel slice {start}..{end} out of range for {} channels",
                self.channels
            )));
        }
        let n = self.plane_len();
        Self::new(
            end - start,
            self.height,
            self.width,
            self.data[start * n..end * n].to_vec(),
        )
    }

    /// Copies the window `[y0, y0+h) x [x0, x0+w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(self.channels, h, w, |c, y, x| self.at(c, y0 + y, x0 + x))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// One odd-sized square 2-D kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f32>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f32>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::dim(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::dim(format!(
                "{size}x{size} kernel needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        Ok(Kernel2D { size, weights })
    }

    /// Center tap 1, all others 0.
    pub fn identity(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        if let Some(c) = w.get_mut(size * size / 2) {
            *c = 1.0;
        }
        Self::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
}

/// Weights of a multi-channel convolution, `out x in x k x k` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel_size: usize,
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::dim("convolution needs at least one input and output channel"));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::dim(format!("kernel size must be odd, got {kernel_size}")));
        }
        let expected = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(Error::dim(format!(
                "conv {in_channels}->{out_channels} ({kernel_size}x{kernel_size}) needs {expected} weights, got {}",
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::dim(format!(
                    "bias needs {out_channels} values, got {}",
                    b.len()
                )));
            }
        }
        Ok(ConvWeights {
            out_channels,
            in_channels,
            kernel_size,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_size: usize, bias: bool) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kernel_size,
            vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
            bias.then(|| vec![0.0; out_channels]),
        )
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f32]> {
        self.bias.as_deref_mut()
    }

    /// The 2-D slice applied to input channel `i` when producing output channel `o`.
    pub fn kernel(&self, o: usize, i: usize) -> Kernel2D {
        let kk = self.kernel_size * self.kernel_size;
        let start = (o * self.in_channels + i) * kk;
        Kernel2D {
            size: self.kernel_size,
            weights: self.weights[start..start + kk].to_vec(),
        }
    }
}

/// Per-channel batch normalization statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BNParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BNParams {
    /// gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        BNParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return Err(Error::dim("batch-norm parameter vectors differ in length"));
        }
        Ok(())
    }
}

/// Per-channel negative slopes of a parametric rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PReLUParams {
    pub slope: Vec<f32>,
}

impl PReLUParams {
    pub fn uniform(channels: usize, slope: f32) -> Self {
        PReLUParams {
            slope: vec![slope; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.slope.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_zero_dims() {
        assert!(Tensor::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::new(0, 2, 2, vec![]).is_err());
        assert!(Kernel2D::new(2, vec![0.0; 4]).is_err());
        assert!(ConvWeights::new(2, 1, 3, vec![0.0; 18], Some(vec![0.0])).is_err());
    }

    #[test]
    fn kernel_slices_follow_out_in_order() {
        let w: Vec<f32> = (0..2 * 3 * 9).map(|v| v as f32).collect();
        let cw = ConvWeights::new(2, 3, 3, w, None).unwrap();
        assert_eq!(cw.kernel(1, 2).weights()[0], ((1 * 3 + 2) * 9) as f32);
    }
}
