//! Dense channel-major feature maps and 3x3 convolution parameters.

use crate::error::{Error, Result};

/// A `channels x height x width` feature map stored channel-major, then
/// row-major within each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "tensor dimensions must be positive"
        );
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Wraps `data`, checking the length against the shape and rejecting
    /// non-finite elements.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} tensor needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("element {i} is not finite")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(c, y, x)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    t.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        t
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies the first `count` channels into a new tensor.
    pub fn leading_channels(&self, count: usize) -> Result<Tensor> {
        if count == 0 || count > self.channels {
            return Err(Error::shape(format!(
                "cannot take {count} of {} channels",
                self.channels
            )));
        }
        Ok(Tensor {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[..count * self.plane_len()].to_vec(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Weights and bias of one 3x3 convolution, weights laid out
/// `out x in x 3 x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

pub const TAPS: usize = 9;

impl ConvParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::shape("conv channel counts must be positive"));
        }
        let expected = out_channels * in_channels * TAPS;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "{out_channels}x{in_channels}x3x3 weights need {expected} values, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "bias needs {out_channels} values, got {}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::shape("conv parameters must be finite"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    #[inline]
    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, dy: usize, dx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * 3 + dy) * 3 + dx]
    }

    #[inline]
    pub fn set_weight(&mut self, o: usize, i: usize, dy: usize, dx: usize, v: f32) {
        self.weights[((o * self.in_channels + i) * 3 + dy) * 3 + dx] = v;
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}
