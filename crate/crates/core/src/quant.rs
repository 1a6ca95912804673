//! Post-training 8-bit quantization with an integer-accumulating forward.
//!
//! Weights are quantized symmetrically per layer to `[-127, 127]`. Each
//! conv input is quantized with a scale calibrated from the largest
//! magnitude seen on a calibration set: unsigned `[0, 255]` for post-ReLU
//! activations, signed `[-127, 127]` for inputs that can go negative (the
//! centred image). Products accumulate in `i32` and are rescaled to real
//! values after each conv.

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{ForwardTrace, Head, ModelGraph, Resample, TraceStep, Variant, REFORMAT_BLOCK};
use crate::tensor::{Tensor, TAPS};

#[derive(Clone, Debug, PartialEq)]
pub struct QuantConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight_scale: f32,
    pub weights: Vec<i8>,
    pub input_scale: f32,
    pub input_signed: bool,
    pub bias: Vec<i32>,
    pub relu: bool,
}

impl QuantConv {
    fn input_range(&self) -> (i32, i32) {
        if self.input_signed {
            (-127, 127)
        } else {
            (0, 255)
        }
    }

    fn quantize_input(&self, x: &Tensor) -> Vec<i32> {
        let (lo, hi) = self.input_range();
        x.data()
            .iter()
            .map(|&v| ((v * self.input_scale).round() as i32).clamp(lo, hi))
            .collect()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "quantized conv expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (_, h, w) = x.shape();
        let hw = h * w;
        let q = Tensor::from_vec(
            x.channels(),
            h,
            w,
            self.quantize_input(x).into_iter().map(|v| v as f32).collect(),
        )?;
        // im2col on small integers is exact in f32
        let cols: Vec<i32> = kernels::im2col(&q).into_iter().map(|v| v as i32).collect();
        let k = self.in_channels * TAPS;
        let mut acc = vec![0i32; self.out_channels * hw];
        for o in 0..self.out_channels {
            let row = &mut acc[o * hw..(o + 1) * hw];
            row.fill(self.bias[o]);
            for kk in 0..k {
                let wv = self.weights[o * k + kk] as i32;
                if wv == 0 {
                    continue;
                }
                row.iter_mut()
                    .zip(&cols[kk * hw..(kk + 1) * hw])
                    .for_each(|(a, &c)| *a += wv * c);
            }
        }
        let inv = 1.0 / (self.input_scale as f64 * self.weight_scale as f64);
        let data = acc
            .into_iter()
            .map(|a| {
                let v = (a as f64 * inv) as f32;
                if self.relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect();
        Tensor::from_vec(self.out_channels, h, w, data)
    }
}

/// A model whose convolutions run in 8-bit fixed point.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    variant: Variant,
    head: Head,
    input_shape: (usize, usize, usize),
    majors: Vec<(Resample, Vec<QuantConv>)>,
    reference: ModelGraph,
}

fn scale_for(max_abs: f32, levels: f32) -> f32 {
    if max_abs > 0.0 {
        levels / max_abs
    } else {
        1.0
    }
}

/// Quantizes `model` using `calibration` images (raw `[0, 255]` pixels) to
/// pick activation scales. Only 8 bits are supported.
pub fn quantize(model: &ModelGraph, calibration: &[Tensor], bits: u32) -> Result<QuantizedModel> {
    if bits != 8 {
        return Err(Error::Unsupported(format!("{bits}-bit quantization")));
    }
    if calibration.is_empty() {
        return Err(Error::Calibration(
            "activation calibration needs at least one image".into(),
        ));
    }
    let convs = model.conv_count();
    let mut max_abs = vec![0.0f32; convs];
    let mut signed = vec![false; convs];
    let mut trace = ForwardTrace::new();
    for image in calibration {
        model.forward_traced(image, &mut trace)?;
        let inputs = trace.steps.iter().filter_map(|s| match s {
            TraceStep::Conv { input, .. } => Some(input),
            TraceStep::Pool { .. } => None,
        });
        for (i, input) in inputs.enumerate() {
            for &v in input.data() {
                max_abs[i] = max_abs[i].max(v.abs());
                signed[i] |= v < 0.0;
            }
        }
    }

    let mut idx = 0;
    let mut majors = Vec::with_capacity(model.majors().len());
    for major in model.majors() {
        let mut layers = Vec::with_capacity(major.sublayers.len());
        for sub in &major.sublayers {
            let conv = &sub.conv;
            let weight_scale = scale_for(
                conv.weights().iter().fold(0.0f32, |m, w| m.max(w.abs())),
                127.0,
            );
            let input_signed = signed[idx];
            let input_scale = scale_for(max_abs[idx], if input_signed { 127.0 } else { 255.0 });
            let bias_scale = input_scale as f64 * weight_scale as f64;
            layers.push(QuantConv {
                in_channels: conv.in_channels(),
                out_channels: conv.out_channels(),
                weight_scale,
                weights: conv
                    .weights()
                    .iter()
                    .map(|&w| (w * weight_scale).round().clamp(-127.0, 127.0) as i8)
                    .collect(),
                input_scale,
                input_signed,
                bias: conv
                    .bias()
                    .iter()
                    .map(|&b| (b as f64 * bias_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect(),
                relu: sub.relu,
            });
            idx += 1;
        }
        majors.push((major.resample, layers));
    }
    Ok(QuantizedModel {
        variant: model.variant(),
        head: model.head(),
        input_shape: model.input_shape(),
        majors,
        reference: model.clone(),
    })
}

impl QuantizedModel {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn convs(&self) -> impl Iterator<Item = &QuantConv> {
        self.majors.iter().flat_map(|(_, l)| l.iter())
    }

    /// Weights mapped back to real values, in conv order.
    pub fn dequantized_weights(&self) -> Vec<Vec<f32>> {
        self.convs()
            .map(|c| c.weights.iter().map(|&q| q as f32 / c.weight_scale).collect())
            .collect()
    }

    /// Dequantized head output for a `[0, 255]` pixel image, shaped like
    /// [`ModelGraph::forward`].
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.input_shape {
            return Err(Error::shape(format!(
                "quantized model expects {:?}, got {:?}",
                self.input_shape,
                image.shape()
            )));
        }
        let mut x = self.reference.ingest(image)?;
        for (resample, layers) in &self.majors {
            if *resample == Resample::Up {
                x = kernels::upsample2x(&x);
            }
            for conv in layers {
                x = conv.forward(&x)?;
            }
            match resample {
                Resample::Down => x = kernels::downsample2x(&x)?,
                Resample::NoneReformat => x = kernels::depth_to_space(&x, REFORMAT_BLOCK)?,
                Resample::Up | Resample::None => {}
            }
        }
        match self.head {
            Head::IntegerEncoding { .. } if x.channels() > 1 => x.leading_channels(1),
            _ => Ok(x),
        }
    }
}
