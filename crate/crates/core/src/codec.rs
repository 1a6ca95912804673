//! Mask encoding and decoding for both head formats, the matching losses,
//! and mean intersection-over-union.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grid of per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Checks every label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= num_classes) {
            Some(i) => Err(Error::Codec(format!(
                "label {} at pixel {i} is outside [0, {}]",
                self.labels[i],
                num_classes - 1
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> LabelMap {
        LabelMap::from_fn(self.height * factor, self.width * factor, |y, x| {
            self.get(y / factor, x / factor)
        })
    }

    /// Reduces each `factor x factor` block to its most frequent class,
    /// ties going to the lower class index.
    pub fn downsample_majority(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "{}x{} label map is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let mut counts = [0u32; 256];
        Ok(LabelMap::from_fn(self.height / factor, self.width / factor, |y, x| {
            counts.fill(0);
            for dy in 0..factor {
                for dx in 0..factor {
                    counts[self.get(y * factor + dy, x * factor + dx) as usize] += 1;
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            best as u8
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Softmax,
    IntegerEncoding,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub num_classes: usize,
    pub mode: HeadMode,
    /// Distance between adjacent class codes on the integer plane.
    pub quant_step: f32,
    pub quantized: bool,
}

impl CodecConfig {
    /// Float-mode codec: class `k` is regressed as the value `k`.
    pub fn new(mode: HeadMode, num_classes: usize) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Codec(format!(
                "class count must be in [2, 256], got {num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            mode,
            quant_step: 1.0,
            quantized: false,
        })
    }

    /// 8-bit wire mode: classes spread over `[0, 255]` with step
    /// `floor(256 / C)`.
    pub fn quantized(num_classes: usize) -> Result<Self> {
        let mut cfg = Self::new(HeadMode::IntegerEncoding, num_classes)?;
        cfg.quant_step = (256 / num_classes) as f32;
        cfg.quantized = true;
        Ok(cfg)
    }

    pub fn with_step(mut self, step: f32) -> Result<Self> {
        if !(step > 0.0) || (self.quantized && self.num_classes as f32 * step > 256.0) {
            return Err(Error::Codec(format!(
                "step {step} is invalid for {} classes",
                self.num_classes
            )));
        }
        self.quant_step = step;
        Ok(self)
    }
}

/// One-channel integer plane: class `k` becomes `k * quant_step`.
pub fn integer_encode(labels: &LabelMap, cfg: &CodecConfig) -> Result<Tensor> {
    labels.validate(cfg.num_classes)?;
    let data = labels
        .labels
        .iter()
        .map(|&l| l as f32 * cfg.quant_step)
        .collect();
    Tensor::from_vec(1, labels.height, labels.width, data)
}

/// Rounds each regressed value to the nearest class code (half away from
/// zero) and clamps into `[0, C-1]`.
pub fn integer_decode(channel: &Tensor, cfg: &CodecConfig) -> Result<LabelMap> {
    if channel.channels() != 1 {
        return Err(Error::shape(format!(
            "integer decoding needs one channel, got {}",
            channel.channels()
        )));
    }
    let top = (cfg.num_classes - 1) as f32;
    let labels = channel
        .data()
        .iter()
        .map(|&v| (v / cfg.quant_step).round().clamp(0.0, top) as u8)
        .collect();
    LabelMap::new(channel.height(), channel.width(), labels)
}

fn check_score_channels(scores: &Tensor, cfg: &CodecConfig) -> Result<()> {
    if scores.channels() < cfg.num_classes {
        return Err(Error::shape(format!(
            "{} classes need at least {} score channels, got {}",
            cfg.num_classes,
            cfg.num_classes,
            scores.channels()
        )));
    }
    Ok(())
}

/// Per-pixel argmax over the first `C` channels; ties go to the lower class.
pub fn softmax_decode(scores: &Tensor, cfg: &CodecConfig) -> Result<LabelMap> {
    check_score_channels(scores, cfg)?;
    let n = scores.plane_len();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            let mut best_v = scores.data()[p];
            for c in 1..cfg.num_classes {
                let v = scores.data()[c * n + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(scores.height(), scores.width(), labels)
}

/// Decodes a raw head output according to the codec mode.
pub fn decode(output: &Tensor, cfg: &CodecConfig) -> Result<LabelMap> {
    match cfg.mode {
        HeadMode::Softmax => softmax_decode(output, cfg),
        HeadMode::IntegerEncoding => integer_decode(output, cfg),
    }
}

/// A scalar loss together with its gradient on the prediction.
#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<LossAndGrad> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    let (c, h, w) = pred.shape();
    Ok(LossAndGrad {
        loss: loss / n,
        grad: Tensor::from_vec(c, h, w, grad)?,
    })
}

/// Mean per-pixel cross entropy of a max-stabilised softmax over the first
/// `C` score channels. Padding channels receive zero gradient.
pub fn cross_entropy_loss(scores: &Tensor, labels: &LabelMap, cfg: &CodecConfig) -> Result<LossAndGrad> {
    check_score_channels(scores, cfg)?;
    if (scores.height(), scores.width()) != (labels.height, labels.width) {
        return Err(Error::shape(format!(
            "scores are {}x{} but labels are {}x{}",
            scores.height(),
            scores.width(),
            labels.height,
            labels.width
        )));
    }
    labels.validate(cfg.num_classes)?;
    let n = scores.plane_len();
    let c = cfg.num_classes;
    let mut grad = Tensor::zeros(scores.channels(), scores.height(), scores.width());
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for p in 0..n {
        let max = (0..c)
            .map(|k| scores.data()[k * n + p])
            .fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0;
        for (k, pr) in probs.iter_mut().enumerate() {
            *pr = (scores.data()[k * n + p] as f64 - max).exp();
            sum += *pr;
        }
        let label = labels.labels[p] as usize;
        loss += sum.ln() - (scores.data()[label * n + p] as f64 - max);
        let g = grad.data_mut();
        for (k, pr) in probs.iter().enumerate() {
            let onehot = if k == label { 1.0 } else { 0.0 };
            g[k * n + p] = ((pr / sum - onehot) / n as f64) as f32;
        }
    }
    Ok(LossAndGrad {
        loss: loss / n as f64,
        grad,
    })
}

/// Per-class intersection-over-union plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// IoU keyed by class index; classes absent from both maps are omitted.
    pub per_class: BTreeMap<usize, f64>,
}

fn confusion(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<Vec<u64>> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    pred.validate(num_classes)?;
    gt.validate(num_classes)?;
    let mut cm = vec![0u64; num_classes * num_classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        cm[g as usize * num_classes + p as usize] += 1;
    }
    Ok(cm)
}

/// Accumulates a confusion matrix over many map pairs.
#[derive(Clone, Debug)]
pub struct MiouAccumulator {
    num_classes: usize,
    counts: Vec<u64>,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        let cm = confusion(pred, gt, self.num_classes)?;
        self.counts.iter_mut().zip(cm).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let c = self.num_classes;
        let mut per_class = BTreeMap::new();
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let gt_k: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            let pred_k: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
            let union = gt_k + pred_k - tp;
            if union > 0 {
                per_class.insert(k, tp as f64 / union as f64);
            }
        }
        let miou = if per_class.is_empty() {
            1.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        MiouReport { miou, per_class }
    }
}

/// Mean IoU over classes present in either map.
pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut acc = MiouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.report().miou)
}
