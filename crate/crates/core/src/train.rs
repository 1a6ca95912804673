//! Synthetic segmentation data, reverse-mode gradients and a deterministic
//! SGD training loop.

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{
    cross_entropy_loss, decode, integer_encode, mse_loss, CodecConfig, HeadMode, LabelMap, LossAndGrad,
    MiouAccumulator, MiouReport,
};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{ForwardTrace, Head, ModelGraph, Resample, TraceStep, REFORMAT_BLOCK};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub image_size: usize,
    /// 1 for gray images, 3 for colour.
    pub channels: usize,
    pub num_classes: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Inclusive range of shape semi-axes in pixels.
    pub radius: (usize, usize),
    /// Standard deviation of additive Gaussian noise, in pixel levels.
    pub noise_level: f32,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn new(image_size: usize, num_classes: usize, count: usize, seed: u64) -> Self {
        Self {
            image_size,
            channels: 1,
            num_classes,
            shapes_per_image: (1, 1),
            radius: ((image_size / 6).max(1), (image_size * 3 / 8).max(1)),
            noise_level: 8.0,
            count,
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        let (rmin, rmax) = self.radius;
        let (smin, smax) = self.shapes_per_image;
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Usage(format!("class count {} is outside [2, 256]", self.num_classes)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Usage(format!("images need 1 or 3 channels, got {}", self.channels)));
        }
        if rmin == 0 || rmin > rmax || 2 * rmax + 1 > self.image_size {
            return Err(Error::Usage(format!(
                "radius range {rmin}..={rmax} does not fit a {}-pixel image",
                self.image_size
            )));
        }
        if smin > smax {
            return Err(Error::Usage(format!("shape count range {smin}..={smax} is empty")));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Usage("noise level must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected fraction of non-background pixels when shapes do not
    /// overlap, from the continuous areas `pi*a*b` and `4*a*b`.
    pub fn expected_foreground_fraction(&self) -> f64 {
        let mean = |(lo, hi): (usize, usize)| (lo + hi) as f64 / 2.0;
        let r = mean(self.radius);
        let area = 0.5 * (std::f64::consts::PI * r * r) + 0.5 * (4.0 * r * r);
        mean(self.shapes_per_image) * area / (self.image_size * self.image_size) as f64
    }
}

/// One drawn shape; `(cy, cx)` is the centre, `(ry, rx)` the semi-axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class: u8,
    pub cy: usize,
    pub cx: usize,
    pub ry: usize,
    pub rx: usize,
}

impl ShapeSpec {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy as f64;
        let dx = x as f64 - self.cx as f64;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= self.ry as f64 && dx.abs() <= self.rx as f64,
            ShapeKind::Ellipse => {
                (dy / self.ry as f64).powi(2) + (dx / self.rx as f64).powi(2) <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
    pub shapes: Vec<ShapeSpec>,
}

fn class_level(class: u8, num_classes: usize) -> f32 {
    if class == 0 {
        70.0
    } else {
        140.0 + 90.0 * (class as f32 - 1.0) / (num_classes as f32 - 1.0).max(1.0)
    }
}

fn draw_sample(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.image_size;
    let (rmin, rmax) = spec.radius;
    let count = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let shapes: Vec<ShapeSpec> = (0..count)
        .map(|_| {
            let ry = rng.random_range(rmin..=rmax);
            let rx = rng.random_range(rmin..=rmax);
            ShapeSpec {
                kind: if rng.random_bool(0.5) {
                    ShapeKind::Ellipse
                } else {
                    ShapeKind::Rectangle
                },
                class: rng.random_range(1..spec.num_classes) as u8,
                cy: rng.random_range(ry..n - ry),
                cx: rng.random_range(rx..n - rx),
                ry,
                rx,
            }
        })
        .collect();
    let labels = LabelMap::from_fn(n, n, |y, x| {
        shapes
            .iter()
            .rev()
            .find(|s| s.contains(y, x))
            .map_or(0, |s| s.class)
    });

    // low-frequency stripes give the background some texture
    let fy: f32 = rng.random_range(0.05..0.3);
    let fx: f32 = rng.random_range(0.05..0.3);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let tints: Vec<f32> = (0..spec.channels).map(|_| rng.random_range(-15.0..15.0)).collect();
    let noise = Normal::new(0.0f32, spec.noise_level.max(f32::MIN_POSITIVE)).expect("finite std");
    let mut image = Tensor::zeros(spec.channels, n, n);
    for (c, tint) in tints.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let class = labels.get(y, x);
                let texture = 20.0 * (fy * y as f32 + fx * x as f32 + phase).sin();
                let mut v = class_level(class, spec.num_classes) + tint + texture * 0.5;
                if spec.noise_level > 0.0 {
                    v += noise.sample(rng);
                }
                image.set(c, y, x, v.round().clamp(0.0, 255.0));
            }
        }
    }
    Sample {
        image,
        labels,
        shapes,
    }
}

/// Draws `spec.count` images of filled shapes over a striped background.
/// Labels are exact by construction and pixel values are whole numbers in
/// `[0, 255]`, so samples survive a pixmap round trip unchanged.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Vec<Sample>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.count).map(|_| draw_sample(spec, &mut rng)).collect())
}

/// Gradient of one conv's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// One entry per conv, in execution order.
    pub params: Vec<ParamGrad>,
    /// Gradient on the ingested (centred, scaled) input.
    pub input: Tensor,
}

/// Back-propagates `head_grad`, the gradient on the [`ModelGraph::forward`]
/// output, through the activations recorded in `trace`.
pub fn backward(model: &ModelGraph, trace: &ForwardTrace, head_grad: &Tensor) -> Result<Gradients> {
    if trace.is_empty() || trace.revision != model.revision() {
        return Err(Error::Usage(
            "forward trace is stale or missing; run forward_traced on the current parameters first".into(),
        ));
    }
    if head_grad.shape() != model.output_shape() {
        return Err(Error::shape(format!(
            "head gradient {:?} does not match output {:?}",
            head_grad.shape(),
            model.output_shape()
        )));
    }
    let mut grad = if trace.raw_channels > head_grad.channels() {
        let (_, h, w) = head_grad.shape();
        let mut g = Tensor::zeros(trace.raw_channels, h, w);
        g.plane_mut(0).copy_from_slice(head_grad.plane(0));
        g
    } else {
        head_grad.clone()
    };

    let mut steps = trace.steps.iter().rev();
    let mut params: Vec<ParamGrad> = Vec::with_capacity(model.conv_count());
    for major in model.majors().iter().rev() {
        match major.resample {
            Resample::Down => match steps.next() {
                Some(TraceStep::Pool { shape, argmax }) => {
                    grad = kernels::maxpool2x2_backward(*shape, argmax, &grad);
                }
                _ => return Err(Error::Usage("forward trace does not match the model".into())),
            },
            Resample::NoneReformat => grad = kernels::space_to_depth(&grad, REFORMAT_BLOCK)?,
            Resample::Up | Resample::None => {}
        }
        for sub in major.sublayers.iter().rev() {
            let Some(TraceStep::Conv { input, output }) = steps.next() else {
                return Err(Error::Usage("forward trace does not match the model".into()));
            };
            if sub.relu {
                grad = kernels::relu_backward(output, &grad);
            }
            let g = kernels::conv3x3_backward(input, &sub.conv, &grad)?;
            params.push(ParamGrad {
                weights: g.weights,
                bias: g.bias,
            });
            grad = g.input;
        }
        if major.resample == Resample::Up {
            grad = kernels::upsample2x_backward(&grad)?;
        }
    }
    params.reverse();
    Ok(Gradients {
        params,
        input: grad,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            head: HeadMode::IntegerEncoding,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Usage(format!(
                "need lr > 0 and 0 <= momentum < 1, got lr {} momentum {}",
                self.lr, self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub miou: f64,
}

/// Codec matching a model head, in float (unscaled) mode.
pub fn codec_for(head: Head) -> CodecConfig {
    let mode = match head {
        Head::Softmax { .. } => HeadMode::Softmax,
        Head::IntegerEncoding { .. } => HeadMode::IntegerEncoding,
    };
    CodecConfig::new(mode, head.num_classes()).expect("head class count is in range")
}

/// Decodes a forward output and scales it back to the input resolution.
pub fn output_to_labels(model: &ModelGraph, output: &Tensor) -> Result<LabelMap> {
    let labels = decode(output, &codec_for(model.head()))?;
    let factor = model.input_size() / model.output_size();
    Ok(if factor > 1 {
        labels.upsample_nearest(factor)
    } else {
        labels
    })
}

pub fn predict(model: &ModelGraph, image: &Tensor) -> Result<LabelMap> {
    output_to_labels(model, &model.forward(image)?)
}

/// mIoU over `samples` using `segment` to produce full-resolution labels.
pub fn evaluate_with(
    num_classes: usize,
    samples: &[(&Tensor, &LabelMap)],
    mut segment: impl FnMut(&Tensor) -> Result<LabelMap>,
) -> Result<MiouReport> {
    let mut acc = MiouAccumulator::new(num_classes);
    for (image, gt) in samples {
        acc.add(&segment(image)?, gt)?;
    }
    Ok(acc.report())
}

pub fn evaluate(model: &ModelGraph, samples: &[Sample]) -> Result<MiouReport> {
    let pairs: Vec<_> = samples.iter().map(|s| (&s.image, &s.labels)).collect();
    evaluate_with(model.head().num_classes(), &pairs, |img| predict(model, img))
}

/// Labels at the model's output resolution (block majority).
fn output_labels(model: &ModelGraph, labels: &LabelMap) -> Result<LabelMap> {
    let factor = model.input_size() / model.output_size();
    if factor > 1 {
        labels.downsample_majority(factor)
    } else {
        Ok(labels.clone())
    }
}

/// Loss and head gradient for one sample; MSE on the class index for an
/// integer head, cross entropy for a softmax head.
pub fn sample_loss(model: &ModelGraph, output: &Tensor, labels: &LabelMap) -> Result<LossAndGrad> {
    let target = output_labels(model, labels)?;
    let cfg = codec_for(model.head());
    match cfg.mode {
        HeadMode::IntegerEncoding => mse_loss(output, &integer_encode(&target, &cfg)?),
        HeadMode::Softmax => cross_entropy_loss(output, &target, &cfg),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub metrics: Vec<EpochMetrics>,
}

pub fn train(model: &ModelGraph, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// SGD with momentum (`v = mu*v + g; w -= lr*v`) on batch-mean gradients.
/// Sample order is reshuffled each epoch from `cfg.seed`; gradients are
/// summed in batch order, so runs are bit-reproducible.
pub fn train_with(
    model: &ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.check()?;
    if codec_for(model.head()).mode != cfg.head {
        return Err(Error::Usage(format!(
            "training for a {:?} head but the model has {}",
            cfg.head,
            model.head().describe()
        )));
    }
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut model = model.clone();
    let mut velocity: Vec<ParamGrad> = model
        .params()
        .map(|p| ParamGrad {
            weights: vec![0.0; p.weights().len()],
            bias: vec![0.0; p.bias().len()],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = ForwardTrace::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<ParamGrad>> = None;
            for &i in batch {
                let sample = &train_set[i];
                let out = model.forward_traced(&sample.image, &mut trace).map_err(|e| Error::Diverged {
                    epoch,
                    reason: format!("forward pass failed on sample {i}: {e}"),
                })?;
                let lg = sample_loss(&model, &out, &sample.labels)?;
                if !lg.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("non-finite loss on sample {i}"),
                    });
                }
                epoch_loss += lg.loss;
                let g = backward(&model, &trace, &lg.grad)?;
                match &mut sum {
                    None => sum = Some(g.params),
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(&g.params) {
                            a.weights.iter_mut().zip(&p.weights).for_each(|(x, y)| *x += y);
                            a.bias.iter_mut().zip(&p.bias).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let grads = sum.expect("batch is non-empty");
            for ((p, v), g) in model.params_mut().zip(&mut velocity).zip(&grads) {
                sgd_step(p.weights_mut(), &mut v.weights, &g.weights, cfg, scale);
                sgd_step(p.bias_mut(), &mut v.bias, &g.bias, cfg, scale);
            }
            if model.params().any(|p| p.weights().iter().chain(p.bias()).any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "parameters became non-finite".into(),
                });
            }
        }
        let loss = epoch_loss / train_set.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "mean loss is not finite".into(),
            });
        }
        let miou = if val_set.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, val_set)?.miou
        };
        let m = EpochMetrics { epoch, loss, miou };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { model, metrics })
}

fn sgd_step(w: &mut [f32], v: &mut [f32], g: &[f32], cfg: &TrainConfig, scale: f32) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = cfg.momentum * *v + g * scale;
        *w -= cfg.lr * *v;
    }
}
