//! Model graphs for the Large, Medium and Small encoder-decoder variants.
//!
//! A graph is an ordered list of major layers. Each major layer holds a run
//! of 3x3 conv sublayers (each followed by ReLU, except the head conv) and a
//! resampling tag. `Down` pools after the sublayers, `Up` upsamples before
//! them and `NoneReformat` applies a 2x depth-to-space after them.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{fold_colorspace, ColorMatrix};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ConvParams, Tensor, TAPS};

/// Smallest channel count the accelerator can produce from a conv.
pub const CHIP_MIN_CHANNELS: usize = 4;

/// Pixel value mapped to zero at ingestion.
pub const PIXEL_CENTER: f32 = 128.0;
/// Scale applied at ingestion after centring.
pub const PIXEL_SCALE: f32 = 1.0 / 255.0;

/// Spatial block of the reformat layer.
pub const REFORMAT_BLOCK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Large,
    LargeReformat,
    Medium,
    MediumReformat,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    Down,
    Up,
    None,
    NoneReformat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Large,
        Variant::LargeReformat,
        Variant::Medium,
        Variant::MediumReformat,
        Variant::Small,
    ];

    pub fn pattern(self) -> &'static [Resample] {
        use Resample::*;
        match self {
            Variant::Large => &[Down, Down, Down, None, Up, Up, Up],
            Variant::LargeReformat => &[Down, Down, Down, None, Up, Up, NoneReformat],
            Variant::Medium => &[Down, Down, None, None, Up, Up],
            Variant::MediumReformat => &[Down, Down, None, None, Up, NoneReformat],
            Variant::Small => &[Down, Down, None, None, None],
        }
    }

    pub fn major_count(self) -> usize {
        self.pattern().len()
    }

    /// Default output width of every sublayer in each major layer. The head
    /// conv at the end of the last major layer is sized by the head instead.
    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Variant::Large | Variant::LargeReformat => vec![16, 32, 64, 64, 64, 32, 16],
            Variant::Medium | Variant::MediumReformat => vec![16, 32, 32, 32, 32, 16],
            Variant::Small => vec![16, 32, 32, 32, 32],
        }
    }

    pub fn has_reformat(self) -> bool {
        self.pattern().contains(&Resample::NoneReformat)
    }

    pub fn downsample_count(self) -> usize {
        self.pattern().iter().filter(|r| **r == Resample::Down).count()
    }

    /// Output side length for a square input of side `input_size`.
    pub fn output_size(self, input_size: usize) -> usize {
        let mut s = input_size;
        for r in self.pattern() {
            match r {
                Resample::Down => s /= 2,
                Resample::Up => s *= 2,
                Resample::NoneReformat => s *= REFORMAT_BLOCK,
                Resample::None => {}
            }
        }
        s
    }

    /// Resolves a family name as used in measurement tables and on the
    /// command line. With an integer head, `large` and `medium` name the
    /// reformat decoder, since that is the layout which emits the integer
    /// mask as one full-resolution channel.
    pub fn resolve(family: &str, head: Head) -> Result<Variant> {
        let v: Variant = family.parse()?;
        Ok(match (v, head) {
            (Variant::Large, Head::IntegerEncoding { .. }) => Variant::LargeReformat,
            (Variant::Medium, Head::IntegerEncoding { .. }) => Variant::MediumReformat,
            (v, _) => v,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Large => "large",
            Variant::LargeReformat => "large-reformat",
            Variant::Medium => "medium",
            Variant::MediumReformat => "medium-reformat",
            Variant::Small => "small",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let norm = norm.strip_prefix("gnetseg-").unwrap_or(&norm);
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Usage(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Rgb,
    Yuv,
    Y,
}

impl InputFormat {
    pub fn channels(self) -> usize {
        match self {
            InputFormat::Y => 1,
            InputFormat::Rgb | InputFormat::Yuv => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputFormat::Rgb => "rgb",
            InputFormat::Yuv => "yuv",
            InputFormat::Y => "y",
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(InputFormat::Rgb),
            "yuv" => Ok(InputFormat::Yuv),
            "y" => Ok(InputFormat::Y),
            _ => Err(Error::Usage(format!("unknown input format `{s}`"))),
        }
    }
}

/// Terminal mask-producing stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    Softmax { num_classes: usize },
    IntegerEncoding { num_classes: usize },
}

impl Head {
    pub fn num_classes(self) -> usize {
        match self {
            Head::Softmax { num_classes } | Head::IntegerEncoding { num_classes } => num_classes,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Head::IntegerEncoding { .. })
    }

    /// Channels of the mask that leaves the chip, after any reformat.
    pub fn mask_channels(self, variant: Variant) -> usize {
        let logical = match self {
            Head::Softmax { num_classes } => num_classes,
            Head::IntegerEncoding { .. } => 1,
        };
        if variant.has_reformat() {
            logical
        } else {
            logical.max(CHIP_MIN_CHANNELS)
        }
    }

    /// Output channels of the head conv itself.
    pub fn conv_channels(self, variant: Variant) -> usize {
        let mask = self.mask_channels(variant);
        if variant.has_reformat() {
            mask * REFORMAT_BLOCK * REFORMAT_BLOCK
        } else {
            mask
        }
    }

    /// Channels returned by `forward`: every score plane (padding included)
    /// for softmax, the single regression plane for integer encoding.
    pub fn output_channels(self, variant: Variant) -> usize {
        match self {
            Head::Softmax { .. } => self.mask_channels(variant),
            Head::IntegerEncoding { .. } => 1,
        }
    }

    pub fn describe(self) -> String {
        match self {
            Head::Softmax { num_classes } => format!("softmax({num_classes})"),
            Head::IntegerEncoding { num_classes } => format!("integer({num_classes})"),
        }
    }
}

/// Per-major-layer channel widths plus the number of sublayers per major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidthConfig {
    pub majors: Vec<usize>,
    pub sublayers: usize,
}

impl WidthConfig {
    pub fn default_for(variant: Variant) -> Self {
        Self {
            majors: variant.default_widths(),
            sublayers: 2,
        }
    }

    pub fn uniform(variant: Variant, width: usize, sublayers: usize) -> Self {
        Self {
            majors: vec![width; variant.major_count()],
            sublayers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub input_format: InputFormat,
    pub head: Head,
    pub widths: WidthConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant, input_size: usize, input_format: InputFormat, head: Head) -> Self {
        Self {
            variant,
            input_size,
            input_format,
            head,
            widths: WidthConfig::default_for(variant),
        }
    }

    pub fn with_widths(mut self, widths: WidthConfig) -> Self {
        self.widths = widths;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubLayer {
    pub conv: ConvParams,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MajorLayer {
    pub sublayers: Vec<SubLayer>,
    pub resample: Resample,
}

/// Operators the accelerator can execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Conv3x3,
    Relu,
    Maxpool2x2,
    Upsample2x,
    Reformat,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Conv3x3,
        OpKind::Relu,
        OpKind::Maxpool2x2,
        OpKind::Upsample2x,
        OpKind::Reformat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3x3 => "conv3x3",
            OpKind::Relu => "relu",
            OpKind::Maxpool2x2 => "maxpool2x2",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Reformat => "reformat",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One executed operator with its tensor shapes, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpDesc {
    pub major: usize,
    pub sublayer: Option<usize>,
    pub kind: OpKind,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

impl OpDesc {
    pub fn location(&self) -> String {
        match self.sublayer {
            Some(s) => format!("major {} sublayer {} {}", self.major, s, self.kind),
            None => format!("major {} {}", self.major, self.kind),
        }
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            OpKind::Conv3x3 => {
                let (cin, h, w) = self.input;
                (TAPS * cin * self.output.0 * h * w) as u64
            }
            _ => 0,
        }
    }
}

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

/// A fully parameterised network. Parameters only change through
/// [`ModelGraph::params_mut`], which stamps a new revision so stale forward
/// traces can be detected.
#[derive(Debug)]
pub struct ModelGraph {
    variant: Variant,
    input_size: usize,
    input_format: InputFormat,
    head: Head,
    majors: Vec<MajorLayer>,
    revision: u64,
}

impl Clone for ModelGraph {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            input_size: self.input_size,
            input_format: self.input_format,
            head: self.head,
            majors: self.majors.clone(),
            revision: fresh_revision(),
        }
    }
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.input_size == other.input_size
            && self.input_format == other.input_format
            && self.head == other.head
            && self.majors == other.majors
    }
}

/// Builds a model with He-normal weights (gain sqrt 2) and zero biases.
///
/// Every conv except the head must be at least [`CHIP_MIN_CHANNELS`] wide.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelGraph> {
    let ModelConfig {
        variant,
        input_size,
        input_format,
        head,
        widths,
    } = config;
    let variant = *variant;
    if head.num_classes() < 2 {
        return Err(Error::Build(format!(
            "a mask head needs at least 2 classes, got {}",
            head.num_classes()
        )));
    }
    if widths.majors.len() != variant.major_count() {
        return Err(Error::Build(format!(
            "{variant} has {} major layers but {} widths were given",
            variant.major_count(),
            widths.majors.len()
        )));
    }
    if widths.sublayers == 0 {
        return Err(Error::Build("each major layer needs at least one sublayer".into()));
    }
    if let Some((i, w)) = widths
        .majors
        .iter()
        .enumerate()
        .find(|(_, &w)| w < CHIP_MIN_CHANNELS)
    {
        return Err(Error::Build(format!(
            "major layer {i} width {w} is below the chip minimum of {CHIP_MIN_CHANNELS} channels"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = input_format.channels();
    let last = variant.major_count() - 1;
    let mut majors = Vec::with_capacity(variant.major_count());
    for (m, (&resample, &width)) in variant.pattern().iter().zip(&widths.majors).enumerate() {
        let mut sublayers = Vec::with_capacity(widths.sublayers);
        for s in 0..widths.sublayers {
            let is_head = m == last && s + 1 == widths.sublayers;
            let cout = if is_head {
                head.conv_channels(variant)
            } else {
                width
            };
            sublayers.push(SubLayer {
                conv: he_normal(cin, cout, &mut rng),
                relu: !is_head,
            });
            cin = cout;
        }
        majors.push(MajorLayer {
            sublayers,
            resample,
        });
    }
    ModelGraph::from_parts(variant, *input_size, *input_format, *head, majors)
}

fn he_normal(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvParams {
    let std = (2.0 / (cin * TAPS) as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let weights = (0..cout * cin * TAPS).map(|_| dist.sample(rng)).collect();
    ConvParams::new(cin, cout, weights, vec![0.0; cout]).expect("consistent shapes")
}

impl ModelGraph {
    /// Assembles a graph from explicit layers, checking structure only
    /// (pattern, channel chaining, head width, spatial divisibility). Chip
    /// limits such as the channel minimum are left to validation.
    pub fn from_parts(
        variant: Variant,
        input_size: usize,
        input_format: InputFormat,
        head: Head,
        majors: Vec<MajorLayer>,
    ) -> Result<Self> {
        let pattern = variant.pattern();
        if majors.len() != pattern.len() {
            return Err(Error::Build(format!(
                "{variant} needs {} major layers, got {}",
                pattern.len(),
                majors.len()
            )));
        }
        let step = 1usize << variant.downsample_count();
        if input_size == 0 || !input_size.is_multiple_of(step) {
            return Err(Error::Build(format!(
                "input size {input_size} must be a positive multiple of {step} for {variant}"
            )));
        }
        let mut cin = input_format.channels();
        for (m, (major, &expected)) in majors.iter().zip(pattern).enumerate() {
            if major.resample != expected {
                return Err(Error::Build(format!(
                    "major layer {m} of {variant} must be {expected:?}, got {:?}",
                    major.resample
                )));
            }
            if major.sublayers.is_empty() {
                return Err(Error::Build(format!("major layer {m} has no sublayers")));
            }
            for (s, sub) in major.sublayers.iter().enumerate() {
                if sub.conv.in_channels() != cin {
                    return Err(Error::Build(format!(
                        "major {m} sublayer {s} expects {} input channels but receives {cin}",
                        sub.conv.in_channels()
                    )));
                }
                cin = sub.conv.out_channels();
            }
        }
        let head_conv = head.conv_channels(variant);
        if cin != head_conv {
            return Err(Error::Build(format!(
                "{} on {variant} needs a {head_conv}-channel head conv, got {cin}",
                head.describe()
            )));
        }
        Ok(Self {
            variant,
            input_size,
            input_format,
            head,
            majors,
            revision: fresh_revision(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn input_format(&self) -> InputFormat {
        self.input_format
    }

    pub fn input_channels(&self) -> usize {
        self.input_format.channels()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn majors(&self) -> &[MajorLayer] {
        &self.majors
    }

    pub fn output_size(&self) -> usize {
        self.variant.output_size(self.input_size)
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        let s = self.output_size();
        (self.head.output_channels(self.variant), s, s)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.input_channels(), self.input_size, self.input_size)
    }

    pub(crate) fn revision(&self) -> u64 {
        self.revision
    }

    /// Mutable access to the conv parameters in execution order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ConvParams> {
        self.revision = fresh_revision();
        self.majors
            .iter_mut()
            .flat_map(|m| m.sublayers.iter_mut().map(|s| &mut s.conv))
    }

    pub fn params(&self) -> impl Iterator<Item = &ConvParams> {
        self.majors
            .iter()
            .flat_map(|m| m.sublayers.iter().map(|s| &s.conv))
    }

    pub fn param_count(&self) -> usize {
        self.params().map(ConvParams::param_count).sum()
    }

    pub fn conv_count(&self) -> usize {
        self.params().count()
    }

    /// The executed operator sequence with shapes.
    pub fn ops(&self) -> Vec<OpDesc> {
        let mut ops = Vec::new();
        let mut shape = self.input_shape();
        for (m, major) in self.majors.iter().enumerate() {
            if major.resample == Resample::Up {
                let out = (shape.0, shape.1 * 2, shape.2 * 2);
                ops.push(OpDesc {
                    major: m,
                    sublayer: None,
                    kind: OpKind::Upsample2x,
                    input: shape,
                    output: out,
                });
                shape = out;
            }
            for (s, sub) in major.sublayers.iter().enumerate() {
                let out = (sub.conv.out_channels(), shape.1, shape.2);
                ops.push(OpDesc {
                    major: m,
                    sublayer: Some(s),
                    kind: OpKind::Conv3x3,
                    input: shape,
                    output: out,
                });
                if sub.relu {
                    ops.push(OpDesc {
                        major: m,
                        sublayer: Some(s),
                        kind: OpKind::Relu,
                        input: out,
                        output: out,
                    });
                }
                shape = out;
            }
            let next = match major.resample {
                Resample::Down => Some((OpKind::Maxpool2x2, (shape.0, shape.1 / 2, shape.2 / 2))),
                Resample::NoneReformat => Some((
                    OpKind::Reformat,
                    (
                        shape.0 / (REFORMAT_BLOCK * REFORMAT_BLOCK),
                        shape.1 * REFORMAT_BLOCK,
                        shape.2 * REFORMAT_BLOCK,
                    ),
                )),
                Resample::Up | Resample::None => None,
            };
            if let Some((kind, out)) = next {
                ops.push(OpDesc {
                    major: m,
                    sublayer: None,
                    kind,
                    input: shape,
                    output: out,
                });
                shape = out;
            }
        }
        ops
    }

    /// Maps a `[0, 255]` pixel image to the centred, scaled network input.
    pub fn ingest(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != self.input_shape() {
            return Err(Error::shape(format!(
                "model expects a {:?} image, got {:?}",
                self.input_shape(),
                image.shape()
            )));
        }
        Ok(image.map(|v| (v - PIXEL_CENTER) * PIXEL_SCALE))
    }

    pub(crate) fn run(&self, image: &Tensor, mut trace: Option<&mut ForwardTrace>) -> Result<Tensor> {
        let mut x = self.ingest(image)?;
        if let Some(t) = trace.as_deref_mut() {
            t.revision = self.revision;
            t.steps.clear();
        }
        for major in &self.majors {
            if major.resample == Resample::Up {
                x = kernels::upsample2x(&x);
            }
            for sub in &major.sublayers {
                let mut y = kernels::conv3x3(&x, &sub.conv)?;
                if sub.relu {
                    kernels::relu_in_place(&mut y);
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.steps.push(TraceStep::Conv {
                        input: x,
                        output: y.clone(),
                    });
                }
                x = y;
            }
            match major.resample {
                Resample::Down => {
                    let shape = x.shape();
                    let (pooled, argmax) = kernels::maxpool2x2_with_argmax(&x)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.steps.push(TraceStep::Pool { shape, argmax });
                    }
                    x = pooled;
                }
                Resample::NoneReformat => x = kernels::depth_to_space(&x, REFORMAT_BLOCK)?,
                Resample::Up | Resample::None => {}
            }
        }
        if let Some(t) = trace {
            t.raw_channels = x.channels();
        }
        match self.head {
            Head::IntegerEncoding { .. } if x.channels() > 1 => x.leading_channels(1),
            _ => Ok(x),
        }
    }

    /// Raw head output for a `[0, 255]` pixel image: score planes for a
    /// softmax head, the regressed class plane for an integer head.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.run(image, None)
    }

    /// Forward pass that also records the activations needed for backprop.
    pub fn forward_traced(&self, image: &Tensor, trace: &mut ForwardTrace) -> Result<Tensor> {
        self.run(image, Some(trace))
    }

    /// Returns a copy with the first layer refolded so that it accepts
    /// `target` instead of the current colour space.
    pub fn convert_input_format(&self, target: InputFormat) -> Result<ModelGraph> {
        self.convert_input_format_with(target, &ColorMatrix::default())
    }

    pub fn convert_input_format_with(
        &self,
        target: InputFormat,
        cm: &ColorMatrix,
    ) -> Result<ModelGraph> {
        if self.input_channels() != 3 || target.channels() != 3 {
            return Err(Error::Unsupported(format!(
                "colour-space folding needs 3-channel formats on both sides ({} -> {target})",
                self.input_format
            )));
        }
        if self.input_format == target {
            return Err(Error::Usage(format!("model already takes {target} input")));
        }
        // cm maps RGB to YUV in pixel units; re-express it on ingested values
        let normalized = cm.normalized(PIXEL_CENTER as f64, PIXEL_SCALE as f64);
        let fold_with = match (self.input_format, target) {
            (InputFormat::Yuv, InputFormat::Rgb) => normalized,
            (InputFormat::Rgb, InputFormat::Yuv) => normalized.inverse()?,
            _ => unreachable!("both formats are 3-channel and distinct"),
        };
        let mut out = self.clone();
        out.input_format = target;
        let first = &mut out.majors[0].sublayers[0].conv;
        *first = fold_colorspace(first, &fold_with)?;
        out.revision = fresh_revision();
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum TraceStep {
    Conv { input: Tensor, output: Tensor },
    Pool {
        shape: (usize, usize, usize),
        argmax: Vec<u32>,
    },
}

/// Activations cached by [`ModelGraph::forward_traced`].
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub(crate) revision: u64,
    pub(crate) steps: Vec<TraceStep>,
    pub(crate) raw_channels: usize,
}

impl ForwardTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
