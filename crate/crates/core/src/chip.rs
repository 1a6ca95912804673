//! Checks a model graph against an accelerator profile and tallies its
//! memory footprint and multiply-accumulate count.
//!
//! On-chip tensors and weights are counted at one byte per element. ReLU is
//! fused into the preceding conv, so it never contributes its own
//! activation footprint.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, OpDesc, OpKind, CHIP_MIN_CHANNELS};

pub const MIB: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipProfile {
    pub supported_ops: BTreeSet<OpKind>,
    pub min_channels: usize,
    pub max_spatial: usize,
    pub weight_budget_bytes: u64,
    pub activation_budget_bytes: u64,
}

impl Default for ChipProfile {
    fn default() -> Self {
        Self {
            supported_ops: OpKind::ALL.into_iter().collect(),
            min_channels: CHIP_MIN_CHANNELS,
            max_spatial: 448,
            weight_budget_bytes: 2 * MIB,
            activation_budget_bytes: 16 * MIB,
        }
    }
}

impl ChipProfile {
    pub fn check(&self) -> Result<()> {
        if self.min_channels == 0 {
            return Err(Error::Usage("min_channels must be at least 1".into()));
        }
        if self.max_spatial == 0 || self.weight_budget_bytes == 0 || self.activation_budget_bytes == 0 {
            return Err(Error::Usage("chip limits and budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    UnsupportedOp,
    MinChannels,
    SpatialLimit,
    WeightBudget,
    ActivationBudget,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationCode::UnsupportedOp => "UNSUPPORTED_OP",
            ViolationCode::MinChannels => "MIN_CHANNELS",
            ViolationCode::SpatialLimit => "SPATIAL_LIMIT",
            ViolationCode::WeightBudget => "WEIGHT_BUDGET",
            ViolationCode::ActivationBudget => "ACTIVATION_BUDGET",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Index into the executed op sequence; `None` for whole-model limits.
    pub layer: Option<usize>,
    pub location: String,
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    pub weight_bytes: u64,
    pub peak_activation_bytes: u64,
    pub total_macs: u64,
}

impl ValidationReport {
    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "status: {}", if self.ok { "OK" } else { "FAILED" });
        let _ = writeln!(s, "weight bytes: {}", self.weight_bytes);
        let _ = writeln!(s, "peak activation bytes: {}", self.peak_activation_bytes);
        let _ = writeln!(s, "total MACs: {}", self.total_macs);
        if !self.violations.is_empty() {
            let _ = writeln!(s, "violations ({}):", self.violations.len());
            for v in &self.violations {
                let _ = writeln!(s, "  [{}] {}: {}", v.code, v.location, v.message);
            }
        }
        s
    }
}

fn tensor_bytes(shape: (usize, usize, usize)) -> u64 {
    (shape.0 * shape.1 * shape.2) as u64
}

/// Sum of conv MACs over an op list (`9 * Cin * Cout * H * W` per conv).
pub fn conv_macs(ops: &[OpDesc]) -> u64 {
    ops.iter().map(OpDesc::macs).sum()
}

/// Multiply-accumulates for one frame; resampling and ReLU cost nothing.
pub fn estimate_frame_macs(model: &ModelGraph) -> u64 {
    conv_macs(&model.ops())
}

/// Weight storage at one byte per weight (biases excluded).
pub fn weight_bytes(model: &ModelGraph) -> u64 {
    model.params().map(|p| p.weights().len() as u64).sum()
}

/// Lists every constraint the model breaks; never stops at the first.
pub fn validate(model: &ModelGraph, profile: &ChipProfile) -> ValidationReport {
    let ops = model.ops();
    let mut violations = Vec::new();

    let (_, ih, iw) = model.input_shape();
    if ih.max(iw) > profile.max_spatial {
        violations.push(Violation {
            layer: None,
            location: "input".into(),
            code: ViolationCode::SpatialLimit,
            message: format!("input {ih}x{iw} exceeds the {} pixel limit", profile.max_spatial),
        });
    }

    let mut peak = (0u64, None::<usize>);
    for (i, op) in ops.iter().enumerate() {
        if !profile.supported_ops.contains(&op.kind) {
            violations.push(Violation {
                layer: Some(i),
                location: op.location(),
                code: ViolationCode::UnsupportedOp,
                message: format!("{} is not supported by this chip", op.kind),
            });
        }
        if op.kind == OpKind::Conv3x3 && op.output.0 < profile.min_channels {
            violations.push(Violation {
                layer: Some(i),
                location: op.location(),
                code: ViolationCode::MinChannels,
                message: format!(
                    "conv produces {} channels, chip minimum is {}",
                    op.output.0, profile.min_channels
                ),
            });
        }
        let (_, oh, ow) = op.output;
        if oh.max(ow) > profile.max_spatial {
            violations.push(Violation {
                layer: Some(i),
                location: op.location(),
                code: ViolationCode::SpatialLimit,
                message: format!("output {oh}x{ow} exceeds the {} pixel limit", profile.max_spatial),
            });
        }
        if op.kind != OpKind::Relu {
            let bytes = tensor_bytes(op.input) + tensor_bytes(op.output);
            if bytes > peak.0 {
                peak = (bytes, Some(i));
            }
        }
    }

    let weights = weight_bytes(model);
    if weights > profile.weight_budget_bytes {
        violations.push(Violation {
            layer: None,
            location: "model".into(),
            code: ViolationCode::WeightBudget,
            message: format!(
                "{weights} weight bytes exceed the {} byte budget",
                profile.weight_budget_bytes
            ),
        });
    }
    if peak.0 > profile.activation_budget_bytes {
        let i = peak.1.expect("peak op recorded");
        violations.push(Violation {
            layer: Some(i),
            location: ops[i].location(),
            code: ViolationCode::ActivationBudget,
            message: format!(
                "{} activation bytes exceed the {} byte budget",
                peak.0, profile.activation_budget_bytes
            ),
        });
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
        weight_bytes: weights,
        peak_activation_bytes: peak.0,
        total_macs: conv_macs(&ops),
    }
}
