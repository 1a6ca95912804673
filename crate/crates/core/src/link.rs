//! End-to-end frame time for a host driving the accelerator over a link.
//!
//! A frame is sent, processed and returned strictly in sequence:
//!
//! ```text
//! total = link latency + (in_bytes + out_bytes) / bandwidth
//!       + chip overhead + macs / mac_rate
//! ```
//!
//! Every tensor element crosses the link as one byte. Link parameters can be
//! fitted from measured frame rates by linear least squares on `1 / fps`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chip::estimate_frame_macs;
use crate::error::{Error, Result};
use crate::model::{build, Head, InputFormat, ModelConfig, ModelGraph, Variant};

/// Host/interface measurements shipped with the crate.
pub const REFERENCE_TABLE: &str = include_str!("../data/reference_fps.csv");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub name: String,
    /// Bytes per second.
    pub effective_bandwidth: f64,
    /// Seconds per frame.
    pub fixed_latency: f64,
}

impl LinkProfile {
    pub fn new(name: impl Into<String>, effective_bandwidth: f64, fixed_latency: f64) -> Result<Self> {
        if !(effective_bandwidth > 0.0) || !(fixed_latency >= 0.0) {
            return Err(Error::Usage(format!(
                "link needs positive bandwidth and non-negative latency, got {effective_bandwidth} B/s, {fixed_latency} s"
            )));
        }
        Ok(Self {
            name: name.into(),
            effective_bandwidth,
            fixed_latency,
        })
    }

    /// The interface part of a `host/interface` link name.
    pub fn interface(&self) -> &str {
        self.name.rsplit('/').next().unwrap_or(&self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    /// Multiply-accumulates per second.
    pub mac_rate: f64,
    /// Seconds per frame.
    pub fixed_overhead: f64,
}

/// Conv MACs of VGG16's thirteen 3x3 layers on a 3x224x224 input.
pub fn vgg16_conv_macs() -> u64 {
    const LAYERS: [(u64, u64, u64); 13] = [
        (224, 3, 64),
        (224, 64, 64),
        (112, 64, 128),
        (112, 128, 128),
        (56, 128, 256),
        (56, 256, 256),
        (56, 256, 256),
        (28, 256, 512),
        (28, 512, 512),
        (28, 512, 512),
        (14, 512, 512),
        (14, 512, 512),
        (14, 512, 512),
    ];
    LAYERS.iter().map(|&(s, cin, cout)| 9 * cin * cout * s * s).sum()
}

/// Rate the chip achieves running VGG16's convolutions at 140 frames/s.
pub const REFERENCE_VGG16_FPS: f64 = 140.0;

impl ComputeProfile {
    pub fn new(mac_rate: f64, fixed_overhead: f64) -> Result<Self> {
        if !(mac_rate > 0.0) || !(fixed_overhead >= 0.0) {
            return Err(Error::Usage(format!(
                "compute profile needs a positive MAC rate and non-negative overhead, got {mac_rate}, {fixed_overhead}"
            )));
        }
        Ok(Self {
            mac_rate,
            fixed_overhead,
        })
    }

    /// Compute rate implied by the chip's VGG16 convolution throughput.
    pub fn reference() -> Self {
        Self {
            mac_rate: vgg16_conv_macs() as f64 * REFERENCE_VGG16_FPS,
            fixed_overhead: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCost {
    pub in_bytes: u64,
    pub out_bytes: u64,
    pub macs: u64,
    pub transfer_s: f64,
    pub compute_s: f64,
    pub total_s: f64,
    pub fps: f64,
}

/// Bytes sent to and read back from the chip per frame.
pub fn frame_bytes(model: &ModelGraph) -> (u64, u64) {
    let (c, h, w) = model.input_shape();
    let out = model.output_size();
    let mask_channels = model.head().mask_channels(model.variant());
    ((c * h * w) as u64, (mask_channels * out * out) as u64)
}

pub fn frame_cost(in_bytes: u64, out_bytes: u64, macs: u64, link: &LinkProfile, chip: &ComputeProfile) -> FrameCost {
    let transfer_s = (in_bytes + out_bytes) as f64 / link.effective_bandwidth;
    let compute_s = macs as f64 / chip.mac_rate;
    let total_s = link.fixed_latency + transfer_s + chip.fixed_overhead + compute_s;
    FrameCost {
        in_bytes,
        out_bytes,
        macs,
        transfer_s,
        compute_s,
        total_s,
        fps: 1.0 / total_s,
    }
}

pub fn predict_fps(model: &ModelGraph, link: &LinkProfile, chip: &ComputeProfile) -> FrameCost {
    let (i, o) = frame_bytes(model);
    frame_cost(i, o, estimate_frame_macs(model), link, chip)
}

/// Per-frame workload of a configuration: `(in_bytes, out_bytes, macs)`.
pub fn workload(config: &ModelConfig) -> Result<(u64, u64, u64)> {
    let model = build(config, 0)?;
    let (i, o) = frame_bytes(&model);
    Ok((i, o, estimate_frame_macs(&model)))
}

/// Parses names like `GnetSeg-Large_448_Y_Integer_2cls`.
pub fn parse_model_name(name: &str) -> Result<ModelConfig> {
    let bad = || Error::format(0, format!("cannot parse model name `{name}`"));
    let parts: Vec<&str> = name.trim().split('_').collect();
    let [family, size, format, head, classes] = parts[..] else {
        return Err(bad());
    };
    let input_size: usize = size.parse().map_err(|_| bad())?;
    let input_format: InputFormat = format.parse().map_err(|_| bad())?;
    let num_classes: usize = classes
        .to_ascii_lowercase()
        .strip_suffix("cls")
        .and_then(|n| n.parse().ok())
        .ok_or_else(bad)?;
    let head = match head.to_ascii_lowercase().as_str() {
        "integer" => Head::IntegerEncoding { num_classes },
        "softmax" => Head::Softmax { num_classes },
        _ => return Err(bad()),
    };
    let variant = Variant::resolve(family, head).map_err(|_| bad())?;
    Ok(ModelConfig::new(variant, input_size, input_format, head))
}

/// One measured frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub model: String,
    pub config: ModelConfig,
    pub host: String,
    pub interface: String,
    pub fps: f64,
    pub miou: Option<f64>,
}

impl Measurement {
    pub fn link(&self) -> String {
        format!("{}/{}", self.host, self.interface)
    }

    pub fn to_row(&self) -> CalibrationRow {
        CalibrationRow {
            label: self.model.clone(),
            config: self.config.clone(),
            link: self.link(),
            observed_fps: self.fps,
        }
    }
}

#[derive(Deserialize)]
struct RawMeasurement {
    model: String,
    host: String,
    interface: String,
    fps: f64,
    miou: Option<f64>,
}

/// Reads a CSV table with columns `model,host,interface,fps,miou`.
pub fn parse_measurements(text: &str) -> Result<Vec<Measurement>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.deserialize::<RawMeasurement>() {
        let raw = record.map_err(|e| {
            let offset = e.position().map(|p| p.byte() as usize).unwrap_or(0);
            Error::format(offset, e.to_string())
        })?;
        if !(raw.fps > 0.0) {
            return Err(Error::Consistency {
                message: format!("{} on {}/{} has non-positive fps", raw.model, raw.host, raw.interface),
                path: None,
            });
        }
        out.push(Measurement {
            config: parse_model_name(&raw.model)?,
            model: raw.model,
            host: raw.host,
            interface: raw.interface,
            fps: raw.fps,
            miou: raw.miou,
        });
    }
    Ok(out)
}

pub fn reference_measurements() -> Vec<Measurement> {
    parse_measurements(REFERENCE_TABLE).expect("bundled table parses")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRow {
    pub label: String,
    pub config: ModelConfig,
    pub link: String,
    pub observed_fps: f64,
}

/// Whether the chip compute rate is fitted or held at a known value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComputeFit {
    Fixed(ComputeProfile),
    Fit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub label: String,
    pub link: String,
    pub observed_fps: f64,
    pub predicted_fps: f64,
    pub relative_error: f64,
}

/// Fitted link and compute profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedProfiles {
    pub compute: ComputeProfile,
    pub links: Vec<LinkProfile>,
}

impl FittedProfiles {
    pub fn link(&self, name: &str) -> Option<&LinkProfile> {
        self.links.iter().find(|l| l.name == name)
    }

    /// Links matching `selector` exactly, or else by interface name.
    pub fn select(&self, selector: &str) -> Vec<&LinkProfile> {
        if let Some(l) = self.link(selector) {
            return vec![l];
        }
        self.links.iter().filter(|l| l.interface() == selector).collect()
    }

    pub fn predict(&self, config: &ModelConfig, link: &str) -> Result<FrameCost> {
        let profile = self
            .link(link)
            .ok_or_else(|| Error::Usage(format!("no fitted profile for link `{link}`")))?;
        let (i, o, m) = workload(config)?;
        Ok(frame_cost(i, o, m, profile, &self.compute))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub profiles: FittedProfiles,
    pub residuals: Vec<Residual>,
}

impl Calibration {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.relative_error.abs()).fold(0.0, f64::max)
    }

    pub fn residual_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<40} {:<14} {:>10} {:>10} {:>8}",
            "model", "link", "observed", "fitted", "rel.err"
        );
        for r in &self.residuals {
            let _ = writeln!(
                s,
                "{:<40} {:<14} {:>10.2} {:>10.2} {:>+8.3}",
                r.label, r.link, r.observed_fps, r.predicted_fps, r.relative_error
            );
        }
        s
    }
}

// columns are scaled so the normal system stays well conditioned
const BYTE_UNIT: f64 = 1e6;
const MAC_UNIT: f64 = 1e9;
const TIME_UNIT: f64 = 1e-3;
const RANK_TOL: f64 = 1e-9;
const LATENCY_TOL_S: f64 = 1e-9;

/// Least-squares fit of `1/fps = latency_link + bytes / bw_link
/// [+ macs / rate] + overhead` over the rows.
///
/// Each link contributes an intercept and an inverse bandwidth; a per-link
/// intercept already absorbs any constant chip overhead, so the fitted
/// compute overhead is zero. With [`ComputeFit::Fixed`] the compute term is
/// subtracted from the targets first.
pub fn calibrate(rows: &[CalibrationRow], compute: ComputeFit) -> Result<Calibration> {
    if rows.is_empty() {
        return Err(Error::Calibration("no measurement rows".into()));
    }
    let mut links: Vec<&str> = Vec::new();
    for r in rows {
        if !links.contains(&r.link.as_str()) {
            links.push(&r.link);
        }
        if !(r.observed_fps > 0.0) {
            return Err(Error::Calibration(format!("{} has non-positive fps", r.label)));
        }
    }
    let mut cache: Vec<(&ModelConfig, (u64, u64, u64))> = Vec::new();
    let mut loads = Vec::with_capacity(rows.len());
    for r in rows {
        let w = match cache.iter().find(|(c, _)| *c == &r.config) {
            Some((_, w)) => *w,
            None => {
                let w = workload(&r.config)?;
                cache.push((&r.config, w));
                w
            }
        };
        loads.push(w);
    }

    let fit_rate = matches!(compute, ComputeFit::Fit);
    let unknowns = 2 * links.len() + usize::from(fit_rate);
    let mut a = DMatrix::<f64>::zeros(rows.len(), unknowns);
    let mut b = DVector::<f64>::zeros(rows.len());
    for (i, (r, &(inb, outb, macs))) in rows.iter().zip(&loads).enumerate() {
        let l = links.iter().position(|&n| n == r.link).expect("link indexed");
        a[(i, 2 * l)] = 1.0;
        a[(i, 2 * l + 1)] = (inb + outb) as f64 / BYTE_UNIT;
        let mut t = 1.0 / r.observed_fps;
        match compute {
            ComputeFit::Fit => a[(i, unknowns - 1)] = macs as f64 / MAC_UNIT,
            ComputeFit::Fixed(c) => t -= c.fixed_overhead + macs as f64 / c.mac_rate,
        }
        b[i] = t / TIME_UNIT;
    }

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * RANK_TOL).count();
    if rank < unknowns {
        return Err(Error::Calibration(describe_deficiency(rows, &links, &loads, fit_rate, rank, unknowns)));
    }
    let x = svd
        .solve(&b, smax * RANK_TOL)
        .map_err(|e| Error::Calibration(e.to_string()))?;

    let compute = match compute {
        ComputeFit::Fixed(c) => c,
        ComputeFit::Fit => {
            let per_mac = x[unknowns - 1] * TIME_UNIT / MAC_UNIT;
            if !(per_mac > 0.0) {
                return Err(Error::Calibration(format!(
                    "fitted MAC rate is non-positive ({} s/MAC)",
                    per_mac
                )));
            }
            ComputeProfile {
                mac_rate: 1.0 / per_mac,
                fixed_overhead: 0.0,
            }
        }
    };
    let mut fitted = Vec::with_capacity(links.len());
    for (l, name) in links.iter().enumerate() {
        let latency = x[2 * l] * TIME_UNIT;
        let per_byte = x[2 * l + 1] * TIME_UNIT / BYTE_UNIT;
        if !(per_byte > 0.0) {
            return Err(Error::Calibration(format!(
                "link `{name}` fits a non-positive bandwidth ({per_byte:e} s/byte)"
            )));
        }
        if latency < -LATENCY_TOL_S {
            return Err(Error::Calibration(format!(
                "link `{name}` fits a negative latency ({latency:e} s)"
            )));
        }
        fitted.push(LinkProfile {
            name: name.to_string(),
            effective_bandwidth: 1.0 / per_byte,
            fixed_latency: latency.max(0.0),
        });
    }
    let profiles = FittedProfiles {
        compute,
        links: fitted,
    };
    let residuals = rows
        .iter()
        .zip(&loads)
        .map(|(r, &(i, o, m))| {
            let link = profiles.link(&r.link).expect("fitted");
            let predicted = frame_cost(i, o, m, link, &profiles.compute).fps;
            Residual {
                label: r.label.clone(),
                link: r.link.clone(),
                observed_fps: r.observed_fps,
                predicted_fps: predicted,
                relative_error: (predicted - r.observed_fps) / r.observed_fps,
            }
        })
        .collect();
    Ok(Calibration {
        profiles,
        residuals,
    })
}

fn describe_deficiency(
    rows: &[CalibrationRow],
    links: &[&str],
    loads: &[(u64, u64, u64)],
    fit_rate: bool,
    rank: usize,
    unknowns: usize,
) -> String {
    let mut problems = Vec::new();
    for name in links {
        let mut totals: Vec<u64> = rows
            .iter()
            .zip(loads)
            .filter(|(r, _)| r.link == *name)
            .map(|(_, &(i, o, _))| i + o)
            .collect();
        totals.sort_unstable();
        totals.dedup();
        if totals.len() < 2 {
            problems.push(format!(
                "link `{name}` has {} distinct byte total(s), needs at least 2",
                totals.len()
            ));
        }
    }
    if problems.is_empty() && fit_rate {
        problems.push("MAC totals are collinear with the per-link byte totals; hold the compute profile fixed or add rows with different MAC/byte ratios".into());
    }
    if problems.is_empty() {
        problems.push("measurement rows are linearly dependent".into());
    }
    format!(
        "rank-deficient system (rank {rank} of {unknowns} unknowns): {}",
        problems.join("; ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: Variant, size: usize, f: InputFormat, head: Head) -> ModelConfig {
        ModelConfig::new(v, size, f, head)
    }

    const INT2: Head = Head::IntegerEncoding { num_classes: 2 };
    const SM16: Head = Head::Softmax { num_classes: 16 };

    #[test]
    fn byte_counts() {
        let m = build(&cfg(Variant::LargeReformat, 224, InputFormat::Y, INT2), 0).unwrap();
        assert_eq!(frame_bytes(&m), (50_176, 50_176));
        let m = build(&cfg(Variant::LargeReformat, 224, InputFormat::Yuv, INT2), 0).unwrap();
        assert_eq!(frame_bytes(&m).0, 150_528);
        let m = build(&cfg(Variant::Large, 448, InputFormat::Rgb, SM16), 0).unwrap();
        assert_eq!(frame_bytes(&m).1, 3_211_264);
        let m = build(&cfg(Variant::Small, 64, InputFormat::Y, INT2), 0).unwrap();
        assert_eq!(frame_bytes(&m), (4096, 4 * 16 * 16));
    }

    #[test]
    fn integer_head_sends_one_sixteenth() {
        let a = build(&cfg(Variant::LargeReformat, 224, InputFormat::Y, Head::IntegerEncoding { num_classes: 16 }), 0).unwrap();
        let b = build(&cfg(Variant::LargeReformat, 224, InputFormat::Y, SM16), 0).unwrap();
        assert_eq!(16 * frame_bytes(&a).1, frame_bytes(&b).1);
    }

    #[test]
    fn latency_only_limit() {
        let link = LinkProfile::new("x", f64::INFINITY, 0.004).unwrap();
        let chip = ComputeProfile::new(f64::INFINITY, 0.0).unwrap();
        let c = frame_cost(1000, 1000, 10_000, &link, &chip);
        assert!((c.fps - 250.0).abs() < 1e-9);
        let free = LinkProfile::new("x", f64::INFINITY, 0.0).unwrap();
        assert!(frame_cost(1, 1, 1, &free, &chip).fps.is_infinite());
    }

    #[test]
    fn vgg16_reference_macs() {
        // 15.35 GMAC is the commonly quoted VGG16 conv cost
        let m = vgg16_conv_macs();
        assert_eq!(m, 15_346_630_656);
        assert!((ComputeProfile::reference().mac_rate - m as f64 * 140.0).abs() < 1.0);
    }

    #[test]
    fn model_names_parse() {
        let c = parse_model_name("GnetSeg-Large_448_Y_Integer_2cls").unwrap();
        assert_eq!(c.variant, Variant::LargeReformat);
        assert_eq!((c.input_size, c.input_format), (448, InputFormat::Y));
        let c = parse_model_name("GnetSeg-Large_224_RGB_SoftMax_16cls").unwrap();
        assert_eq!(c.variant, Variant::Large);
        assert_eq!(c.head, SM16);
        assert!(parse_model_name("GnetSeg-Large_224_RGB").is_err());
        assert!(parse_model_name("GnetSeg-Huge_224_RGB_SoftMax_16cls").is_err());
    }

    #[test]
    fn bundled_table_parses() {
        let rows = reference_measurements();
        assert_eq!(rows.len(), 13);
        assert_eq!(rows[1].fps, 318.72);
        assert_eq!(rows[1].link(), "i5/usb3");
    }

    #[test]
    fn single_row_link_is_rank_deficient() {
        let rows: Vec<CalibrationRow> = reference_measurements().iter().map(Measurement::to_row).collect();
        let err = calibrate(&rows, ComputeFit::Fixed(ComputeProfile::reference())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank-deficient"), "{msg}");
        assert!(msg.contains("rk3399/usb3"), "{msg}");
    }

    #[test]
    fn selection_by_interface() {
        let p = FittedProfiles {
            compute: ComputeProfile::reference(),
            links: vec![
                LinkProfile::new("i5/usb3", 1e8, 0.0).unwrap(),
                LinkProfile::new("i7/usb3", 1e8, 0.0).unwrap(),
                LinkProfile::new("rbp3/usb2", 1e7, 0.0).unwrap(),
            ],
        };
        assert_eq!(p.select("usb3").len(), 2);
        assert_eq!(p.select("rbp3/usb2").len(), 1);
        assert!(p.select("pcie").is_empty());
    }

    fn held_out(m: &Measurement) -> bool {
        m.model.contains("448_Y_SoftMax") && (m.link() == "i7/usb3" || m.link() == "rbp3/usb2")
    }

    #[test]
    fn held_out_rows_predict_within_tolerance() {
        let all = reference_measurements();
        let train: Vec<CalibrationRow> = all
            .iter()
            .filter(|m| m.host != "rk3399" && !held_out(m))
            .map(Measurement::to_row)
            .collect();
        let cal = calibrate(&train, ComputeFit::Fixed(ComputeProfile::reference())).unwrap();
        assert!(cal.max_abs_residual() < 0.15, "{}", cal.residual_table());
        for m in all.iter().filter(|m| held_out(m)) {
            let p = cal.profiles.predict(&m.config, &m.link()).unwrap();
            let rel = (p.fps - m.fps) / m.fps;
            assert!(rel.abs() < 0.3, "{} {}: {rel}", m.model, m.link());
        }
    }
}
