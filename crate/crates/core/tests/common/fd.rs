//! Finite-difference gradient checks against an f64 forward pass.

use super::*;
use gnetseg::train::backward;
use gnetseg::{build, ForwardTrace, Head, InputFormat, ModelConfig, ModelGraph, Resample, Variant, WidthConfig};

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;

/// Flattened f64 parameters, one `(weights, bias)` pair per conv.
type Params = Vec<(Vec<f64>, Vec<f64>)>;

fn params_of(model: &ModelGraph) -> Params {
    model
        .params()
        .map(|p| {
            (
                p.weights().iter().map(|&v| v as f64).collect(),
                p.bias().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

fn conv_flat(x: &Map, w: &[f64], b: &[f64], cin: usize) -> Map {
    let kernels: Vec<Vec<[[f64; 3]; 3]>> = (0..b.len())
        .map(|o| {
            (0..cin)
                .map(|i| {
                    let base = (o * cin + i) * 9;
                    let mut k = [[0.0; 3]; 3];
                    for t in 0..9 {
                        k[t / 3][t % 3] = w[base + t];
                    }
                    k
                })
                .collect()
        })
        .collect();
    conv(x, &kernels, b)
}

/// f64 forward through `model`'s structure with parameters `p`.
fn forward(model: &ModelGraph, p: &Params, input: &Map) -> Map {
    let mut x = input.clone();
    let mut k = 0;
    for major in model.majors() {
        if major.resample == Resample::Up {
            x = upsample(&x);
        }
        for sub in &major.sublayers {
            x = conv_flat(&x, &p[k].0, &p[k].1, sub.conv.in_channels());
            if sub.relu {
                x = relu(&x);
            }
            k += 1;
        }
        match major.resample {
            Resample::Down => x = maxpool(&x),
            Resample::NoneReformat => x = super::depth_to_space(&x, 2),
            _ => {}
        }
    }
    if matches!(model.head(), Head::IntegerEncoding { .. }) {
        x.truncate(1);
    }
    x
}

fn dot(a: &Map, r: &Map) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(r.iter().flatten().flatten())
        .map(|(x, y)| x * y)
        .sum()
}

fn agrees(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= REL_TOL * analytic.abs().max(fd.abs()) + ABS_FLOOR
}

/// Central difference of `f` at `x0`. When the one-sided slopes disagree a
/// ReLU or pooling switch lies within the step; the step then shrinks until
/// the function is linear again.
fn central_difference(x0: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let f0 = f(x0);
    let mut h = STEP;
    loop {
        let (up, down) = (f(x0 + h), f(x0 - h));
        let (right, left) = ((up - f0) / h, (f0 - down) / h);
        if agrees(right, left) || h < 1e-9 {
            return (up - down) / (2.0 * h);
        }
        h /= 10.0;
    }
}

/// Checks every parameter and input gradient of `model` against central
/// differences of `sum(r * forward(x))`; returns how many were compared or
/// the first disagreement.
pub fn check_model(model: &ModelGraph, seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let (c, h, w) = model.input_shape();
    let image = random_image(&mut r, c, h, w);
    let (oc, oh, ow) = model.output_shape();
    let probe = random_tensor(&mut r, oc, oh, ow);
    let probe_map = to_map(&probe);

    let mut trace = ForwardTrace::new();
    model.forward_traced(&image, &mut trace).unwrap();
    let grads = backward(model, &trace, &probe).unwrap();

    let x = ingest(&image);
    let base = params_of(model);
    let mut checked = 0;
    let mut failure = None;
    let mut record = |analytic: f64, fd: f64, what: &str| {
        if !agrees(analytic, fd) && failure.is_none() {
            failure = Some(format!("{what}: analytic {analytic} vs finite difference {fd}"));
        }
        checked += 1;
    };

    for (k, g) in grads.params.iter().enumerate() {
        for i in 0..base[k].0.len() {
            let fd = central_difference(base[k].0[i], |v| {
                let mut p = base.clone();
                p[k].0[i] = v;
                dot(&forward(model, &p, &x), &probe_map)
            });
            record(g.weights[i] as f64, fd, &format!("conv {k} weight {i}"));
        }
        for i in 0..base[k].1.len() {
            let fd = central_difference(base[k].1[i], |v| {
                let mut p = base.clone();
                p[k].1[i] = v;
                dot(&forward(model, &p, &x), &probe_map)
            });
            record(g.bias[i] as f64, fd, &format!("conv {k} bias {i}"));
        }
    }
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let fd = central_difference(x[ch][y][xx], |v| {
                    let mut m = x.clone();
                    m[ch][y][xx] = v;
                    dot(&forward(model, &base, &m), &probe_map)
                });
                record(grads.input.get(ch, y, xx) as f64, fd, &format!("input ({ch},{y},{xx})"));
            }
        }
    }
    match failure {
        Some(f) => Err(f),
        None => Ok(checked),
    }
}

/// A small build with random biases, so no pre-activation sits exactly on
/// a ReLU kink (zero biases over dead regions would put many there).
pub fn tiny(variant: Variant, format: InputFormat, head: Head, sublayers: usize, seed: u64) -> ModelGraph {
    use rand::Rng;
    let cfg = ModelConfig::new(variant, 16, format, head).with_widths(WidthConfig::uniform(variant, 4, sublayers));
    let mut m = build(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for p in m.params_mut() {
        p.bias_mut().iter_mut().for_each(|b| *b = r.random_range(-0.1..0.1));
    }
    m
}
