//! Brute-force reference implementations shared by the integration tests.
//! Everything here works in f64 on plain nested indexing and shares no code
//! with the library kernels.
#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

pub mod fd;

use gnetseg::{Head, ModelGraph, Resample, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// f64 feature map, `[c][y][x]`.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0f32..1.0))
}

/// Uniform values on the grid `k / 64` in `[-1, 1]`. Products and sums of
/// these stay exactly representable in f32 for the layer sizes under test.
pub fn random_dyadic(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-64i32..=64) as f32 / 64.0)
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(0..=255u32) as f32)
}

pub fn to_map(t: &Tensor) -> Map {
    let (c, h, w) = t.shape();
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t.get(ch, y, x) as f64).collect()).collect())
        .collect()
}

pub fn max_abs_diff(t: &Tensor, m: &Map) -> f64 {
    let (c, h, w) = t.shape();
    assert_eq!((c, h, w), (m.len(), m[0].len(), m[0][0].len()), "shape mismatch");
    let mut worst = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                worst = worst.max((t.get(ch, y, x) as f64 - m[ch][y][x]).abs());
            }
        }
    }
    worst
}

/// Direct 3x3 convolution, zero padding 1; `w[o][i][dy][dx]`.
pub fn conv(input: &Map, w: &[Vec<[[f64; 3]; 3]>], b: &[f64]) -> Map {
    let (h, wd) = (input[0].len(), input[0][0].len());
    let mut out = vec![vec![vec![0.0; wd]; h]; w.len()];
    for (o, plane) in out.iter_mut().enumerate() {
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b[o];
                for (i, chan) in input.iter().enumerate() {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let sy = y as isize + dy as isize - 1;
                            let sx = x as isize + dx as isize - 1;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += w[o][i][dy][dx] * chan[sy as usize][sx as usize];
                            }
                        }
                    }
                }
                plane[y][x] = acc;
            }
        }
    }
    out
}

pub fn conv_params(p: &gnetseg::ConvParams) -> (Vec<Vec<[[f64; 3]; 3]>>, Vec<f64>) {
    let w = (0..p.out_channels())
        .map(|o| {
            (0..p.in_channels())
                .map(|i| {
                    let mut k = [[0.0; 3]; 3];
                    for (dy, row) in k.iter_mut().enumerate() {
                        for (dx, v) in row.iter_mut().enumerate() {
                            *v = p.weight(o, i, dy, dx) as f64;
                        }
                    }
                    k
                })
                .collect()
        })
        .collect();
    (w, p.bias().iter().map(|&v| v as f64).collect())
}

pub fn relu(m: &Map) -> Map {
    m.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
        .collect()
}

pub fn maxpool(m: &Map) -> Map {
    m.iter()
        .map(|p| {
            (0..p.len() / 2)
                .map(|y| {
                    (0..p[0].len() / 2)
                        .map(|x| {
                            let cands = [
                                p[2 * y][2 * x],
                                p[2 * y][2 * x + 1],
                                p[2 * y + 1][2 * x],
                                p[2 * y + 1][2 * x + 1],
                            ];
                            cands.into_iter().fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn upsample(m: &Map) -> Map {
    m.iter()
        .map(|p| {
            (0..2 * p.len())
                .map(|y| (0..2 * p[0].len()).map(|x| p[y / 2][x / 2]).collect())
                .collect()
        })
        .collect()
}

/// Pixel shuffle: output pixel `(Y, X)` of channel `c` comes from channel
/// `c*b*b + (Y % b)*b + (X % b)` at `(Y / b, X / b)`.
pub fn depth_to_space(m: &Map, b: usize) -> Map {
    let (h, w) = (m[0].len(), m[0][0].len());
    (0..m.len() / (b * b))
        .map(|c| {
            (0..h * b)
                .map(|yy| {
                    (0..w * b)
                        .map(|xx| m[c * b * b + (yy % b) * b + xx % b][yy / b][xx / b])
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Full forward in f64 starting from the ingested (centred, scaled) input.
pub fn forward_ingested(model: &ModelGraph, ingested: &Map) -> Map {
    let mut x = ingested.clone();
    for major in model.majors() {
        if major.resample == Resample::Up {
            x = upsample(&x);
        }
        for sub in &major.sublayers {
            let (w, b) = conv_params(&sub.conv);
            x = conv(&x, &w, &b);
            if sub.relu {
                x = relu(&x);
            }
        }
        match major.resample {
            Resample::Down => x = maxpool(&x),
            Resample::NoneReformat => x = depth_to_space(&x, 2),
            _ => {}
        }
    }
    if matches!(model.head(), Head::IntegerEncoding { .. }) {
        x.truncate(1);
    }
    x
}

pub fn ingest(image: &Tensor) -> Map {
    to_map(image)
        .into_iter()
        .map(|p| p.into_iter().map(|r| r.into_iter().map(|v| (v - 128.0) / 255.0).collect()).collect())
        .collect()
}

/// Confusion-free mIoU: per class, count intersection and union directly.
pub fn brute_miou(pred: &[u8], gt: &[u8], num_classes: usize) -> f64 {
    let mut ious = Vec::new();
    for k in 0..num_classes as u8 {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == k && g == k).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == k || g == k).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}
