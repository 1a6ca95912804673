//! Affine colour-space conversion and folding of that conversion into the
//! first convolution layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor, TAPS};

/// Per-pixel affine map `out = matrix * in + offset` on 3-channel pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorMatrix {
    pub matrix: [[f64; 3]; 3],
    pub offset: [f64; 3],
}

const SINGULAR_EPS: f64 = 1e-9;

impl ColorMatrix {
    pub fn new(matrix: [[f64; 3]; 3], offset: [f64; 3]) -> Result<Self> {
        let cm = Self { matrix, offset };
        if cm.determinant().abs() <= SINGULAR_EPS {
            return Err(Error::Math(format!(
                "colour matrix is singular (det = {:e})",
                cm.determinant()
            )));
        }
        Ok(cm)
    }

    /// Full-range BT.601 RGB to YUV, chroma centred on 128.
    pub fn bt601_full_range() -> Self {
        Self {
            matrix: [
                [0.299, 0.587, 0.114],
                [-0.168_736, -0.331_264, 0.5],
                [0.5, -0.418_688, -0.081_312],
            ],
            offset: [0.0, 128.0, 128.0],
        }
    }

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            offset: [0.0; 3],
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// The inverse affine map: `in = M^-1 * out - M^-1 * offset`.
    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() <= SINGULAR_EPS {
            return Err(Error::Math(format!(
                "colour matrix is singular (det = {det:e})"
            )));
        }
        let m = &self.matrix;
        let mut inv = [[0.0; 3]; 3];
        for (r, row) in inv.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                // adjugate is the transposed cofactor matrix
                let (r0, r1) = ((c + 1) % 3, (c + 2) % 3);
                let (c0, c1) = ((r + 1) % 3, (r + 2) % 3);
                *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
            }
        }
        let mut offset = [0.0; 3];
        for (r, o) in offset.iter_mut().enumerate() {
            *o = -(0..3).map(|c| inv[r][c] * self.offset[c]).sum::<f64>();
        }
        Ok(Self {
            matrix: inv,
            offset,
        })
    }

    /// Re-expresses the map for inputs that have been normalised as
    /// `(v - center) * scale` on both sides.
    pub fn normalized(&self, center: f64, scale: f64) -> Self {
        let mut offset = [0.0; 3];
        for (r, o) in offset.iter_mut().enumerate() {
            let row_sum: f64 = self.matrix[r].iter().sum();
            *o = (row_sum * center + self.offset[r] - center) * scale;
        }
        Self {
            matrix: self.matrix,
            offset,
        }
    }

    fn apply(&self, px: [f64; 3]) -> [f64; 3] {
        let mut out = self.offset;
        for (r, o) in out.iter_mut().enumerate() {
            *o += (0..3).map(|c| self.matrix[r][c] * px[c]).sum::<f64>();
        }
        out
    }
}

impl Default for ColorMatrix {
    fn default() -> Self {
        Self::bt601_full_range()
    }
}

fn convert(pixels: &Tensor, cm: &ColorMatrix) -> Result<Tensor> {
    if pixels.channels() != 3 {
        return Err(Error::shape(format!(
            "colour conversion needs 3 channels, got {}",
            pixels.channels()
        )));
    }
    let n = pixels.plane_len();
    let src = pixels.data();
    let mut out = Tensor::zeros(3, pixels.height(), pixels.width());
    let dst = out.data_mut();
    for p in 0..n {
        let px = [src[p] as f64, src[n + p] as f64, src[2 * n + p] as f64];
        let q = cm.apply(px);
        for c in 0..3 {
            dst[c * n + p] = q[c].clamp(0.0, 255.0) as f32;
        }
    }
    Ok(out)
}

/// RGB pixels in `[0, 255]` to YUV, clamped to `[0, 255]`.
pub fn rgb_to_yuv(pixels: &Tensor, cm: &ColorMatrix) -> Result<Tensor> {
    convert(pixels, cm)
}

pub fn yuv_to_rgb(pixels: &Tensor, cm: &ColorMatrix) -> Result<Tensor> {
    convert(pixels, &cm.inverse()?)
}

/// Folds a colour conversion into a 3-input-channel convolution.
///
/// The returned layer applied to the *source* space computes what `layer`
/// computes on the converted space: per tap `W' = W * M` and
/// `b' = b + sum_taps(W) * offset`. This is exact wherever all nine taps fall
/// inside the image; at the zero-padded border it is exact only when the
/// offset is zero.
pub fn fold_colorspace(layer: &ConvParams, cm: &ColorMatrix) -> Result<ConvParams> {
    if layer.in_channels() != 3 {
        return Err(Error::shape(format!(
            "colour folding needs a 3-input-channel layer, got {}",
            layer.in_channels()
        )));
    }
    let out_ch = layer.out_channels();
    let mut folded = ConvParams::zeros(3, out_ch);
    for o in 0..out_ch {
        let mut shift = layer.bias()[o] as f64;
        for i in 0..3 {
            let tap_sum: f64 = (0..TAPS)
                .map(|t| layer.weight(o, i, t / 3, t % 3) as f64)
                .sum();
            shift += tap_sum * cm.offset[i];
        }
        folded.bias_mut()[o] = shift as f32;
        for t in 0..TAPS {
            let (dy, dx) = (t / 3, t % 3);
            for j in 0..3 {
                let v: f64 = (0..3)
                    .map(|i| layer.weight(o, i, dy, dx) as f64 * cm.matrix[i][j])
                    .sum();
                folded.set_weight(o, j, dy, dx, v as f32);
            }
        }
    }
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_is_chroma_neutral() {
        let gray = Tensor::filled(3, 1, 1, 128.0);
        let yuv = rgb_to_yuv(&gray, &ColorMatrix::default()).unwrap();
        for c in 0..3 {
            assert!((yuv.data()[c] - 128.0).abs() < 1e-4, "{:?}", yuv.data());
        }
    }

    #[test]
    fn pure_red_luma() {
        let red = Tensor::from_vec(3, 1, 1, vec![255.0, 0.0, 0.0]).unwrap();
        let yuv = rgb_to_yuv(&red, &ColorMatrix::default()).unwrap();
        assert!((yuv.data()[0] - 0.299 * 255.0).abs() < 1e-4);
        assert!((yuv.data()[0] - 76.2).abs() < 0.05);
    }

    #[test]
    fn conversion_round_trips_interior_values() {
        let cm = ColorMatrix::default();
        let rgb = Tensor::from_fn(3, 5, 7, |c, y, x| 40.0 + ((c * 53 + y * 19 + x * 7) % 170) as f32);
        let back = yuv_to_rgb(&rgb_to_yuv(&rgb, &cm).unwrap(), &cm).unwrap();
        assert!(rgb.max_abs_diff(&back) <= 0.5);
    }

    #[test]
    fn conversion_requires_three_channels() {
        assert!(rgb_to_yuv(&Tensor::zeros(1, 2, 2), &ColorMatrix::default()).is_err());
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
        assert!(matches!(ColorMatrix::new(m, [0.0; 3]), Err(Error::Math(_))));
        let cm = ColorMatrix {
            matrix: m,
            offset: [0.0; 3],
        };
        assert!(cm.inverse().is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let cm = ColorMatrix::default();
        let inv = cm.inverse().unwrap();
        let px = [12.0, 200.0, 77.0];
        let back = inv.apply(cm.apply(px));
        for c in 0..3 {
            assert!((back[c] - px[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn centred_bt601_has_no_offset() {
        let cm = ColorMatrix::default().normalized(128.0, 1.0 / 255.0);
        for o in cm.offset {
            assert!(o.abs() < 1e-12, "{o}");
        }
    }

    fn sample_layer() -> ConvParams {
        let w: Vec<f32> = (0..2 * 3 * 9).map(|i| ((i * 7) % 11) as f32 * 0.1 - 0.5).collect();
        ConvParams::new(3, 2, w, vec![0.25, -1.0]).unwrap()
    }

    #[test]
    fn identity_fold_is_noop() {
        let layer = sample_layer();
        assert_eq!(fold_colorspace(&layer, &ColorMatrix::identity()).unwrap(), layer);
    }

    #[test]
    fn offset_only_fold_shifts_bias() {
        let layer = sample_layer();
        let cm = ColorMatrix {
            matrix: ColorMatrix::identity().matrix,
            offset: [10.0; 3],
        };
        let folded = fold_colorspace(&layer, &cm).unwrap();
        assert_eq!(folded.weights(), layer.weights());
        for o in 0..2 {
            let all_taps: f32 = layer.weights()[o * 27..(o + 1) * 27].iter().sum();
            let expected = layer.bias()[o] + 10.0 * all_taps;
            assert!((folded.bias()[o] - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn fold_rejects_non_rgb_layer() {
        assert!(fold_colorspace(&ConvParams::zeros(1, 4), &ColorMatrix::default()).is_err());
    }
}
