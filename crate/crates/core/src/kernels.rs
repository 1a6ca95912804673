//! Reference kernels for the operators the accelerator executes: 3x3
//! convolution (zero padding 1, stride 1), ReLU, 2x2 max pooling,
//! nearest-neighbour 2x upsampling and the depth-to-space reformat.
//!
//! Every kernel is a pure function of its inputs. The convolution lowers to
//! im2col followed by a single-threaded GEMM, so the accumulation order for a
//! given output element is fixed and results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor, TAPS};

/// Unrolls every 3x3 neighbourhood into a `(in_channels * 9) x (h * w)`
/// column matrix; taps falling outside the map read as zero.
pub(crate) fn im2col(input: &Tensor) -> Vec<f32> {
    let (c, h, w) = input.shape();
    let hw = h * w;
    let mut cols = vec![0.0f32; c * TAPS * hw];
    for i in 0..c {
        let plane = input.plane(i);
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[((i * TAPS) + dy * 3 + dx) * hw..][..hw];
                // output row y reads input row y + dy - 1
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match dx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto a `c x h x w` map; the adjoint of
/// [`im2col`].
pub(crate) fn col2im(cols: &[f32], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for i in 0..c {
        let plane = out.plane_mut(i);
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[((i * TAPS) + dy * 3 + dx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match dx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

fn check_conv_input(input: &Tensor, params: &ConvParams) -> Result<()> {
    if input.channels() != params.in_channels() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            params.in_channels(),
            input.channels()
        )));
    }
    Ok(())
}

/// 3x3 convolution with zero padding 1 and stride 1. ReLU is not applied.
pub fn conv3x3(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    check_conv_input(input, params)?;
    let (_, h, w) = input.shape();
    let hw = h * w;
    let k = params.in_channels() * TAPS;
    let m = params.out_channels();
    let cols = im2col(input);
    let mut out = Tensor::zeros(m, h, w);
    for (o, &b) in params.bias().iter().enumerate() {
        out.plane_mut(o).fill(b);
    }
    // SAFETY: slices are sized m*k, k*hw and m*hw with the row-major strides
    // passed below.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            hw,
            1.0,
            params.weights().as_ptr(),
            k as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            1.0,
            out.data_mut().as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of a 3x3 convolution with respect to its input, weights and
/// bias, given the upstream gradient on its (pre-activation) output.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn conv3x3_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    check_conv_input(input, params)?;
    let (c, h, w) = input.shape();
    if grad_out.shape() != (params.out_channels(), h, w) {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            (params.out_channels(), h, w)
        )));
    }
    let hw = h * w;
    let k = c * TAPS;
    let m = params.out_channels();
    let cols = im2col(input);

    let bias = (0..m).map(|o| grad_out.plane(o).iter().sum()).collect();

    let mut weights = vec![0.0f32; m * k];
    let mut dcols = vec![0.0f32; k * hw];
    // SAFETY: grad_out is m x hw, cols is k x hw (read transposed as hw x k),
    // weights is m x k (read transposed as k x m), dcols is k x hw.
    unsafe {
        matrixmultiply::sgemm(
            m,
            hw,
            k,
            1.0,
            grad_out.data().as_ptr(),
            hw as isize,
            1,
            cols.as_ptr(),
            1,
            hw as isize,
            0.0,
            weights.as_mut_ptr(),
            k as isize,
            1,
        );
        matrixmultiply::sgemm(
            k,
            m,
            hw,
            1.0,
            params.weights().as_ptr(),
            1,
            k as isize,
            grad_out.data().as_ptr(),
            hw as isize,
            1,
            0.0,
            dcols.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    Ok(ConvGrads {
        input: col2im(&dcols, c, h, w),
        weights,
        bias,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Passes `grad` through where the ReLU output was positive.
pub fn relu_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    debug_assert_eq!(output.shape(), grad.shape());
    let mut out = grad.clone();
    for (g, &o) in out.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

fn check_even(input: &Tensor) -> Result<()> {
    if !input.height().is_multiple_of(2) || !input.width().is_multiple_of(2) {
        return Err(Error::shape(format!(
            "2x2 pooling needs even dimensions, got {}x{}",
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

/// 2x2 max pooling with stride 2.
pub fn downsample2x(input: &Tensor) -> Result<Tensor> {
    maxpool2x2_with_argmax(input).map(|(t, _)| t)
}

/// Max pooling that also reports, per output element, the flat input index
/// it was taken from. Ties keep the first position in scan order
/// (top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2x2_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    check_even(input)?;
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = vec![0u32; c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * x;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                dst[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each pooled gradient back to the input position that won the max.
pub fn maxpool2x2_backward(input_shape: (usize, usize, usize), argmax: &[u32], grad: &Tensor) -> Tensor {
    let (c, h, w) = input_shape;
    let mut out = Tensor::zeros(c, h, w);
    let dst = out.data_mut();
    for (&src, &g) in argmax.iter().zip(grad.data()) {
        dst[src as usize] += g;
    }
    out
}

/// Nearest-neighbour 2x upsampling: `out[c][y][x] = in[c][y/2][x/2]`.
pub fn upsample2x(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..oh {
            let srow = &src[(y / 2) * w..][..w];
            let drow = &mut dst[y * ow..][..ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block of the gradient.
pub fn upsample2x_backward(grad: &Tensor) -> Result<Tensor> {
    check_even(grad)?;
    let (c, h, w) = grad.shape();
    let (ih, iw) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, ih, iw);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = out.get(ch, y / 2, x / 2) + grad.get(ch, y, x);
                out.set(ch, y / 2, x / 2, v);
            }
        }
    }
    Ok(out)
}

/// Rearranges `block^2` channels into a `block x block` spatial tile:
/// `out[c][b*y + r][b*x + s] = in[c*b^2 + r*b + s][y][x]`.
pub fn depth_to_space(input: &Tensor, block: usize) -> Result<Tensor> {
    let (c, h, w) = input.shape();
    let bb = block * block;
    if block == 0 || c % bb != 0 {
        return Err(Error::shape(format!(
            "depth_to_space with block {block} needs channels divisible by {bb}, got {c}"
        )));
    }
    let oc = c / bb;
    let (oh, ow) = (h * block, w * block);
    let mut out = Tensor::zeros(oc, oh, ow);
    for co in 0..oc {
        for r in 0..block {
            for s in 0..block {
                let src = input.plane(co * bb + r * block + s);
                let dst = out.plane_mut(co);
                for y in 0..h {
                    let drow = &mut dst[(block * y + r) * ow..][..ow];
                    for x in 0..w {
                        drow[block * x + s] = src[y * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`depth_to_space`].
pub fn space_to_depth(input: &Tensor, block: usize) -> Result<Tensor> {
    let (c, h, w) = input.shape();
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::shape(format!(
            "space_to_depth with block {block} needs spatial dims divisible by it, got {h}x{w}"
        )));
    }
    let bb = block * block;
    let (oh, ow) = (h / block, w / block);
    let mut out = Tensor::zeros(c * bb, oh, ow);
    for ci in 0..c {
        let src = input.plane(ci);
        for r in 0..block {
            for s in 0..block {
                let dst = out.plane_mut(ci * bb + r * block + s);
                for y in 0..oh {
                    let srow = &src[(block * y + r) * w..][..w];
                    for x in 0..ow {
                        dst[y * ow + x] = srow[block * x + s];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel() -> ConvParams {
        ConvParams::new(1, 1, vec![1.0; 9], vec![0.0]).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut p = ConvParams::zeros(1, 1);
        p.set_weight(0, 0, 1, 1, 1.0);
        let x = Tensor::filled(1, 3, 3, 1.0);
        assert_eq!(conv3x3(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_counts_in_bounds_taps() {
        let x = Tensor::filled(1, 3, 3, 1.0);
        let y = conv3x3(&x, &ones_kernel()).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(2, 3, 3);
        assert!(matches!(conv3x3(&x, &ones_kernel()), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_handles_single_row_and_column() {
        let x = Tensor::from_vec(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = conv3x3(&x, &ones_kernel()).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
        let x = Tensor::from_vec(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(conv3x3(&x, &ones_kernel()).unwrap().data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::filled(2, 2, 2, -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::from_fn(2, 3, 3, |c, y, x| (c + y + x) as f32);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn pooling_takes_block_max() {
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = downsample2x(&x).unwrap();
        assert_eq!(y.shape(), (1, 1, 1));
        assert_eq!(y.data(), &[4.0]);
        let c = Tensor::filled(3, 4, 6, 2.5);
        assert_eq!(downsample2x(&c).unwrap(), Tensor::filled(3, 2, 3, 2.5));
    }

    #[test]
    fn pooling_rejects_odd_dims() {
        assert!(downsample2x(&Tensor::zeros(1, 3, 4)).is_err());
        assert!(downsample2x(&Tensor::zeros(1, 4, 5)).is_err());
    }

    #[test]
    fn pooling_ties_pick_first_scanned() {
        let x = Tensor::filled(1, 2, 2, 1.0);
        let (_, arg) = maxpool2x2_with_argmax(&x).unwrap();
        assert_eq!(arg, vec![0]);
        let x = Tensor::from_vec(1, 2, 2, vec![0.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(maxpool2x2_with_argmax(&x).unwrap().1, vec![1]);
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor::filled(1, 1, 1, 7.0);
        assert_eq!(upsample2x(&x), Tensor::filled(1, 2, 2, 7.0));
        let t = Tensor::from_fn(2, 3, 5, |c, y, x| (c * 31 + y * 7 + x) as f32 - 9.0);
        assert_eq!(downsample2x(&upsample2x(&t)).unwrap(), t);
    }

    #[test]
    fn depth_to_space_unit_spatial() {
        let x = Tensor::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = depth_to_space(&x, 2).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(space_to_depth(&y, 2).unwrap(), x);
    }

    #[test]
    fn reformat_shape_matches_accelerator_output() {
        let x = Tensor::zeros(4, 112, 112);
        assert_eq!(depth_to_space(&x, 2).unwrap().shape(), (1, 224, 224));
    }

    #[test]
    fn reformat_shape_errors() {
        assert!(depth_to_space(&Tensor::zeros(6, 2, 2), 2).is_err());
        assert!(space_to_depth(&Tensor::zeros(1, 3, 2), 2).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x and c
        let x = Tensor::from_fn(2, 4, 5, |c, y, x| ((c * 13 + y * 5 + x) % 7) as f32 - 3.0);
        let cols: Vec<f32> = (0..2 * 9 * 20).map(|i| ((i * 11) % 17) as f32 - 8.0).collect();
        let lhs: f32 = im2col(&x).iter().zip(&cols).map(|(a, b)| a * b).sum();
        let back = col2im(&cols, 2, 4, 5);
        let rhs: f32 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
