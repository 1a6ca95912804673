mod common;

use common::fd::{check_model, tiny};
use common::*;
use gnetseg::train::sample_loss;
use gnetseg::{Head, InputFormat, Tensor, Variant};

#[test]
fn large_reformat_gradients() {
    for seed in 0..3 {
        let m = tiny(Variant::LargeReformat, InputFormat::Y, Head::IntegerEncoding { num_classes: 2 }, 1, seed);
        assert_eq!(check_model(&m, seed).unwrap(), m.param_count() + 256);
    }
}

#[test]
fn padded_integer_head_gradients() {
    for seed in 0..3 {
        let m = tiny(Variant::Small, InputFormat::Y, Head::IntegerEncoding { num_classes: 2 }, 2, 10 + seed);
        check_model(&m, seed).unwrap();
    }
}

#[test]
fn softmax_medium_gradients() {
    for seed in 0..3 {
        let m = tiny(Variant::Medium, InputFormat::Yuv, Head::Softmax { num_classes: 3 }, 1, 20 + seed);
        assert_eq!(check_model(&m, seed).unwrap(), m.param_count() + 3 * 256);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    use gnetseg::LabelMap;
    for (head, seed) in [
        (Head::IntegerEncoding { num_classes: 3 }, 1u64),
        (Head::Softmax { num_classes: 3 }, 2),
    ] {
        let m = tiny(Variant::Large, InputFormat::Y, head, 1, seed);
        let mut r = rng(seed);
        let out = random_tensor(&mut r, m.output_shape().0, 16, 16).map(|v| v * 3.0);
        let labels = LabelMap::from_fn(16, 16, |y, x| ((y * 3 + x * 5) % 3) as u8);
        let lg = sample_loss(&m, &out, &labels).unwrap();
        for i in (0..out.len()).step_by(7) {
            let at = |v: f32| {
                let mut t = out.clone();
                t.data_mut()[i] = v;
                sample_loss(&m, &t, &labels).unwrap().loss
            };
            let x0 = out.data()[i];
            let h = 1e-2f32;
            let fd = (at(x0 + h) - at(x0 - h)) / (2.0 * h as f64);
            let a = lg.grad.data()[i] as f64;
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-6, "{head:?} element {i}: {a} vs {fd}");
        }
    }
}

#[test]
fn reformat_backward_inverts_forward_permutation() {
    let t = Tensor::from_fn(8, 3, 5, |c, y, x| (c * 100 + y * 10 + x) as f32);
    let shuffled = gnetseg::kernels::depth_to_space(&t, 2).unwrap();
    assert_eq!(gnetseg::kernels::space_to_depth(&shuffled, 2).unwrap(), t);
}
