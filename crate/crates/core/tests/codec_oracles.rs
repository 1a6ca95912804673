mod common;

use common::*;
use gnetseg::codec::{integer_decode, integer_encode, miou, softmax_decode, MiouAccumulator};
use gnetseg::{CodecConfig, HeadMode, LabelMap, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn int_cfg(c: usize) -> CodecConfig {
    CodecConfig::new(HeadMode::IntegerEncoding, c).unwrap()
}

#[test]
fn every_binary_three_by_three_map_round_trips() {
    for mode in [int_cfg(2), CodecConfig::quantized(2).unwrap()] {
        for bits in 0u32..512 {
            let m = LabelMap::from_fn(3, 3, |y, x| ((bits >> (y * 3 + x)) & 1) as u8);
            let back = integer_decode(&integer_encode(&m, &mode).unwrap(), &mode).unwrap();
            assert_eq!(back, m, "map {bits:09b}");
        }
    }
}

#[test]
fn random_sixteen_class_maps_round_trip() {
    let mut r = rng(16);
    for cfg in [int_cfg(16), CodecConfig::quantized(16).unwrap()] {
        for _ in 0..100 {
            let (h, w) = (r.random_range(1..20), r.random_range(1..20));
            let m = LabelMap::from_fn(h, w, |_, _| r.random_range(0..16));
            assert_eq!(integer_decode(&integer_encode(&m, &cfg).unwrap(), &cfg).unwrap(), m);
        }
    }
}

#[test]
fn boundary_values_clamp_and_round_half_away() {
    let cfg = int_cfg(16);
    let cases = [
        (-1e9, 0),
        (-0.5, 0),
        (-0.49, 0),
        (0.49, 0),
        (0.5, 1),
        (7.5, 8),
        (14.49, 14),
        (14.5, 15),
        (15.0, 15),
        (15.5, 15),
        (1e9, 15),
    ];
    for (v, want) in cases {
        let t = Tensor::from_vec(1, 1, 1, vec![v]).unwrap();
        assert_eq!(integer_decode(&t, &cfg).unwrap().labels()[0], want, "value {v}");
    }
    let q = CodecConfig::quantized(16).unwrap();
    for (v, want) in [(7.9, 0), (8.0, 1), (247.9, 15), (255.0, 15)] {
        let t = Tensor::from_vec(1, 1, 1, vec![v]).unwrap();
        assert_eq!(integer_decode(&t, &q).unwrap().labels()[0], want, "quantized {v}");
    }
}

#[test]
fn miou_matches_brute_force() {
    let mut r = rng(6);
    for c in [2usize, 16] {
        for _ in 0..50 {
            let (h, w) = (r.random_range(1..24), r.random_range(1..24));
            // skew toward few classes so some are absent from both maps
            let top = r.random_range(1..=c as u8);
            let pred = LabelMap::from_fn(h, w, |_, _| r.random_range(0..top));
            let gt = LabelMap::from_fn(h, w, |_, _| r.random_range(0..top));
            let got = miou(&pred, &gt, c).unwrap();
            let want = brute_miou(pred.labels(), gt.labels(), c);
            assert_eq!(got, want, "C={c}");
        }
    }
}

#[test]
fn half_and_half_against_background_is_a_quarter() {
    let gt = LabelMap::from_fn(4, 4, |_, x| u8::from(x >= 2));
    let pred = LabelMap::filled(4, 4, 0);
    assert_eq!(miou(&pred, &gt, 2).unwrap(), 0.25);
}

#[test]
fn accumulator_pools_pixels_across_maps() {
    let a = LabelMap::filled(2, 2, 1);
    let b = LabelMap::filled(2, 2, 0);
    let mut acc = MiouAccumulator::new(2);
    acc.add(&a, &a).unwrap();
    acc.add(&b, &a).unwrap();
    let rep = acc.report();
    assert_eq!(rep.per_class[&1], 0.5);
    assert_eq!(rep.per_class[&0], 0.0);
    assert_eq!(rep.miou, 0.25);
}

proptest! {
    #[test]
    fn integer_round_trip_any_class_count(c in 2usize..=256, labels in prop::collection::vec(any::<u8>(), 1..64)) {
        let m = LabelMap::new(1, labels.len(), labels.iter().map(|&l| (l as usize % c) as u8).collect()).unwrap();
        let cfg = int_cfg(c);
        prop_assert_eq!(integer_decode(&integer_encode(&m, &cfg).unwrap(), &cfg).unwrap(), m.clone());
        let q = CodecConfig::quantized(c).unwrap();
        prop_assert_eq!(integer_decode(&integer_encode(&m, &q).unwrap(), &q).unwrap(), m);
    }

    #[test]
    fn small_perturbations_decode_to_same_class(c in 2usize..=16, k in 0usize..16, e in -0.49f32..0.49) {
        let k = k % c;
        let t = Tensor::from_vec(1, 1, 1, vec![k as f32 + e]).unwrap();
        prop_assert_eq!(integer_decode(&t, &int_cfg(c)).unwrap().labels()[0] as usize, k);
    }

    #[test]
    fn softmax_decode_is_argmax_of_first_c(c in 2usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let scores = random_tensor(&mut r, 6, 3, 3);
        let cfg = CodecConfig::new(HeadMode::Softmax, c).unwrap();
        let got = softmax_decode(&scores, &cfg).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let best = (0..c).fold(0, |b, k| if scores.get(k, y, x) > scores.get(b, y, x) { k } else { b });
                prop_assert_eq!(got.get(y, x) as usize, best);
            }
        }
    }

    #[test]
    fn miou_is_symmetric_and_bounded(seed in any::<u64>(), c in 2usize..5) {
        let mut r = rng(seed);
        let a = LabelMap::from_fn(5, 5, |_, _| r.random_range(0..c as u8));
        let b = LabelMap::from_fn(5, 5, |_, _| r.random_range(0..c as u8));
        let ab = miou(&a, &b, c).unwrap();
        prop_assert_eq!(ab, miou(&b, &a, c).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(miou(&a, &a, c).unwrap(), 1.0);
    }
}
