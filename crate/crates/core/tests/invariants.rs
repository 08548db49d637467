mod support;

use std::collections::BTreeSet;
use std::path::PathBuf;

use attnpost_core::codec::{rate_target_plan, BuiltinDct, Codec, Measurement, PlanOptions, SizeTable};
use attnpost_core::data::{sample_patch, split_dataset};
use attnpost_core::metrics::{ms_ssim, psnr, LossConfig};
use attnpost_core::network::{init_model, load_checkpoint, model_forward, save_checkpoint, self_ensemble_raw};
use attnpost_core::trainer::{adam_step, AdamConfig, AdamState};
use attnpost_core::{ImageBuffer, ModelConfig};
use proptest::prelude::*;

fn image_strategy(max: usize) -> impl Strategy<Value = ImageBuffer> {
    (1..=max, 1..=max, any::<u64>()).prop_map(|(h, w, s)| support::random_image(h, w, &mut support::rng(s)))
}

fn size_table(t: &support::Table) -> SizeTable {
    let n = t.cells.len();
    let q = t.cells[0].len();
    SizeTable::new(
        (0..n).map(|i| format!("img{i:02}")).collect(),
        t.pixels.clone(),
        (0..q as i32).collect(),
        t.cells
            .iter()
            .map(|row| row.iter().map(|&(bits, psnr)| Measurement { bits, psnr }).collect())
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rotations_form_a_cyclic_group(im in image_strategy(9), a in -5i32..5, b in -5i32..5) {
        prop_assert_eq!(im.rotate90(a).rotate90(b), im.rotate90(a + b));
        prop_assert_eq!(im.rotate90(4), im.clone());
        let (h, w) = im.dims();
        prop_assert_eq!(im.rotate90(1).dims(), (w, h));
        // counter-clockwise: the top-right pixel moves to the top-left
        prop_assert_eq!(im.rotate90(1).get(0, 0, 1), im.get(0, w - 1, 1));
    }

    #[test]
    fn split_partitions_the_manifest(n in 2usize..60, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let paths: Vec<PathBuf> = (0..n).map(|i| PathBuf::from(format!("p{i}.png"))).collect();
        let s = split_dataset(&paths, ratio, seed).unwrap();
        prop_assert!(!s.train.is_empty() && !s.validation.is_empty());
        prop_assert_eq!(s.train.len() + s.validation.len(), n);
        let all: BTreeSet<_> = s.train.iter().chain(&s.validation).collect();
        prop_assert_eq!(all.len(), n);
        let want = ((ratio * n as f64).ceil() as usize).clamp(1, n - 1);
        prop_assert!(s.train.len().abs_diff(want) <= 1);
        prop_assert_eq!(split_dataset(&paths, ratio, seed).unwrap(), s);
    }

    #[test]
    fn patches_are_sub_blocks(im in image_strategy(12), size in 1usize..6, seed in any::<u64>()) {
        prop_assume!(im.height() >= size && im.width() >= size);
        let p = sample_patch(&im, size, &mut support::rng(seed)).unwrap();
        let found = (0..=im.height() - size).any(|t| (0..=im.width() - size).any(|l| im.crop(t, l, size, size).unwrap() == p));
        prop_assert!(found);
    }

    #[test]
    fn psnr_is_symmetric(a in image_strategy(8), seed in any::<u64>()) {
        let b = support::random_image(a.height(), a.width(), &mut support::rng(seed));
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ms_ssim_symmetric_bounded_and_rotation_invariant(
        hm in 2usize..4, wm in 2usize..4, seed in any::<u64>(), k in 1i32..4,
    ) {
        let (a, b) = support::related_pair(16 * hm, 16 * wm, &mut support::rng(seed));
        let cfg = LossConfig::default();
        let ab = ms_ssim(&a, &b, &cfg).unwrap();
        prop_assert!((ab - ms_ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ms_ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let rotated = ms_ssim(&a.rotate90(k), &b.rotate90(k), &cfg).unwrap();
        prop_assert!((ab - rotated).abs() < 1e-9, "{} vs {}", ab, rotated);
    }

    #[test]
    fn adam_zero_gradient_is_identity(seed in any::<u64>(), lr in 1e-6f64..1e-1, steps in 1usize..4) {
        let cfg = ModelConfig { num_blocks: 1, feature_channels: 2, ca_reduction: 1, sa_kernel: 3, global_skip: true };
        let mut p = init_model(&cfg, seed).unwrap();
        let before = p.clone();
        let zero = p.iter().map(|(k, t)| (k.to_string(), vec![0.0f32; t.len()])).collect();
        let mut s = AdamState::new(AdamConfig { lr, ..AdamConfig::default() }, &p);
        for _ in 0..steps {
            adam_step(&mut p, &zero, &mut s).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn rate_plan_caps_and_stays_adjacent(images in 1usize..12, qps in 1usize..6, seed in any::<u64>(), wide in any::<bool>()) {
        let mut r = support::rng(seed);
        let (t, target) = support::random_monotone_table(images, qps, &mut r);
        let span = if wide { 3 } else { 2 };
        match rate_target_plan(&size_table(&t), target, &PlanOptions { mix_span: span, closest_fit: seed % 2 == 0 }) {
            Ok(plan) => {
                prop_assert!(plan.achieved_bpp <= target);
                prop_assert!(plan.qp_spread() < span as i32);
                prop_assert_eq!(plan.entries.len(), images);
            }
            // only when the table's coarsest column already misses
            Err(_) => {
                let total: u64 = t.pixels.iter().sum();
                let coarsest: u64 = t.cells.iter().map(|c| c[qps - 1].0).sum();
                prop_assert!(coarsest as f64 / total as f64 > target);
            }
        }
    }

    #[test]
    fn dct_bits_shrink_with_qp(seed in any::<u64>(), h in 4usize..30, w in 4usize..30) {
        let im = support::random_image(h, w, &mut support::rng(seed)).quantized_8bit();
        let (lo, hi) = BuiltinDct.qp_range();
        let bits: Vec<u64> = (lo..=hi).map(|q| BuiltinDct.code(&im, q).unwrap().bits).collect();
        prop_assert!(bits.windows(2).all(|p| p[1] <= p[0]), "{:?}", bits);
        let d = BuiltinDct.code(&im, 3).unwrap().decoded;
        prop_assert_eq!(d.quantized_8bit(), d);
    }

    #[test]
    fn quantisation_is_idempotent(im in image_strategy(6)) {
        let q = im.quantized_8bit();
        prop_assert_eq!(q.quantized_8bit(), q);
    }

    #[test]
    fn tensor_round_trip(im in image_strategy(7)) {
        prop_assert_eq!(ImageBuffer::from_tensor(&im.to_tensor::<f32>()).unwrap(), im);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn ensemble_is_rotation_equivariant(seed in any::<u64>(), h in 7usize..12, w in 7usize..12, k in 1i32..4) {
        let cfg = ModelConfig { num_blocks: 1, feature_channels: 4, ca_reduction: 2, ..ModelConfig::default() };
        let p = init_model(&cfg, seed).unwrap();
        let x = support::random_image(h, w, &mut support::rng(seed ^ 1));
        let lhs = self_ensemble_raw(&cfg, &p, &x.rotate90(k)).unwrap();
        let rhs = self_ensemble_raw(&cfg, &p, &x).unwrap().rotate90(k);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), blocks in 1usize..3, f in 1usize..4) {
        let cfg = ModelConfig { num_blocks: blocks, feature_channels: 2 * f, ca_reduction: 2, sa_kernel: 3, global_skip: seed % 2 == 0 };
        let p = init_model(&cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (q, c) = load_checkpoint(&path).unwrap();
        prop_assert_eq!(&c, &cfg);
        prop_assert_eq!(&q, &p);
        let x = support::random_image(8, 9, &mut support::rng(seed)).to_tensor::<f32>().reshape(&[1, 3, 8, 9]).unwrap();
        let a = model_forward(&cfg, &p, &x).unwrap();
        let b = model_forward(&c, &q, &x).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
