//! Randomized invariants of attention, evidence, skips and output sizes.

mod common;

use common::{rand_tensor, AttentionTensors};
use mcinet::backbone::image_input;
use mcinet::config::{Aggregate, ModelConfig, SkipSupport};
use mcinet::mcfm::cross_attention;
use mcinet::mlim::mask_aggregate;
use mcinet::msmp::build_skips;
use mcinet::params::Session;
use mcinet::{generate_episode, MciNet};
use mcinet_autodiff::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), c1 in 1usize..5, c2 in 1usize..5, d in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::from_fn(vec![1, c1, h, w], |_| r.random_range(-10.0..10.0));
        let kv = Tensor::from_fn(vec![1, c2, h, w], |_| r.random_range(-10.0..10.0));
        let wt = AttentionTensors::random(&mut r, c1, c2, d);
        let mut g = Graph::new();
        let hd = wt.bind(&mut g);
        let (vq, vkv) = (g.constant(q), g.constant(kv));
        let out = cross_attention(&mut g, vq, vkv, &hd, d).unwrap();
        let a = g.value(out.weights);
        let n = h * w;
        prop_assert_eq!(a.shape(), &[1, n, n]);
        for i in 0..n {
            let row = &a.data()[i * n..(i + 1) * n];
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn evidence_lies_in_unit_interval(seed in any::<u64>(), c in 1usize..4, hq in 1usize..4, hs in 1usize..5, scale in 0.1f64..50.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let vol = Tensor::from_fn(vec![c, hq, hq, hs, hs], |_| r.random_range(-scale..scale));
        let mask = Tensor::from_fn(vec![hs, hs], |_| r.random_range(0.0..=1.0));
        let mut g = Graph::new();
        let v = g.constant(vol);
        let e = mask_aggregate(&mut g, v, &mask, Aggregate::Softmax).unwrap();
        prop_assert!(g.value(e).data().iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn zero_value_projection_leaves_query_unchanged(seed in any::<u64>(), c1 in 1usize..5, c2 in 1usize..5, d in 1usize..4, h in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut r, &[1, c1, h, h]);
        let kv = rand_tensor(&mut r, &[1, c2, h, h]);
        let mut wt = AttentionTensors::random(&mut r, c1, c2, d);
        wt.wv = Tensor::zeros(vec![c1, c2, 1, 1]);
        wt.bv = Tensor::zeros(vec![c1]);
        let mut g = Graph::new();
        let hd = wt.bind(&mut g);
        let (vq, vkv) = (g.constant(q.clone()), g.constant(kv));
        let out = cross_attention(&mut g, vq, vkv, &hd, d).unwrap();
        prop_assert_eq!(g.value(out.out), &q);
    }

    #[test]
    fn zero_mask_zeroes_foreground_skips(seed in any::<u64>(), class in 0usize..16, shots in 1usize..4) {
        let (model, store) = MciNet::new(&ModelConfig::tiny(), seed).unwrap();
        let ep = generate_episode(class, shots, seed, 16).unwrap();
        let mut s = Session::new(&store);
        let qi = image_input(&mut s, &ep.query.image).unwrap();
        let pq = model.backbone.extract_pyramid(&mut s, qi).unwrap();
        let ps: Vec<_> = ep.supports.iter().map(|sp| {
            let x = image_input(&mut s, &sp.image).unwrap();
            model.backbone.extract_pyramid(&mut s, x).unwrap()
        }).collect();
        let masks = vec![Tensor::zeros(vec![16, 16]); shots];
        let skips = build_skips(&mut s.g, &ps, &pq, &masks, SkipSupport::Foreground).unwrap();
        for v in skips.support {
            prop_assert!(s.g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mask_logits_have_exact_sizes(seed in any::<u64>(), size_mult in 1usize..3, shots in 1usize..3, mods in 0usize..8) {
        let n = 16 * size_mult;
        let row = mcinet::ablation::ABLATION_ROWS[mods];
        let mut cfg = ModelConfig::tiny().with_modules(row.0, row.1, row.2);
        cfg.backbone.input_size = n;
        let (model, store) = MciNet::new(&cfg, seed).unwrap();
        let ep = generate_episode((seed % 16) as usize, shots, seed, n).unwrap();
        let out = model.predict_logits(&store, &ep.support_images(), &ep.support_masks(), &ep.query.image).unwrap();
        prop_assert_eq!(out.small.shape(), &[n / 4, n / 4]);
        prop_assert_eq!(out.large.shape(), &[n, n]);
        prop_assert!(out.large.all_finite() && out.small.all_finite());
    }
}
