//! K-shot merging reduces to the single-shot path.

use mcinet::config::{Aggregate, ModelConfig};
use mcinet::mlim::{aggregate_merged, kshot_merge, mask_aggregate};
use mcinet::{generate_episode, MciNet};
use mcinet_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KSHOT_TOL: f64 = 1e-6;

fn max_dev(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).expect("same shape")
}

#[test]
fn one_shot_merge_equals_single_support_path() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let vol = Tensor::from_fn(vec![2, 3, 3, 4, 4], |_| r.random_range(-3.0..3.0));
        let mask = Tensor::from_fn(vec![4, 4], |_| r.random_range(0.0..1.0));
        for mode in [Aggregate::Softmax, Aggregate::Raw] {
            let mut g = Graph::new();
            let v = g.constant(vol.clone());
            let single = mask_aggregate(&mut g, v, &mask, mode).unwrap();
            let merged = kshot_merge(&mut g, &[v]).unwrap();
            let via = aggregate_merged(&mut g, &merged, std::slice::from_ref(&mask), mode).unwrap();
            assert!(max_dev(g.value(single), g.value(via)) <= KSHOT_TOL);
        }
    }
}

#[test]
fn duplicated_support_evidence_equals_one_shot() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let vol = Tensor::from_fn(vec![2, 2, 2, 3, 3], |_| r.random_range(-3.0..3.0));
        let mask = Tensor::from_fn(vec![3, 3], |_| f64::from(u8::from(r.random_bool(0.5))));
        let mut g = Graph::new();
        let v = g.constant(vol);
        let one = mask_aggregate(&mut g, v, &mask, Aggregate::Softmax).unwrap();
        let merged = kshot_merge(&mut g, &[v, v]).unwrap();
        let two = aggregate_merged(&mut g, &merged, &[mask.clone(), mask.clone()], Aggregate::Softmax).unwrap();
        assert!(max_dev(g.value(one), g.value(two)) <= KSHOT_TOL);
    }
}

#[test]
fn duplicated_support_model_output_equals_one_shot() {
    let (model, store) = MciNet::new(&ModelConfig::tiny(), 3).unwrap();
    for class in [0, 7, 13] {
        let ep = generate_episode(class, 1, 5, 16).unwrap();
        let (imgs, masks) = (ep.support_images(), ep.support_masks());
        let one = model.predict_logits(&store, &imgs, &masks, &ep.query.image).unwrap();
        let imgs2 = [imgs[0].clone(), imgs[0].clone()];
        let masks2 = [masks[0].clone(), masks[0].clone()];
        let two = model.predict_logits(&store, &imgs2, &masks2, &ep.query.image).unwrap();
        assert!(max_dev(&one.large, &two.large) <= KSHOT_TOL);
        assert!(max_dev(&one.small, &two.small) <= KSHOT_TOL);
    }
}
