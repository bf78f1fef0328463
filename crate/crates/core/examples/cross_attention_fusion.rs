//! Cross-attention between a query feature map and a key/value source:
//! attention rows are distributions and a zero value projection leaves the
//! query untouched.

use mcinet::mcfm::{cross_attention, AttentionWeights};
use mcinet_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mcinet::Result<()> {
    let (c1, c2, d, h) = (8, 6, 4, 5);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut rand = |shape: Vec<usize>| Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let q = rand(vec![1, c1, h, h]);
    let kv = rand(vec![1, c2, h, h]);
    let (wq, bq, wk, bk) = (rand(vec![d, c1, 1, 1]), rand(vec![d]), rand(vec![d, c2, 1, 1]), rand(vec![d]));
    let (wv, bv) = (rand(vec![c1, c2, 1, 1]), rand(vec![c1]));

    for zero_value in [false, true] {
        let mut g = Graph::new();
        let (wv, bv) = if zero_value { (Tensor::zeros(wv.shape().to_vec()), Tensor::zeros(vec![c1])) } else { (wv.clone(), bv.clone()) };
        let w = AttentionWeights {
            wq: g.constant(wq.clone()),
            bq: g.constant(bq.clone()),
            wk: g.constant(wk.clone()),
            bk: g.constant(bk.clone()),
            wv: g.constant(wv),
            bv: g.constant(bv),
        };
        let (vq, vkv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let out = cross_attention(&mut g, vq, vkv, &w, d)?;
        let a = g.value(out.weights);
        let n = h * h;
        let worst = (0..n).map(|i| (a.data()[i * n..(i + 1) * n].iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        let delta = g.value(out.out).max_abs_diff(&q).expect("same shape");
        println!("zero value projection {:5}: attention {:?}, worst row-sum error {:.1e}, max |out − q| {:.3}", zero_value, a.shape(), worst, delta);
    }
    Ok(())
}
