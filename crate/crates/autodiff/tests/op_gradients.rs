//! Central finite differences against the tape's analytic gradients, one op
//! at a time, plus loop oracles for the forward convolution and matmul.

use mcinet_autodiff::{Conv2dOptions, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Checks d(sum(r ⊙ f(inputs)))/d(inputs) for a random projection `r`.
fn check<F>(seed: u64, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let proj = rand_tensor(&mut rng, &probe_shape);
    let eval = |ins: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let p = g.constant(proj.clone());
        let prod = g.mul(out, p).unwrap();
        let loss = g.mean(prod);
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
            })
            .collect();
        (g.value(loss).item(), gs)
    };
    let (_, analytic) = eval(&inputs);
    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "input {} elem {}: analytic {} numeric {} (rel {})",
                i,
                j,
                a,
                numeric,
                err
            );
        }
    }
}

#[test]
fn conv2d_gradients_with_stride_padding_dilation() {
    for (k, opts) in [
        (3, Conv2dOptions::same(3, 1)),
        (3, Conv2dOptions::strided(2, 1)),
        (3, Conv2dOptions::same(3, 2)),
        (1, Conv2dOptions::default()),
        (4, Conv2dOptions::strided(4, 0)),
    ] {
        check(1, &[&[2, 3, 8, 8], &[4, 3, k, k], &[4]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), opts).unwrap()
        });
    }
}

#[test]
fn bmm_gradients_all_transpose_flags() {
    for a_t in [false, true] {
        for b_t in [false, true] {
            let sa: &[usize] = if a_t { &[2, 4, 3] } else { &[2, 3, 4] };
            let sb: &[usize] = if b_t { &[2, 5, 4] } else { &[2, 4, 5] };
            check(2, &[sa, sb], |g, v| g.bmm(v[0], v[1], a_t, b_t).unwrap());
        }
    }
}

#[test]
fn elementwise_and_shape_op_gradients() {
    check(3, &[&[2, 3, 4]], |g, v| g.softmax(v[0]).unwrap());
    check(12, &[&[2, 5, 3, 2]], |g, v| g.channel_norm(v[0], 1e-5).unwrap());
    check(4, &[&[2, 3, 4], &[2, 3, 4]], |g, v| {
        let a = g.mul(v[0], v[1]).unwrap();
        let b = g.sub(a, v[1]).unwrap();
        let c = g.add(b, v[0]).unwrap();
        g.scale(c, 0.7)
    });
    check(5, &[&[2, 3, 4]], |g, v| g.relu(v[0]));
    check(6, &[&[2, 3, 4, 5]], |g, v| g.permute(v[0], &[3, 1, 0, 2]).unwrap());
    check(7, &[&[2, 3, 4]], |g, v| g.reshape(v[0], &[4, 6]).unwrap());
    check(8, &[&[2, 1, 3], &[2, 2, 3], &[2, 3, 3]], |g, v| g.concat(v, 1).unwrap());
    check(9, &[&[1, 2, 4, 4]], |g, v| g.avg_pool(v[0], 2).unwrap());
    check(10, &[&[1, 2, 3, 4]], |g, v| g.global_avg_pool(v[0]).unwrap());
    check(11, &[&[2, 3, 4, 4], &[2, 1, 4, 4]], |g, v| g.mul_channel(v[0], v[1]).unwrap());
}

#[test]
fn resize_gradients_up_and_down() {
    check(12, &[&[1, 2, 4, 4]], |g, v| g.resize_bilinear(v[0], 8, 8).unwrap());
    check(13, &[&[1, 2, 8, 8]], |g, v| g.resize_bilinear(v[0], 3, 5).unwrap());
    check(14, &[&[1, 2, 1, 1]], |g, v| g.resize_bilinear(v[0], 4, 4).unwrap());
}

#[test]
fn bce_gradient_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let target = Tensor::from_fn(vec![1, 1, 3, 3], |_| rng.random_range(0.0..1.0));
    check(15, &[&[1, 1, 3, 3]], move |g, v| {
        let l = g.bce_with_logits(v[0], &target).unwrap();
        g.reshape(l, &[1]).unwrap()
    });
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let (stride, pad, dil) = (2usize, 2usize, 2usize);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g
        .conv2d(xv, wv, Some(bv), Conv2dOptions { stride, padding: pad, dilation: dil })
        .unwrap();
    let out = g.value(y);
    let (ho, wo) = (out.shape()[2], out.shape()[3]);
    assert_eq!((ho, wo), ((7 + 4 - 5) / 2 + 1, (6 + 4 - 5) / 2 + 1));
    for n in 0..2 {
        for o in 0..4 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w.at(&[o, c, ky, kx]) * x.at(&[n, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((out.at(&[n, o, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(g.add(a, b).is_err());
    let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, Conv2dOptions::default()).is_err());
    assert!(g.avg_pool(x, 3).is_err());
    assert!(g.permute(x, &[0, 0, 1, 2]).is_err());
    assert!(g.backward(x).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(vec![2], 3.0));
    let p = g.leaf(Tensor::full(vec![2], 2.0), true);
    let m = g.mul(c, p).unwrap();
    let l = g.mean(m);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.5, 1.5]);
}

#[test]
fn channel_norm_standardizes_each_position() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(vec![1, 4, 2, 2], |i| (i * i) as f64 * 0.3 - 1.0));
    let y = g.channel_norm(x, 0.0).unwrap();
    let d = g.value(y).data();
    for p in 0..4 {
        let col: Vec<f64> = (0..4).map(|c| d[c * 4 + p]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
