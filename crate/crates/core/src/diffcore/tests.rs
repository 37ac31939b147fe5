use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(rng, shape, 1.0)
}

#[test]
fn matmul_identity_and_ones() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai).data(), g.value(a).data());

    let ones_a = g.constant(Tensor::full(&[2, 3], 1.0));
    let ones_b = g.constant(Tensor::full(&[3, 1], 1.0));
    let col = g.matmul(ones_a, ones_b).unwrap();
    assert_eq!(g.value(col).data(), &[3.0, 3.0]);
    assert_eq!(g.value(col).shape(), &[2, 1]);
}

#[test]
fn matmul_rejects_mismatched_inner_extent() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 4]);
    let b = rand_tensor(&mut rng, &[4, 4]);
    let r = grad_check_inputs(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        },
        &[a, b],
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn softmax_zero_row_is_uniform_and_shift_invariant() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 4]));
    let s = g.softmax(z);
    for v in g.value(s).data() {
        assert_eq!(*v, 0.25);
    }
    let x = g.constant(Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap());
    let xs = g.constant(Tensor::from_f64(&[1, 3], &[100.5, 99.0, 102.0]).unwrap());
    let (a, b) = (g.softmax(x), g.softmax(xs));
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f32>::new();
    let x: Tensor<f32> = normal_tensor(&mut rng, &[16, 9], 1e4);
    let xv = g.constant(x);
    let s = g.softmax(xv);
    for row in g.value(s).data().chunks(9) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let err = grad_check(
        |g, v| {
            let s = g.softmax(v);
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv)?;
            Ok(g.sum(p))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn layer_norm_constant_row_and_moments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 6], 3.0));
    let gain = g.constant(Tensor::full(&[6], 1.0));
    let bias = g.constant(Tensor::zeros(&[6]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = g.constant(rand_tensor(&mut rng, &[5, 32]));
    let (gain, bias) = (gain_of(&mut g, 32), bias_of(&mut g, 32));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    for row in g.value(y).data().chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

fn gain_of(g: &mut Graph<f64>, n: usize) -> Var {
    g.constant(Tensor::full(&[n], 1.0))
}

fn bias_of(g: &mut Graph<f64>, n: usize) -> Var {
    g.constant(Tensor::zeros(&[n]))
}

#[test]
fn layer_norm_rejects_single_feature() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 1]));
    let gain = gain_of(&mut g, 1);
    let bias = bias_of(&mut g, 1);
    assert!(g.layer_norm(x, gain, bias, 1e-5).is_err());
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let gain = rand_tensor(&mut rng, &[6]);
    let bias = rand_tensor(&mut rng, &[6]);
    let w = rand_tensor(&mut rng, &[3, 6]);
    let r = grad_check_inputs(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        &[x, gain, bias],
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

fn attention_weights(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights {
    let mut w = || g.constant(normal_tensor(rng, &[d, d], 0.5));
    AttentionWeights {
        wq: w(),
        wk: w(),
        wv: w(),
        wo: w(),
        bo: None,
    }
}

#[test]
fn single_token_attention_is_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::<f64>::new();
    let w = attention_weights(&mut g, &mut rng, 4);
    let x = g.constant(rand_tensor(&mut rng, &[1, 4]));
    let out = multi_head_attention(&mut g, x, x, x, &w, 1, 2, None, None).unwrap();
    assert_eq!(out.attn.probs, vec![1.0, 1.0]);
    let v = g.matmul(x, w.wv).unwrap();
    let expect = g.matmul(v, w.wo).unwrap();
    assert!(g.value(out.tokens).max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn identity_hook_equals_no_hook_and_hooks_never_change_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let w = attention_weights(&mut g, &mut rng, 8);
    let x = g.constant(rand_tensor(&mut rng, &[2 * 5, 8]));
    let plain = multi_head_attention(&mut g, x, x, x, &w, 2, 4, None, None).unwrap();
    let ident = |_: &mut Graph<f64>, v: Var| Ok(v);
    let with_id = multi_head_attention(&mut g, x, x, x, &w, 2, 4, None, Some(&ident)).unwrap();
    assert_eq!(g.value(plain.tokens), g.value(with_id.tokens));
    assert_eq!(plain.attn, with_id.attn);

    let shift = g.constant(normal_tensor(&mut rng, &[8], 1.0));
    let hook_a = move |g: &mut Graph<f64>, v: Var| g.add_row(v, shift);
    let hook_b = |g: &mut Graph<f64>, v: Var| Ok(g.scale(v, -2.0));
    let a = multi_head_attention(&mut g, x, x, x, &w, 2, 4, None, Some(&hook_a)).unwrap();
    let b = multi_head_attention(&mut g, x, x, x, &w, 2, 4, None, Some(&hook_b)).unwrap();
    assert_eq!(a.attn, b.attn);
    assert!(g.value(a.tokens).max_abs_diff(g.value(b.tokens)) > 1e-3);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f64>::new();
    let w = attention_weights(&mut g, &mut rng, 6);
    let x = g.constant(rand_tensor(&mut rng, &[3, 6]));
    assert!(multi_head_attention(&mut g, x, x, x, &w, 1, 4, None, None).is_err());
}

#[test]
fn attention_rows_are_stochastic_and_masked_keys_get_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let q = g.constant(rand_tensor(&mut rng, &[3, 4]));
    let k = g.constant(rand_tensor(&mut rng, &[3 * 4, 4]));
    let v = g.constant(rand_tensor(&mut rng, &[3 * 4, 4]));
    let ninf = f64::NEG_INFINITY;
    // group 0: all keys valid; group 1: key 2 masked; group 2: everything masked
    let bias = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ninf, 0.0, ninf, ninf, ninf, ninf];
    let (out, maps) = g.attention(q, k, v, 3, 2, Some(&bias)).unwrap();
    for h in 0..2 {
        assert!((maps.row(0, h, 0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((maps.row(1, h, 0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(maps.row(1, h, 0)[2], 0.0);
        assert!(maps.row(2, h, 0).iter().all(|p| *p == 0.0));
    }
    assert!(g.value(out).row(2).iter().all(|x| *x == 0.0));
}

#[test]
fn attention_gradient_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = rand_tensor(&mut rng, &[2 * 3, 4]);
    let k = rand_tensor(&mut rng, &[2 * 5, 4]);
    let v = rand_tensor(&mut rng, &[2 * 5, 6]);
    let w = rand_tensor(&mut rng, &[6, 6]);
    let mut bias = vec![0.0; 10];
    bias[3] = f64::NEG_INFINITY;
    let r = grad_check_inputs(
        |g, x| {
            let (a, _) = g.attention(x[0], x[1], x[2], 2, 2, Some(&bias))?;
            let wv = g.constant(w.clone());
            let p = g.mul(a, wv)?;
            Ok(g.sum(p))
        },
        &[q, k, v],
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn mlp_zero_weights_and_single_layer() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 3], 1.5));
    let w0 = g.constant(Tensor::zeros(&[3, 4]));
    let b0 = g.constant(Tensor::zeros(&[4]));
    let w1 = g.constant(Tensor::zeros(&[4, 2]));
    let b1 = g.constant(Tensor::zeros(&[2]));
    let y = mlp_forward(&mut g, x, &[(w0, b0), (w1, b1)], Activation::Gelu).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = g.constant(rand_tensor(&mut rng, &[3, 2]));
    let b = g.constant(rand_tensor(&mut rng, &[2]));
    let one = mlp_forward(&mut g, x, &[(w, b)], Activation::Gelu).unwrap();
    let mm = g.matmul(x, w).unwrap();
    let manual = g.add_row(mm, b).unwrap();
    assert_eq!(g.value(one), g.value(manual));
}

#[test]
fn mlp_rejects_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 4]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(mlp_forward(&mut g, x, &[(w, b)], Activation::Gelu).is_err());
}

#[test]
fn mlp_three_layer_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shapes = [[5, 7], [7, 6], [6, 3]];
    let mut inputs = vec![rand_tensor(&mut rng, &[4, 5])];
    for s in shapes {
        inputs.push(normal_tensor(&mut rng, &s, 0.5));
        inputs.push(normal_tensor(&mut rng, &[s[1]], 0.5));
    }
    let r = grad_check_inputs(
        |g, v| {
            let layers = [(v[1], v[2]), (v[3], v[4]), (v[5], v[6])];
            let y = mlp_forward(g, v[0], &layers, Activation::Gelu)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &inputs,
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn grad_check_of_sum_and_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[7]);
    let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-4).unwrap();
    assert!(err < 1e-9, "{err}");

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    for (gx, xi) in grads.get(v).unwrap().data().iter().zip(x.data()) {
        assert!((gx - 2.0 * xi).abs() < 1e-6);
    }
}

#[test]
fn conv_upsample_gather_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let shape = ConvShape {
        height: 6,
        width: 4,
        kernel: 3,
        stride: 2,
    };
    let x = rand_tensor(&mut rng, &[24, 2]);
    let w = normal_tensor(&mut rng, &[18, 3], 0.5);
    let taps = vec![
        Some(BilinearTaps {
            idx: [0, 1, 2, 3],
            w: [0.1, 0.2, 0.3, 0.4],
        }),
        None,
        Some(BilinearTaps {
            idx: [5, 4, 7, 6],
            w: [0.25, 0.25, 0.25, 0.25],
        }),
    ];
    let r = grad_check_inputs(
        |g, v| {
            let y = g.conv2d(v[0], v[1], shape)?;
            let y = g.gelu(y);
            let up = g.upsample2(y, shape.out_height(), shape.out_width())?;
            let gathered = g.gather(up, taps.clone())?;
            let cat = g.concat_cols(gathered, gathered)?;
            let pooled = g.mean_groups(cat, 3)?;
            let sq = g.mul(pooled, pooled)?;
            let total = g.sum(sq);
            let yy = g.mul(y, y)?;
            let extra = g.sum(yy);
            let both = g.add(total, extra)?;
            Ok(both)
        },
        &[x, w],
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn conv_output_extent_is_ceil_of_stride() {
    for (h, s, expect) in [(48, 2, 24), (64, 2, 32), (7, 2, 4), (12, 1, 12)] {
        let shape = ConvShape {
            height: h,
            width: 4,
            kernel: 3,
            stride: s,
        };
        assert_eq!(shape.out_height(), expect);
    }
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(g.backward(x).is_err());
}
