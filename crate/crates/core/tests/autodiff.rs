mod common;

use common::grad::{attention_oracle_max_error, fd_check, gradient_cases, naive_conv, random};
use emev_core::tensor::{Activation, AttentionVars, Graph, ParamId, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_layer_matches_finite_differences() {
    for mut case in gradient_cases(11) {
        for p in case.store.iter() {
            assert!(
                p.value().len() <= 64,
                "{} has {} elements",
                p.name,
                p.value().len()
            );
        }
        let err = fd_check(&mut case.store, &*case.build);
        assert!(err <= 1e-3, "{}: relative error {err:.3e}", case.name);
    }
}

#[test]
fn dense_spot_values() {
    let mut g = Graph::new();
    let eye = |n: usize| {
        Tensor::new(
            &[n, n],
            (0..n * n)
                .map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap()
    };
    let (x, w, b) = (
        g.input(Tensor::vector(vec![1.0, 2.0, 3.0])),
        g.input(eye(3)),
        g.input(Tensor::zeros(&[3])),
    );
    let y = g.dense(x, w, b, Activation::Linear).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    let (x, w, b) = (
        g.input(Tensor::vector(vec![-1.0, 2.0])),
        g.input(eye(2)),
        g.input(Tensor::zeros(&[2])),
    );
    let y = g.dense(x, w, b, Activation::Relu).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn dense_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, w, b) = (
        random(&mut rng, &[7], 1.0),
        random(&mut rng, &[7, 5], 1.0),
        random(&mut rng, &[5], 1.0),
    );
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.dense(xv, wv, bv, Activation::Linear).unwrap();
    for j in 0..5 {
        let naive: f64 = b.data()[j] as f64
            + (0..7)
                .map(|i| x.data()[i] as f64 * w.data()[i * 5 + j] as f64)
                .sum::<f64>();
        assert!((g.value(y).data()[j] as f64 - naive).abs() < 1e-6);
    }
}

#[test]
fn dense_rejects_mismatched_weights() {
    let mut g = Graph::new();
    let (x, w, b) = (
        g.input(Tensor::zeros(&[3])),
        g.input(Tensor::zeros(&[4, 2])),
        g.input(Tensor::zeros(&[2])),
    );
    assert!(g.dense(x, w, b, Activation::Linear).is_err());
}

fn conv(g: &mut Graph, x: Tensor, w: Tensor, b: Tensor) -> Vec<f32> {
    let (xv, wv, bv) = (g.input(x), g.input(w.clone()), g.input(b));
    let y = if w.rank() == 4 {
        g.conv2d(xv, wv, bv, Activation::Linear).unwrap()
    } else {
        g.conv3d(xv, wv, bv, Activation::Linear).unwrap()
    };
    g.value(y).data().to_vec()
}

#[test]
fn conv_hand_sums() {
    let mut g = Graph::new();
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    let y = conv(
        &mut g,
        Tensor::new(&[1, 1, 1], vec![5.0]).unwrap(),
        Tensor::new(&[3, 3, 1, 1], delta).unwrap(),
        Tensor::zeros(&[1]),
    );
    assert_eq!(y, vec![5.0]);
    let y = conv(
        &mut g,
        Tensor::full(&[3, 3, 1], 1.0),
        Tensor::full(&[3, 3, 1, 1], 1.0),
        Tensor::zeros(&[1]),
    );
    assert_eq!((y[4], y[0]), (9.0, 4.0));
    let mut delta = vec![0.0; 27];
    delta[13] = 1.0;
    let y = conv(
        &mut g,
        Tensor::new(&[1, 1, 1, 1], vec![7.0]).unwrap(),
        Tensor::new(&[3, 3, 3, 1, 1], delta).unwrap(),
        Tensor::zeros(&[1]),
    );
    assert_eq!(y, vec![7.0]);
    let y = conv(
        &mut g,
        Tensor::full(&[3, 3, 3, 1], 1.0),
        Tensor::full(&[3, 3, 3, 1, 1], 1.0),
        Tensor::zeros(&[1]),
    );
    assert_eq!((y[13], y[0]), (27.0, 8.0));
}

#[test]
fn conv_rejects_even_kernels_and_channel_mismatch() {
    let mut g = Graph::new();
    let (x, w, b) = (
        g.input(Tensor::zeros(&[4, 4, 2])),
        g.input(Tensor::zeros(&[2, 2, 2, 1])),
        g.input(Tensor::zeros(&[1])),
    );
    assert!(g.conv2d(x, w, b, Activation::Linear).is_err());
    let w = g.input(Tensor::zeros(&[3, 3, 3, 1]));
    assert!(g.conv2d(x, w, b, Activation::Linear).is_err());
}

#[test]
fn conv2d_random_4x4x2_two_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, w, b) = (
        random(&mut rng, &[4, 4, 2], 1.0),
        random(&mut rng, &[3, 3, 2, 2], 1.0),
        random(&mut rng, &[2], 1.0),
    );
    let y = conv(&mut Graph::new(), x.clone(), w.clone(), b.clone());
    let oracle = naive_conv(x.data(), &[4, 4], w.data(), b.data(), 3, 2, 2);
    for (a, o) in y.iter().zip(&oracle) {
        assert!((*a as f64 - o).abs() < 1e-6);
    }
}

#[test]
fn attention_matches_brute_force() {
    let err = attention_oracle_max_error(50, 4);
    assert!(err < 1e-5, "max deviation {err:.3e}");
}

fn attention_layer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d: usize,
    p: usize,
) -> Vec<ParamId> {
    let shapes = [
        vec![d, p],
        vec![p],
        vec![d, p],
        vec![p],
        vec![d, p],
        vec![p],
        vec![p, d],
        vec![d],
    ];
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("a{i}"), random(rng, s, 1.0)))
        .collect()
}

fn vars(g: &mut Graph, s: &ParamStore, ids: &[ParamId]) -> AttentionVars {
    let v: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
    AttentionVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let ids = attention_layer(&mut s, &mut rng, 4, 6);
    let mut g = Graph::new();
    let q = g.input(random(&mut rng, &[3, 4], 3.0));
    let kv_t = random(&mut rng, &[1, 4], 1.0);
    let kv = g.input(kv_t.clone());
    let av = vars(&mut g, &s, &ids);
    let y = g.attention(q, kv, &av, 2, 3).unwrap();
    // value row projected, then output-projected
    let (wv, bv, wo, bo) = (
        s.get(ids[4]).value(),
        s.get(ids[5]).value(),
        s.get(ids[6]).value(),
        s.get(ids[7]).value(),
    );
    let v: Vec<f64> = (0..6)
        .map(|j| {
            bv.data()[j] as f64
                + (0..4)
                    .map(|i| kv_t.data()[i] as f64 * wv.data()[i * 6 + j] as f64)
                    .sum::<f64>()
        })
        .collect();
    let out: Vec<f64> = (0..4)
        .map(|j| {
            bo.data()[j] as f64
                + (0..6)
                    .map(|c| v[c] * wo.data()[c * 4 + j] as f64)
                    .sum::<f64>()
        })
        .collect();
    for row in g.value(y).data().chunks(4) {
        for (a, b) in row.iter().zip(&out) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let d = 3;
    let mut s = ParamStore::new();
    let eye: Vec<f32> = (0..d * d)
        .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
        .collect();
    let ids: Vec<ParamId> = [true, false, true, false, true, false, true, false]
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let t = if w {
                Tensor::new(&[d, d], eye.clone()).unwrap()
            } else {
                Tensor::zeros(&[d])
            };
            s.add(format!("a{i}"), t)
        })
        .collect();
    let mut g = Graph::new();
    let q = g.input(Tensor::new(&[2, d], vec![0.3, -1.0, 2.0, 1.0, 0.5, -0.2]).unwrap());
    let values = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
    let kv = g.input(Tensor::new(&[4, d], values).unwrap());
    let av = vars(&mut g, &s, &ids);
    let y = g.attention(q, kv, &av, 1, d).unwrap();
    let w = g.attention_weights(y).unwrap();
    assert!(w.iter().all(|&a| (a - 0.25).abs() < 1e-6));
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn attention_rejects_zero_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let ids = attention_layer(&mut s, &mut rng, 4, 6);
    let mut g = Graph::new();
    let q = g.input(Tensor::zeros(&[2, 4]));
    let av = vars(&mut g, &s, &ids);
    assert!(g.attention(q, q, &av, 0, 3).is_err());
}

#[test]
fn joint_loss_arithmetic() {
    let mut g = Graph::new();
    let v = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
    let s = Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap();
    let vh = g.input(v.clone());
    let sh = g.input(s.clone());
    let l = g.joint_mse(vh, &v, sh, &s, 0.5, 0.5).unwrap();
    assert_eq!(g.scalar(l).unwrap(), 0.0);
    let vh = g.input(Tensor::zeros(&[2]));
    let sh = g.input(Tensor::zeros(&[3]));
    let l = g.joint_mse(vh, &v, sh, &s, 1.0, 0.0).unwrap();
    assert_eq!(g.scalar(l).unwrap(), 1.0);
    // V term 0.2 and S term 0.4.
    let v5 = Tensor::zeros(&[5]);
    let vh = g.input(Tensor::new(&[5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let s5 = Tensor::zeros(&[5]);
    let sh = g.input(Tensor::new(&[5], vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let l = g.joint_mse(vh, &v5, sh, &s5, 0.5, 0.5).unwrap();
    assert!((g.scalar(l).unwrap() - 0.3).abs() < 1e-12);
    assert!(g.joint_mse(vh, &v5, sh, &s5, 0.6, 0.5).is_err());
}

#[test]
fn sequential_backward_with_zeroing_matches_separate_runs() {
    let mut cases = gradient_cases(11);
    let grads = |c: &mut common::grad::Case| {
        c.store.zero_grad();
        let mut g = Graph::new();
        let l = (c.build)(&mut g, &c.store).unwrap();
        g.backward(l, &mut c.store).unwrap();
        c.store.iter().map(|p| p.grad().clone()).collect::<Vec<_>>()
    };
    let first = grads(&mut cases[0]);
    let _ = grads(&mut cases[1]);
    let again = grads(&mut cases[0]);
    assert_eq!(first, again);
}

#[test]
fn forward_and_gradients_are_bit_identical_across_runs() {
    let run = || {
        let mut out = Vec::new();
        for mut c in gradient_cases(11) {
            let mut g = Graph::new();
            let l = (c.build)(&mut g, &c.store).unwrap();
            g.backward(l, &mut c.store).unwrap();
            out.push(g.scalar(l).unwrap().to_bits());
            out.extend(c.store.iter().flat_map(|p| {
                p.grad()
                    .data()
                    .iter()
                    .map(|v| v.to_bits() as u64)
                    .collect::<Vec<_>>()
            }));
        }
        out
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_naive_oracle(
        d in 1usize..=5, h in 1usize..=5, w in 1usize..=5,
        cin in 1usize..=3, cout in 1usize..=3, three in any::<bool>(), k in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = if three { vec![d, h, w] } else { vec![h, w] };
        let mut xs = dims.clone();
        xs.push(cin);
        let mut ws = vec![k; dims.len()];
        ws.extend([cin, cout]);
        let (x, wt, b) = (random(&mut rng, &xs, 1.0), random(&mut rng, &ws, 1.0), random(&mut rng, &[cout], 1.0));
        let y = conv(&mut Graph::new(), x.clone(), wt.clone(), b.clone());
        let oracle = naive_conv(x.data(), &dims, wt.data(), b.data(), k, cin, cout);
        for (a, o) in y.iter().zip(&oracle) {
            prop_assert!((*a as f64 - o).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_weights_are_distributions(lq in 1usize..6, lk in 1usize..6, heads in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ids = attention_layer(&mut s, &mut rng, 4, heads * 2);
        let mut g = Graph::new();
        let q = g.input(random(&mut rng, &[lq, 4], 4.0));
        let kv = g.input(random(&mut rng, &[lk, 4], 4.0));
        let av = vars(&mut g, &s, &ids);
        let y = g.attention(q, kv, &av, heads, 2).unwrap();
        let w = g.attention_weights(y).unwrap();
        for row in w.chunks(lk) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(g.value(y).is_finite());
    }

    #[test]
    fn leaky_relu_fixes_non_negative_inputs(x in 0.0f32..1e6, slope in 0.0f32..1.0) {
        prop_assert_eq!(Activation::LeakyRelu { slope }.apply(x), x);
    }
}
