#![allow(
    clippy::type_complexity,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

//! Finite-difference gradient checks and brute-force layer oracles.

use emev_core::tensor::{Activation, AttentionVars, Graph, ParamId, ParamStore, Tensor, Var};
use emev_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-2;
/// Lower bound on the denominator of the relative error.
pub const GRAD_FLOOR: f64 = 1e-2;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Largest norm-wise relative error `|g_a - g_fd| / max(|g_a|, |g_fd|)` over
/// every tensor in `store`. `build` must return a scalar loss.
pub fn fd_check(
    store: &mut ParamStore,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> f64 {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store).unwrap();
    g.backward(loss, store).unwrap();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s).unwrap();
        g.scalar(l).unwrap()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_tensor = Vec::new();
    for id in ids {
        let analytic: Vec<f64> = store
            .get(id)
            .grad()
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.get(id).value().data()[k];
            store.get_mut(id).value_mut().data_mut()[k] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(id).value_mut().data_mut()[k] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(id).value_mut().data_mut()[k] = orig;
            // Divide by the step actually representable in f32.
            let h = ((orig + FD_STEP) as f64) - ((orig - FD_STEP) as f64);
            numeric.push((up - down) / h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        per_tensor.push((diff, na.max(nn)));
    }
    // Gradients that vanish identically (a key bias under softmax, say) are
    // compared against a floor tied to the largest gradient in the case, since
    // f32 central-difference noise scales with the loss surface.
    let scale = per_tensor.iter().map(|t| t.1).fold(0.0, f64::max);
    let floor = GRAD_FLOOR.max(0.1 * scale);
    per_tensor
        .iter()
        .map(|&(d, n)| d / n.max(floor))
        .fold(0.0, f64::max)
}

/// Shapes for one gradient case: every tensor has at most 64 elements.
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore,
    pub build: Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>,
}

fn p(g: &mut Graph, s: &ParamStore, name: &str) -> Var {
    g.param(s, s.find(name).unwrap())
}

/// One case per layer type and loss, all with differentiable activations.
pub fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let mut s = ParamStore::new();
    s.add("x", random(&mut rng, &[3, 5], 1.0));
    s.add("w", random(&mut rng, &[5, 4], 0.5));
    s.add("b", random(&mut rng, &[4], 0.5));
    let target = random(&mut rng, &[3, 4], 1.0);
    cases.push(Case {
        name: "dense+tanh+mse",
        store: s,
        build: Box::new(move |g, s| {
            let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
            let y = g.dense(x, w, b, Activation::Tanh)?;
            g.mse(y, &target)
        }),
    });

    let mut s = ParamStore::new();
    s.add("x", random(&mut rng, &[2, 4, 3, 2], 1.0));
    s.add("w", random(&mut rng, &[3, 3, 2, 3], 0.5));
    s.add("b", random(&mut rng, &[3], 0.5));
    let target = random(&mut rng, &[2, 4, 3, 3], 1.0);
    cases.push(Case {
        name: "conv2d+tanh+mse",
        store: s,
        build: Box::new(move |g, s| {
            let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
            let y = g.conv2d(x, w, b, Activation::Tanh)?;
            g.mse(y, &target)
        }),
    });

    let mut s = ParamStore::new();
    s.add("x", random(&mut rng, &[2, 2, 3, 2, 2], 1.0));
    s.add("w", random(&mut rng, &[3, 3, 3, 2, 1], 0.3));
    s.add("b", random(&mut rng, &[1], 0.5));
    let target = random(&mut rng, &[2, 2, 3, 2, 1], 1.0);
    cases.push(Case {
        name: "conv3d+linear+mse",
        store: s,
        build: Box::new(move |g, s| {
            let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
            let y = g.conv3d(x, w, b, Activation::Linear)?;
            g.mse(y, &target)
        }),
    });

    for (name, lk) in [("attention (cross)", 5usize), ("attention (self)", 0)] {
        let mut s = ParamStore::new();
        // Large enough that the scores, not only the values, move the loss
        // well above f32 rounding noise.
        s.add("q", random(&mut rng, &[2, 4, 6], 2.0));
        if lk > 0 {
            s.add("kv", random(&mut rng, &[2, lk, 6], 2.0));
        }
        for (n, shape) in [
            ("wq", vec![6, 6]),
            ("bq", vec![6]),
            ("wk", vec![6, 6]),
            ("bk", vec![6]),
            ("wv", vec![6, 6]),
            ("bv", vec![6]),
            ("wo", vec![6, 6]),
            ("bo", vec![6]),
        ] {
            s.add(n, random(&mut rng, &shape, 1.0));
        }
        let target = random(&mut rng, &[2, 4, 6], 1.0);
        cases.push(Case {
            name,
            store: s,
            build: Box::new(move |g, s| {
                let q = p(g, s, "q");
                let kv = if s.find("kv").is_some() {
                    p(g, s, "kv")
                } else {
                    q
                };
                let vars = AttentionVars {
                    wq: p(g, s, "wq"),
                    bq: p(g, s, "bq"),
                    wk: p(g, s, "wk"),
                    bk: p(g, s, "bk"),
                    wv: p(g, s, "wv"),
                    bv: p(g, s, "bv"),
                    wo: p(g, s, "wo"),
                    bo: p(g, s, "bo"),
                };
                let y = g.attention(q, kv, &vars, 2, 3)?;
                let y = g.add(y, q)?;
                g.mse(y, &target)
            }),
        });
    }

    let mut s = ParamStore::new();
    s.add("v", random(&mut rng, &[2, 3, 4], 1.0));
    s.add("s", random(&mut rng, &[2, 5], 1.0));
    let (tv, ts) = (
        random(&mut rng, &[2, 3, 4], 1.0),
        random(&mut rng, &[2, 5], 1.0),
    );
    cases.push(Case {
        name: "joint mse",
        store: s,
        build: Box::new(move |g, s| {
            let (v, sv) = (p(g, s, "v"), p(g, s, "s"));
            let v = g.activate(v, Activation::Tanh);
            g.joint_mse(v, &tv, sv, &ts, 0.3, 0.7)
        }),
    });

    let mut s = ParamStore::new();
    s.add("x", random(&mut rng, &[3, 2, 4, 2], 1.0));
    s.add("w", random(&mut rng, &[2, 5], 0.7));
    s.add("b", random(&mut rng, &[5], 0.5));
    cases.push(Case {
        name: "pool+dense+cross-entropy",
        store: s,
        build: Box::new(move |g, s| {
            let (x, w, b) = (p(g, s, "x"), p(g, s, "w"), p(g, s, "b"));
            let pooled = g.global_avg_pool(x)?;
            let logits = g.dense(pooled, w, b, Activation::Linear)?;
            g.softmax_cross_entropy(logits, &[1, 4, 0])
        }),
    });

    let mut s = ParamStore::new();
    // Offset away from zero so the leaky kink is never crossed by the step.
    let shifted: Vec<f32> = random(&mut rng, &[4, 6], 1.0)
        .data()
        .iter()
        .map(|v| if *v >= 0.0 { v + 0.1 } else { v - 0.1 })
        .collect();
    s.add("x", Tensor::new(&[4, 6], shifted).unwrap());
    let target = random(&mut rng, &[2, 12], 1.0);
    cases.push(Case {
        name: "leaky+reshape+scale+sum",
        store: s,
        build: Box::new(move |g, s| {
            let x = p(g, s, "x");
            let y = g.activate(x, Activation::LeakyRelu { slope: 0.2 });
            let y = g.reshape(y, &[2, 12])?;
            let z = g.scale(y, 1.5)?;
            let a = g.mse(z, &target)?;
            let b = g.mse(y, &target)?;
            g.weighted_sum(&[(a, 0.25), (b, 0.75)])
        }),
    });
    cases
}

/// Naive same-padded convolution in f64. `dims` are the spatial sizes
/// (2 or 3 of them), `x` is `[dims..., cin]`, `w` is `[k; n][cin][cout]`.
pub fn naive_conv(
    x: &[f32],
    dims: &[usize],
    w: &[f32],
    bias: &[f32],
    k: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let (d, h, wd) = match dims {
        [h, w] => (1, *h, *w),
        [d, h, w] => (*d, *h, *w),
        _ => panic!("2 or 3 spatial dims"),
    };
    let kd = if dims.len() == 3 { k } else { 1 };
    let pad = (k / 2) as isize;
    let pad_d = if dims.len() == 3 { pad } else { 0 };
    let mut out = vec![0.0f64; d * h * wd * cout];
    for z in 0..d {
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = bias[co] as f64;
                    for a in 0..kd {
                        for b in 0..k {
                            for c in 0..k {
                                let (iz, iy, ix) = (
                                    z as isize + a as isize - pad_d,
                                    y as isize + b as isize - pad,
                                    xx as isize + c as isize - pad,
                                );
                                if iz < 0
                                    || iy < 0
                                    || ix < 0
                                    || iz >= d as isize
                                    || iy >= h as isize
                                    || ix >= wd as isize
                                {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xi = (((iz as usize) * h + iy as usize) * wd + ix as usize)
                                        * cin
                                        + ci;
                                    let wi = (((a * k + b) * k + c) * cin + ci) * cout + co;
                                    acc += x[xi] as f64 * w[wi] as f64;
                                }
                            }
                        }
                    }
                    out[((z * h + y) * wd + xx) * cout + co] = acc;
                }
            }
        }
    }
    out
}

/// Explicit per-head attention: projections, score matrix, softmax and
/// weighted sum, all in f64. Weights are `[wq, bq, wk, bk, wv, bv, wo, bo]`.
pub fn brute_attention(
    xq: &[f32],
    xkv: &[f32],
    w: &[Vec<f32>; 8],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    key_dim: usize,
) -> Vec<f64> {
    let p = heads * key_dim;
    let proj = |x: &[f32],
                rows: usize,
                wm: &[f32],
                b: &[f32],
                n_in: usize,
                n_out: usize|
     -> Vec<Vec<f64>> {
        (0..rows)
            .map(|r| {
                (0..n_out)
                    .map(|j| {
                        b[j] as f64
                            + (0..n_in)
                                .map(|i| x[r * n_in + i] as f64 * wm[i * n_out + j] as f64)
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let q = proj(xq, lq, &w[0], &w[1], d, p);
    let k = proj(xkv, lk, &w[2], &w[3], d, p);
    let v = proj(xkv, lk, &w[4], &w[5], d, p);
    let mut z = vec![vec![0.0f64; p]; lq];
    for h in 0..heads {
        let cols = h * key_dim..(h + 1) * key_dim;
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (key_dim as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for j in 0..lk {
                for c in cols.clone() {
                    z[i][c] += e[j] / total * v[j][c];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(lq * d);
    for i in 0..lq {
        for j in 0..d {
            out.push(
                w[7][j] as f64
                    + (0..p)
                        .map(|c| z[i][c] * w[6][c * d + j] as f64)
                        .sum::<f64>(),
            );
        }
    }
    out
}

/// Runs `cases` random attention instances against [`brute_attention`] and
/// returns the largest absolute deviation.
pub fn attention_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.gen_range(1..=3);
        let key_dim = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=6);
        let (lq, lk) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let p = heads * key_dim;
        let xq = random(&mut rng, &[lq, d], 1.0);
        let xkv = random(&mut rng, &[lk, d], 1.0);
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
        let w: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, 0.8)).collect();
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = w
            .iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("w{i}"), t.clone()))
            .collect();
        let mut g = Graph::new();
        let (q, kv) = (g.input(xq.clone()), g.input(xkv.clone()));
        let pv: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let vars = AttentionVars {
            wq: pv[0],
            bq: pv[1],
            wk: pv[2],
            bk: pv[3],
            wv: pv[4],
            bv: pv[5],
            wo: pv[6],
            bo: pv[7],
        };
        let y = g.attention(q, kv, &vars, heads, key_dim).unwrap();
        let wd: [Vec<f32>; 8] = std::array::from_fn(|i| w[i].data().to_vec());
        let oracle = brute_attention(xq.data(), xkv.data(), &wd, lq, lk, d, heads, key_dim);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    worst
}
