use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::train::Objective;
use super::{Codeword, EmevConfig};
use crate::channel::Dims;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::svd::svd_transform;
use crate::tensor::{Activation, AttentionVars, Graph, ParamId, ParamStore, Tensor, Var};

/// Per-sample network inputs derived once from a dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dims: Dims,
    /// `V` as `[rb][row][col][re,im]`.
    pub v: Vec<Vec<f32>>,
    /// Raw singular values `[rb][i]`.
    pub s: Vec<Vec<f32>>,
    /// `|U|` as `[rb][row][col]`.
    pub u_mag: Vec<Vec<f32>>,
    /// Channel tensor as `[rb][rx][tx][re,im]`.
    pub h: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
}

impl Prepared {
    /// Decomposes every sample (in parallel).
    pub fn from_dataset(ds: &Dataset) -> Result<Prepared> {
        let decs = ds
            .samples
            .par_iter()
            .map(svd_transform)
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            dims: ds.dims,
            v: decs.iter().map(|d| d.v_data()).collect(),
            s: decs.iter().map(|d| d.s_data()).collect(),
            u_mag: decs.iter().map(|d| d.u_magnitudes()).collect(),
            h: ds.samples.iter().map(|h| h.data().to_vec()).collect(),
            labels: ds.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layer {
    pub w: ParamId,
    pub b: ParamId,
}

impl Layer {
    pub(crate) fn dense(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Layer {
        Layer {
            w: store.add_uniform(format!("{name}.w"), &[n_in, n_out], n_in, rng),
            b: store.add_zeros(format!("{name}.b"), &[n_out]),
        }
    }

    pub(crate) fn conv(
        store: &mut ParamStore,
        name: &str,
        spatial: usize,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Layer {
        let mut shape = vec![k; spatial];
        shape.extend([cin, cout]);
        let fan_in = k.pow(spatial as u32) * cin;
        Layer {
            w: store.add_uniform(format!("{name}.w"), &shape, fan_in, rng),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
        }
    }

    pub(crate) fn vars(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var) {
        (g.param(store, self.w), g.param(store, self.b))
    }
}

#[derive(Debug, Clone)]
struct Layers {
    conv3d_1: Layer,
    conv3d_2: Layer,
    fc1_v: Layer,
    conv2d_1: Layer,
    conv2d_2: Layer,
    fc1_s: Layer,
    attention: Vec<[ParamId; 8]>,
    fc_code: Layer,
    fc2_v: Layer,
    res_v: Vec<[Layer; 3]>,
    conv3d_3: Layer,
    fc2_s: Layer,
    res_s: Vec<[Layer; 3]>,
    conv2d_3: Layer,
}

/// Residual convolution block: three convolutions (leaky, leaky, linear)
/// added back onto the block input.
pub(crate) fn res_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    convs: &[Layer; 3],
    spatial: usize,
    slope: f32,
) -> Result<Var> {
    let leaky = Activation::LeakyRelu { slope };
    let mut h = x;
    for (i, l) in convs.iter().enumerate() {
        let act = if i < 2 { leaky } else { Activation::Linear };
        let (w, b) = l.vars(g, store);
        h = if spatial == 3 {
            g.conv3d(h, w, b, act)?
        } else {
            g.conv2d(h, w, b, act)?
        };
    }
    g.add(x, h)
}

pub(crate) fn res_layers(
    store: &mut ParamStore,
    name: &str,
    spatial: usize,
    k: usize,
    cin: usize,
    widths: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> [Layer; 3] {
    let mut c = cin;
    let mut out = Vec::with_capacity(3);
    for (i, w) in widths.into_iter().enumerate() {
        out.push(Layer::conv(
            store,
            &format!("{name}.conv_{i}"),
            spatial,
            k,
            c,
            w,
            rng,
        ));
        c = w;
    }
    [out[0], out[1], out[2]]
}

/// EMEVNet: convolutional feature extraction, attention transcoding to the
/// codeword, and a two-branch convolutional decoder.
#[derive(Debug, Clone)]
pub struct EmevNet {
    pub config: EmevConfig,
    pub store: ParamStore,
    layers: Layers,
}

impl EmevNet {
    pub fn new(config: EmevConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let (k, [f1, f2]) = (c.kernel, c.feature_filters);
        let Dims { n_rb, n_r, n_t } = c.dims;
        let conv3d_1 = Layer::conv(&mut st, "feat.conv3d_1", 3, k, 2, f1, &mut rng);
        let conv3d_2 = Layer::conv(&mut st, "feat.conv3d_2", 3, k, f1, f2, &mut rng);
        let fc1_v = Layer::dense(
            &mut st,
            "feat.fc1_v",
            n_rb * n_t * n_t * f2,
            c.l_xi_v,
            &mut rng,
        );
        let conv2d_1 = Layer::conv(&mut st, "feat.conv2d_1", 2, k, 1, f1, &mut rng);
        let conv2d_2 = Layer::conv(&mut st, "feat.conv2d_2", 2, k, f1, f2, &mut rng);
        let fc1_s = Layer::dense(&mut st, "feat.fc1_s", n_rb * n_r * f2, c.l_xi_s, &mut rng);
        let proj = c.heads * c.key_dim;
        let d = c.d_model;
        let attention = (0..c.attention_depth)
            .map(|i| {
                let n = format!("trans.attn_{i}");
                let mut dense = |suffix: &str, a: usize, b: usize| {
                    let l = Layer::dense(&mut st, &format!("{n}.{suffix}"), a, b, &mut rng);
                    [l.w, l.b]
                };
                let [wq, bq] = dense("q", d, proj);
                let [wk, bk] = dense("k", d, proj);
                let [wv, bv] = dense("v", d, proj);
                let [wo, bo] = dense("o", proj, d);
                [wq, bq, wk, bk, wv, bv, wo, bo]
            })
            .collect();
        let fc_code = Layer::dense(&mut st, "trans.fc_code", c.l_xi_v, c.l_eps, &mut rng);
        let fc2_v = Layer::dense(&mut st, "dec.fc2_v", c.l_eps, c.v_len(), &mut rng);
        let res_v = (0..c.res_blocks)
            .map(|i| {
                res_layers(
                    &mut st,
                    &format!("dec.res_v_{i}"),
                    3,
                    k,
                    2,
                    c.res_filters_v,
                    &mut rng,
                )
            })
            .collect();
        let conv3d_3 = Layer::conv(&mut st, "dec.conv3d_3", 3, k, 2, 2, &mut rng);
        let fc2_s = Layer::dense(&mut st, "dec.fc2_s", c.l_eps, c.s_len(), &mut rng);
        let res_s = (0..c.res_blocks)
            .map(|i| {
                res_layers(
                    &mut st,
                    &format!("dec.res_s_{i}"),
                    2,
                    k,
                    1,
                    c.res_filters_s,
                    &mut rng,
                )
            })
            .collect();
        let conv2d_3 = Layer::conv(&mut st, "dec.conv2d_3", 2, k, 1, 1, &mut rng);
        Ok(Self {
            config,
            store: st,
            layers: Layers {
                conv3d_1,
                conv3d_2,
                fc1_v,
                conv2d_1,
                conv2d_2,
                fc1_s,
                attention,
                fc_code,
                fc2_v,
                res_v,
                conv3d_3,
                fc2_s,
                res_s,
                conv2d_3,
            },
        })
    }

    pub fn l_eps(&self) -> usize {
        self.config.l_eps
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu {
            slope: self.config.leaky_slope,
        }
    }

    pub fn s_scale(&self) -> Result<f32> {
        let s = self.config.s_scale;
        if s > 0.0 {
            Ok(s)
        } else {
            Err(Error::Config(
                "s_scale is unset; train on a dataset or set it in the config".into(),
            ))
        }
    }

    /// Feature vectors `(xi_V [B, L_xi_v], xi_S [B, L_xi_s])` from
    /// `V [B, n_rb, n_t, n_t, 2]` and normalized `S [B, n_rb, n_r, 1]`.
    pub fn features_graph(&self, g: &mut Graph, v: Var, s: Var) -> Result<(Var, Var)> {
        let st = &self.store;
        let l = &self.layers;
        let batch = g.value(v).shape()[0];
        let (w, b) = l.conv3d_1.vars(g, st);
        let x = g.conv3d(v, w, b, self.leaky())?;
        let (w, b) = l.conv3d_2.vars(g, st);
        let x = g.conv3d(x, w, b, self.leaky())?;
        let n = g.value(x).len() / batch;
        let x = g.reshape(x, &[batch, n])?;
        let (w, b) = l.fc1_v.vars(g, st);
        let xi_v = g.dense(x, w, b, Activation::Relu)?;

        let (w, b) = l.conv2d_1.vars(g, st);
        let y = g.conv2d(s, w, b, self.leaky())?;
        let (w, b) = l.conv2d_2.vars(g, st);
        let y = g.conv2d(y, w, b, self.leaky())?;
        let n = g.value(y).len() / batch;
        let y = g.reshape(y, &[batch, n])?;
        let (w, b) = l.fc1_s.vars(g, st);
        let xi_s = g.dense(y, w, b, Activation::Relu)?;
        Ok((xi_v, xi_s))
    }

    /// Attention residual blocks and the codeword layer: `[B, L_eps]`.
    pub fn transcode_graph(&self, g: &mut Graph, xi_v: Var, xi_s: Var) -> Result<Var> {
        let c = &self.config;
        let st = &self.store;
        let batch = g.value(xi_v).shape()[0];
        let d = c.d_model;
        let mut x = g.reshape(xi_v, &[batch, c.l_xi_v / d, d])?;
        let key = g.reshape(xi_s, &[batch, c.l_xi_s / d, d])?;
        for (i, ids) in self.layers.attention.iter().enumerate() {
            let [wq, bq, wk, bk, wv, bv, wo, bo] = ids.map(|id| g.param(st, id));
            let p = AttentionVars {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            };
            let kv = if i == 0 { key } else { x };
            let a = g.attention(x, kv, &p, c.heads, c.key_dim)?;
            x = g.add(x, a)?;
        }
        let flat = g.reshape(x, &[batch, c.l_xi_v])?;
        let (w, b) = self.layers.fc_code.vars(g, st);
        g.dense(flat, w, b, Activation::Linear)
    }

    pub fn encode_graph(&self, g: &mut Graph, v: Var, s: Var) -> Result<Var> {
        let (xi_v, xi_s) = self.features_graph(g, v, s)?;
        self.transcode_graph(g, xi_v, xi_s)
    }

    /// `(V_hat [B, n_rb, n_t, n_t, 2], S_hat [B, n_rb, n_r, 1])`, with
    /// `S_hat` still divided by `s_scale`.
    pub fn decode_graph(&self, g: &mut Graph, code: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let st = &self.store;
        let l = &self.layers;
        let batch = g.value(code).shape()[0];
        let Dims { n_rb, n_r, n_t } = c.dims;
        let slope = c.leaky_slope;

        let (w, b) = l.fc2_v.vars(g, st);
        let x = g.dense(code, w, b, Activation::Linear)?;
        let mut x = g.reshape(x, &[batch, n_rb, n_t, n_t, 2])?;
        for blk in &l.res_v {
            x = res_block(g, st, x, blk, 3, slope)?;
        }
        let (w, b) = l.conv3d_3.vars(g, st);
        let v_hat = g.conv3d(x, w, b, Activation::Tanh)?;

        let (w, b) = l.fc2_s.vars(g, st);
        let y = g.dense(code, w, b, Activation::Linear)?;
        let mut y = g.reshape(y, &[batch, n_rb, n_r, 1])?;
        for blk in &l.res_s {
            y = res_block(g, st, y, blk, 2, slope)?;
        }
        let (w, b) = l.conv2d_3.vars(g, st);
        let s_hat = g.conv2d(y, w, b, Activation::Linear)?;
        Ok((v_hat, s_hat))
    }

    /// Stacks samples into `V [B, n_rb, n_t, n_t, 2]` and normalized
    /// `S [B, n_rb, n_r, 1]`.
    pub fn batch_inputs(&self, v: &[&[f32]], s: &[&[f32]]) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        let Dims { n_rb, n_r, n_t } = c.dims;
        if v.len() != s.len() || v.is_empty() {
            return Err(Error::dim(
                "emevnet input",
                "V and S batches must be non-empty and equal",
            ));
        }
        let scale = self.s_scale()?;
        let mut vd = Vec::with_capacity(v.len() * c.v_len());
        let mut sd = Vec::with_capacity(s.len() * c.s_len());
        for (vi, si) in v.iter().zip(s) {
            if vi.len() != c.v_len() || si.len() != c.s_len() {
                return Err(Error::dim(
                    "emevnet input",
                    format!("expected V of {} and S of {} values", c.v_len(), c.s_len()),
                ));
            }
            vd.extend_from_slice(vi);
            sd.extend(si.iter().map(|x| x / scale));
        }
        let b = v.len();
        Ok((
            Tensor::new(&[b, n_rb, n_t, n_t, 2], vd)?,
            Tensor::new(&[b, n_rb, n_r, 1], sd)?,
        ))
    }

    /// Encodes one sample's `(V, S)` (raw singular values).
    pub fn encode(&self, v: &[f32], s: &[f32]) -> Result<Vec<f32>> {
        Ok(self.encode_batch(&[v], &[s])?.pop().expect("one sample"))
    }

    pub fn encode_batch(&self, v: &[&[f32]], s: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let (vt, st) = self.batch_inputs(v, s)?;
        let mut g = Graph::new();
        let (vi, si) = (g.input(vt), g.input(st));
        let code = self.encode_graph(&mut g, vi, si)?;
        Ok(rows(g.value(code), v.len()))
    }

    /// Decodes payloads to `(V_hat, S_hat)` with `S_hat` in physical units.
    pub fn decode_batch(&self, payloads: &[&[f32]]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        let l = self.config.l_eps;
        if payloads.is_empty() || payloads.iter().any(|p| p.len() != l) {
            return Err(Error::dim(
                "decode",
                format!("payloads must have length {l}"),
            ));
        }
        let scale = self.s_scale()?;
        let data: Vec<f32> = payloads.iter().flat_map(|p| p.iter().copied()).collect();
        let mut g = Graph::new();
        let code = g.input(Tensor::new(&[payloads.len(), l], data)?);
        let (vh, sh) = self.decode_graph(&mut g, code)?;
        let vs = rows(g.value(vh), payloads.len());
        let ss = rows(g.value(sh), payloads.len());
        Ok(vs
            .into_iter()
            .zip(ss)
            .map(|(v, s)| (v, s.into_iter().map(|x| x * scale).collect()))
            .collect())
    }

    pub fn decode(&self, payload: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        Ok(self.decode_batch(&[payload])?.pop().expect("one sample"))
    }

    pub fn encode_codeword(&self, v: &[f32], s: &[f32], channel_id: u8) -> Result<Codeword> {
        Ok(Codeword {
            payload: self.encode(v, s)?,
            channel_id,
        })
    }

    /// Full encode/decode pass on a batch.
    pub fn reconstruct_batch(
        &self,
        v: &[&[f32]],
        s: &[&[f32]],
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        let codes = self.encode_batch(v, s)?;
        let refs: Vec<&[f32]> = codes.iter().map(|c| c.as_slice()).collect();
        self.decode_batch(&refs)
    }

    /// Mean joint loss on `idx`, optionally accumulating gradients.
    pub fn batch_loss(&mut self, data: &Prepared, idx: &[usize], grad: bool) -> Result<f64> {
        let v: Vec<&[f32]> = idx.iter().map(|&i| data.v[i].as_slice()).collect();
        let s: Vec<&[f32]> = idx.iter().map(|&i| data.s[i].as_slice()).collect();
        let (vt, st) = self.batch_inputs(&v, &s)?;
        let mut g = Graph::new();
        let (vi, si) = (g.input(vt.clone()), g.input(st.clone()));
        let code = self.encode_graph(&mut g, vi, si)?;
        let (vh, sh) = self.decode_graph(&mut g, code)?;
        let loss = g.joint_mse(vh, &vt, sh, &st, self.config.w_v, self.config.w_s)?;
        if grad {
            g.backward(loss, &mut self.store)?;
        }
        g.scalar(loss)
    }
}

/// Splits a `[B, ...]` tensor into per-sample rows.
pub(crate) fn rows(t: &Tensor, batch: usize) -> Vec<Vec<f32>> {
    let n = t.len() / batch;
    t.data().chunks(n).map(|c| c.to_vec()).collect()
}

/// Training adapter over a prepared dataset.
pub struct EmevObjective<'a> {
    pub net: &'a mut EmevNet,
    pub data: &'a Prepared,
}

impl Objective for EmevObjective<'_> {
    fn batch_loss(&mut self, idx: &[usize], grad: bool) -> Result<f64> {
        self.net.batch_loss(self.data, idx, grad)
    }

    fn store(&self) -> &ParamStore {
        &self.net.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.net.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;

    fn net() -> EmevNet {
        let mut c = EmevConfig::toy(16);
        c.s_scale = 2.0;
        EmevNet::new(c, 1).unwrap()
    }

    fn inputs(n: &EmevNet) -> (Vec<f32>, Vec<f32>) {
        let v = (0..n.config.v_len())
            .map(|i| ((i * 7 % 13) as f32 / 13.0) - 0.5)
            .collect();
        let s = (0..n.config.s_len())
            .map(|i| 1.0 + i as f32 * 0.1)
            .collect();
        (v, s)
    }

    #[test]
    fn shapes_round_trip() {
        let n = net();
        let (v, s) = inputs(&n);
        let code = n.encode(&v, &s).unwrap();
        assert_eq!(code.len(), 16);
        let (vh, sh) = n.decode(&code).unwrap();
        assert_eq!(vh.len(), n.config.v_len());
        assert_eq!(sh.len(), n.config.s_len());
        assert!(vh.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn attention_depth_is_honored() {
        let n = net();
        let (v, s) = inputs(&n);
        let (vt, st) = n.batch_inputs(&[&v], &[&s]).unwrap();
        let mut g = Graph::new();
        let (vi, si) = (g.input(vt), g.input(st));
        n.encode_graph(&mut g, vi, si).unwrap();
        assert_eq!(g.op_count(OpKind::Attention), 5);
    }

    #[test]
    fn zero_parameters_give_zero_codeword() {
        let mut n = net();
        n.store.fill_zero();
        let (v, s) = inputs(&n);
        assert!(n.encode(&v, &s).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_and_single_agree() {
        let n = net();
        let (v, s) = inputs(&n);
        let v2: Vec<f32> = v.iter().map(|x| -x).collect();
        let both = n.encode_batch(&[&v, &v2], &[&s, &s]).unwrap();
        assert_eq!(both[0], n.encode(&v, &s).unwrap());
        assert_eq!(both[1], n.encode(&v2, &s).unwrap());
    }
}
