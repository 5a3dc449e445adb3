//! Full-CSI baseline codec: compresses `H` itself to `L_eps` values; `V`
//! and `S` come from an SVD of the reconstruction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{res_block, res_layers, rows, Layer, Prepared};
use super::train::Objective;
use super::EmevConfig;
use crate::channel::{ChannelTensor, Dims};
use crate::error::{Error, Result};
use crate::svd::{svd_transform, EigenDecomposition};
use crate::tensor::{Activation, Graph, ParamStore, Tensor, Var};

/// Number of residual blocks in the baseline decoder.
pub const BASELINE_RES_BLOCKS: usize = 2;

#[derive(Debug, Clone)]
pub struct BaselineNet {
    pub config: EmevConfig,
    pub store: ParamStore,
    conv_in: Layer,
    fc_enc: Layer,
    fc_dec: Layer,
    res: Vec<[Layer; 3]>,
    conv_out: Layer,
}

impl BaselineNet {
    /// Uses `dims`, `l_eps`, `kernel`, `res_filters_v`, `leaky_slope` and
    /// `s_scale` from `config`.
    pub fn new(config: EmevConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let k = config.kernel;
        let n_h = config.dims.h_entries() * 2;
        let conv_in = Layer::conv(&mut st, "base.conv_in", 3, k, 2, 2, &mut rng);
        let fc_enc = Layer::dense(&mut st, "base.fc_enc", n_h, config.l_eps, &mut rng);
        let fc_dec = Layer::dense(&mut st, "base.fc_dec", config.l_eps, n_h, &mut rng);
        let res = (0..BASELINE_RES_BLOCKS)
            .map(|i| {
                res_layers(
                    &mut st,
                    &format!("base.res_{i}"),
                    3,
                    k,
                    2,
                    config.res_filters_v,
                    &mut rng,
                )
            })
            .collect();
        let conv_out = Layer::conv(&mut st, "base.conv_out", 3, k, 2, 2, &mut rng);
        Ok(Self {
            config,
            store: st,
            conv_in,
            fc_enc,
            fc_dec,
            res,
            conv_out,
        })
    }

    pub fn l_eps(&self) -> usize {
        self.config.l_eps
    }

    fn s_scale(&self) -> Result<f32> {
        match self.config.s_scale {
            s if s > 0.0 => Ok(s),
            _ => Err(Error::Config("s_scale is unset".into())),
        }
    }

    fn shape(&self, batch: usize) -> [usize; 5] {
        let Dims { n_rb, n_r, n_t } = self.config.dims;
        [batch, n_rb, n_r, n_t, 2]
    }

    pub fn encode_graph(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let st = &self.store;
        let batch = g.value(h).shape()[0];
        let (w, b) = self.conv_in.vars(g, st);
        let x = g.conv3d(
            h,
            w,
            b,
            Activation::LeakyRelu {
                slope: self.config.leaky_slope,
            },
        )?;
        let n = g.value(x).len() / batch;
        let x = g.reshape(x, &[batch, n])?;
        let (w, b) = self.fc_enc.vars(g, st);
        g.dense(x, w, b, Activation::Linear)
    }

    pub fn decode_graph(&self, g: &mut Graph, code: Var) -> Result<Var> {
        let st = &self.store;
        let batch = g.value(code).shape()[0];
        let (w, b) = self.fc_dec.vars(g, st);
        let x = g.dense(code, w, b, Activation::Linear)?;
        let mut x = g.reshape(x, &self.shape(batch))?;
        for blk in &self.res {
            x = res_block(g, st, x, blk, 3, self.config.leaky_slope)?;
        }
        let (w, b) = self.conv_out.vars(g, st);
        g.conv3d(x, w, b, Activation::Linear)
    }

    fn batch_input(&self, h: &[&[f32]]) -> Result<Tensor> {
        let scale = self.s_scale()?;
        let n = self.config.dims.h_entries() * 2;
        if h.is_empty() || h.iter().any(|x| x.len() != n) {
            return Err(Error::dim(
                "baseline input",
                format!("expected non-empty batch of {n} values each"),
            ));
        }
        let data = h.iter().flat_map(|x| x.iter().map(|v| v / scale)).collect();
        Tensor::new(&self.shape(h.len()), data)
    }

    /// Reconstructs channel tensors in physical units.
    pub fn reconstruct_h(&self, h: &[&[f32]]) -> Result<Vec<ChannelTensor>> {
        let scale = self.s_scale()?;
        let mut g = Graph::new();
        let x = g.input(self.batch_input(h)?);
        let code = self.encode_graph(&mut g, x)?;
        let out = self.decode_graph(&mut g, code)?;
        rows(g.value(out), h.len())
            .into_iter()
            .map(|r| {
                ChannelTensor::new(self.config.dims, r.into_iter().map(|v| v * scale).collect())
            })
            .collect()
    }

    /// Reconstructs `H` and decomposes it: `(V_hat, S_hat)` per sample.
    pub fn reconstruct_batch(&self, h: &[&[f32]]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        self.reconstruct_h(h)?
            .iter()
            .map(|t| svd_transform(t).map(|d: EigenDecomposition| (d.v_data(), d.s_data())))
            .collect()
    }

    pub fn batch_loss(&mut self, data: &Prepared, idx: &[usize], grad: bool) -> Result<f64> {
        let h: Vec<&[f32]> = idx.iter().map(|&i| data.h[i].as_slice()).collect();
        let target = self.batch_input(&h)?;
        let mut g = Graph::new();
        let x = g.input(target.clone());
        let code = self.encode_graph(&mut g, x)?;
        let out = self.decode_graph(&mut g, code)?;
        let loss = g.mse(out, &target)?;
        if grad {
            g.backward(loss, &mut self.store)?;
        }
        g.scalar(loss)
    }
}

pub struct BaselineObjective<'a> {
    pub net: &'a mut BaselineNet,
    pub data: &'a Prepared,
}

impl Objective for BaselineObjective<'_> {
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
