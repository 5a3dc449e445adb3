use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, AttnCache, AttnGeom, AttnWeights, ConvGeom};
use super::{Activation, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    graph: u64,
}

/// Coarse operation category, used for instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Param,
    Dense,
    Activation,
    Conv,
    Attention,
    Add,
    Reshape,
    Scale,
    Mse,
    WeightedSum,
    SoftmaxCrossEntropy,
    GlobalAvgPool,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Dense {
        x: usize,
        w: usize,
        b: usize,
        n_in: usize,
        n_out: usize,
    },
    Activation {
        x: usize,
        act: Activation,
    },
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    Attention {
        q: usize,
        kv: usize,
        params: [usize; 8],
        geom: AttnGeom,
        caches: Vec<AttnCache>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Reshape {
        x: usize,
    },
    Scale {
        x: usize,
        factor: f32,
    },
    Mse {
        x: usize,
        target: Tensor,
    },
    WeightedSum {
        terms: Vec<(usize, f32)>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    GlobalAvgPool {
        x: usize,
        channels: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Dense { .. } => OpKind::Dense,
            Op::Activation { .. } => OpKind::Activation,
            Op::Conv { .. } => OpKind::Conv,
            Op::Attention { .. } => OpKind::Attention,
            Op::Add { .. } => OpKind::Add,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Scale { .. } => OpKind::Scale,
            Op::Mse { .. } => OpKind::Mse,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Losses are accumulated in f64; this keeps the unrounded value.
    scalar: Option<f64>,
}

/// Projection parameters of one multi-head attention layer, already placed
/// on the graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Single-writer tape of forward operations.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar: None,
        });
        Var {
            idx: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable belongs to a different graph".into()));
        }
        Ok(v.idx)
    }

    fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).shared_value();
        self.push_shared(value, Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    /// Scalar value of a loss node, in the f64 it was accumulated in.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[self.check(v)?];
        match n.scalar {
            Some(s) => Ok(s),
            None if n.value.len() == 1 => Ok(n.value.data()[0] as f64),
            None => Err(Error::Usage("not a scalar node".into())),
        }
    }

    pub fn op_count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Softmax weights of an attention node, laid out `[batch][head][i][j]`.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<f32>> {
        match &self.nodes.get(v.idx)?.op {
            Op::Attention { caches, .. } => Some(
                caches
                    .iter()
                    .flat_map(|c| c.weights().iter().copied())
                    .collect(),
            ),
            _ => None,
        }
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Affine layer followed by `act`. Accepts `[n_in]` or `[batch, n_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let ws = self.node(wi).value.shape().to_vec();
        if ws.len() != 2 {
            return Err(Error::dim(
                "dense",
                format!("weights must be rank 2, got {ws:?}"),
            ));
        }
        let (n_in, n_out) = (ws[0], ws[1]);
        if self.node(bi).value.shape() != [n_out] {
            return Err(Error::dim(
                "dense",
                format!(
                    "bias shape {:?}, expected [{n_out}]",
                    self.node(bi).value.shape()
                ),
            ));
        }
        let xs = self.node(xi).value.shape().to_vec();
        let out_shape = match xs.as_slice() {
            [n] if *n == n_in => vec![n_out],
            [bsz, n] if *n == n_in => vec![*bsz, n_out],
            _ => {
                return Err(Error::dim(
                    "dense",
                    format!("input {xs:?} does not match weights [{n_in}, {n_out}]"),
                ))
            }
        };
        let y = kernels::dense_forward(
            self.node(xi).value.data(),
            self.node(wi).value.data(),
            self.node(bi).value.data(),
            n_in,
            n_out,
        );
        let rg = self.rg(&[xi, wi, bi]);
        let out = self.push(
            Tensor::new(&out_shape, y)?,
            Op::Dense {
                x: xi,
                w: wi,
                b: bi,
                n_in,
                n_out,
            },
            rg,
        );
        Ok(self.activate(out, act))
    }

    /// Applies an element-wise activation. Linear is a no-op.
    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Linear {
            return x;
        }
        let xi = x.idx;
        let input = &self.node(xi).value;
        let data = input.data().iter().map(|&v| act.apply(v)).collect();
        let t = Tensor::new(input.shape(), data).expect("activation preserves shape");
        let rg = self.rg(&[xi]);
        self.push(t, Op::Activation { x: xi, act }, rg)
    }

    /// Same-padded 2D convolution. Input `[H, W, C]` or `[B, H, W, C]`,
    /// filters `[K, K, C_in, C_out]`, bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        self.conv(x, w, b, act, 2)
    }

    /// Same-padded 3D convolution. Input `[D, H, W, C]` or `[B, D, H, W, C]`,
    /// filters `[K, K, K, C_in, C_out]`, bias `[C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        self.conv(x, w, b, act, 3)
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, act: Activation, spatial: usize) -> Result<Var> {
        let op_name = if spatial == 2 { "conv2d" } else { "conv3d" };
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let ws = self.node(wi).value.shape().to_vec();
        if ws.len() != spatial + 2 {
            return Err(Error::dim(
                op_name,
                format!("filters must be rank {}, got {ws:?}", spatial + 2),
            ));
        }
        let k = ws[0];
        if ws[..spatial].iter().any(|&d| d != k) {
            return Err(Error::Config(format!("{op_name}: non-cubic kernel {ws:?}")));
        }
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{op_name}: kernel size {k} must be odd"
            )));
        }
        let (cin, cout) = (ws[spatial], ws[spatial + 1]);
        if self.node(bi).value.shape() != [cout] {
            return Err(Error::dim(op_name, format!("bias must be [{cout}]")));
        }
        let xs = self.node(xi).value.shape().to_vec();
        let batched = match xs.len() {
            r if r == spatial + 1 => false,
            r if r == spatial + 2 => true,
            _ => return Err(Error::dim(op_name, format!("input rank mismatch: {xs:?}"))),
        };
        let batch = if batched { xs[0] } else { 1 };
        let sp = &xs[usize::from(batched)..xs.len() - 1];
        if *xs.last().unwrap() != cin {
            return Err(Error::dim(
                op_name,
                format!(
                    "input has {} channels, filters expect {cin}",
                    xs.last().unwrap()
                ),
            ));
        }
        let (dims, kernel) = if spatial == 2 {
            ([1, sp[0], sp[1]], [1, k, k])
        } else {
            ([sp[0], sp[1], sp[2]], [k, k, k])
        };
        let geom = ConvGeom {
            batch,
            dims,
            kernel,
            cin,
            cout,
        };
        let y = kernels::conv_forward(
            &geom,
            self.node(xi).value.data(),
            self.node(wi).value.data(),
            self.node(bi).value.data(),
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(&[xi, wi, bi]);
        let out = self.push(
            Tensor::new(&shape, y)?,
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                geom,
            },
            rg,
        );
        Ok(self.activate(out, act))
    }

    /// Multi-head scaled dot-product attention. `query` is `[L_q, d]` or
    /// `[B, L_q, d]`; `key_value` supplies both keys and values.
    pub fn attention(
        &mut self,
        query: Var,
        key_value: Var,
        p: &AttentionVars,
        heads: usize,
        key_dim: usize,
    ) -> Result<Var> {
        if heads == 0 || key_dim == 0 {
            return Err(Error::Config(
                "attention needs heads > 0 and key_dim > 0".into(),
            ));
        }
        let qi = self.check(query)?;
        let ki = self.check(key_value)?;
        let pids = [p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo]
            .map(|v| self.check(v))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let qs = self.node(qi).value.shape().to_vec();
        let ks = self.node(ki).value.shape().to_vec();
        let (batch, lq, d, lk) = match (qs.as_slice(), ks.as_slice()) {
            ([lq, d], [lk, dk]) if d == dk => (1, *lq, *d, *lk),
            ([b, lq, d], [bk, lk, dk]) if d == dk && b == bk => (*b, *lq, *d, *lk),
            _ => {
                return Err(Error::dim(
                    "attention",
                    format!("query {qs:?} and key/value {ks:?} disagree"),
                ))
            }
        };
        let proj = heads * key_dim;
        let expect: [&[usize]; 8] = [
            &[d, proj],
            &[proj],
            &[d, proj],
            &[proj],
            &[d, proj],
            &[proj],
            &[proj, d],
            &[d],
        ];
        let names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];
        for ((&pi, e), name) in pids.iter().zip(expect).zip(names) {
            if self.node(pi).value.shape() != e {
                return Err(Error::Config(format!(
                    "attention {name} has shape {:?}, expected {e:?}",
                    self.node(pi).value.shape()
                )));
            }
        }
        let geom = AttnGeom {
            batch,
            lq,
            lk,
            d_model: d,
            heads,
            key_dim,
        };
        let pv = |i: usize| self.nodes[pids[i]].value.data();
        let wts = AttnWeights {
            wq: pv(0),
            bq: pv(1),
            wk: pv(2),
            bk: pv(3),
            wv: pv(4),
            bv: pv(5),
            wo: pv(6),
            bo: pv(7),
        };
        let (y, caches) = kernels::attention_forward(
            &geom,
            &wts,
            self.node(qi).value.data(),
            self.node(ki).value.data(),
        );
        let mut all = vec![qi, ki];
        all.extend_from_slice(&pids);
        let rg = self.rg(&all);
        let params: [usize; 8] = pids.try_into().expect("eight projection tensors");
        Ok(self.push(
            Tensor::new(&qs, y)?,
            Op::Attention {
                q: qi,
                kv: ki,
                params,
                geom,
                caches,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.node(ai).value, &self.node(bi).value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(t, Op::Add { a: ai, b: bi }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let t = (*self.node(xi).value).clone().reshape(shape)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(t, Op::Reshape { x: xi }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xi = self.check(x)?;
        let input = &self.node(xi).value;
        let t = Tensor::new(
            input.shape(),
            input.data().iter().map(|v| v * factor).collect(),
        )?;
        let rg = self.rg(&[xi]);
        Ok(self.push(t, Op::Scale { x: xi, factor }, rg))
    }

    /// Mean squared error against a constant target, averaged over every
    /// element (and therefore over the batch).
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xi = self.check(x)?;
        let input = &self.node(xi).value;
        if input.shape() != target.shape() {
            return Err(Error::dim(
                "mse",
                format!(
                    "prediction {:?} vs target {:?}",
                    input.shape(),
                    target.shape()
                ),
            ));
        }
        let n = input.len() as f64;
        let sum: f64 = input
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let loss = sum / n;
        let rg = self.rg(&[xi]);
        let v = self.push(
            Tensor::scalar(loss as f32),
            Op::Mse {
                x: xi,
                target: target.clone(),
            },
            rg,
        );
        self.nodes[v.idx].scalar = Some(loss);
        Ok(v)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut total = 0.0f64;
        for &(v, w) in terms {
            let i = self.check(v)?;
            total += w as f64 * self.scalar(v)?;
            idx.push((i, w));
        }
        let ids: Vec<usize> = idx.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        let v = self.push(
            Tensor::scalar(total as f32),
            Op::WeightedSum { terms: idx },
            rg,
        );
        self.nodes[v.idx].scalar = Some(total);
        Ok(v)
    }

    /// Joint reconstruction loss `w_v * mse(V) + w_s * mse(S)`.
    pub fn joint_mse(
        &mut self,
        v_hat: Var,
        v: &Tensor,
        s_hat: Var,
        s: &Tensor,
        w_v: f32,
        w_s: f32,
    ) -> Result<Var> {
        check_joint_weights(w_v, w_s)?;
        let lv = self.mse(v_hat, v)?;
        let ls = self.mse(s_hat, s)?;
        self.weighted_sum(&[(lv, w_v), (ls, w_s)])
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let t = &self.node(li).value;
        let (b, c) = match t.shape() {
            [b, c] => (*b, *c),
            s => return Err(Error::dim("softmax_cross_entropy", format!("logits {s:?}"))),
        };
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                "labels do not match logits",
            ));
        }
        let probs = softmax_rows(t.data(), c);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * c + l].max(1e-30) as f64).ln())
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(&[li]);
        let v = self.push(
            Tensor::scalar(loss as f32),
            Op::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        );
        self.nodes[v.idx].scalar = Some(loss);
        Ok(v)
    }

    /// Averages a `[B, ..., C]` map over every axis but batch and channel.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = &self.node(xi).value;
        let s = t.shape();
        if s.len() < 3 {
            return Err(Error::dim("global_avg_pool", format!("input {s:?}")));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let per = t.len() / (b * c);
        let mut out = vec![0.0f32; b * c];
        for bi in 0..b {
            for p in 0..per {
                for ch in 0..c {
                    out[bi * c + ch] += t.data()[(bi * per + p) * c + ch];
                }
            }
        }
        for v in &mut out {
            *v /= per as f32;
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(
            Tensor::new(&[b, c], out)?,
            Op::GlobalAvgPool { x: xi, channels: c },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Parameter gradients are *added* to
    /// the store; zero them between optimizer steps.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage(
                "backward on a tensor from another graph".into(),
            ));
        }
        let root = &self.nodes[loss.idx];
        if !root.requires_grad {
            return Err(Error::Usage("backward on a detached tensor".into()));
        }
        if root.value.len() != 1 {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.grad().len() != g.len() {
                        return Err(Error::dim(
                            "backward",
                            format!("gradient size for {}", p.name),
                        ));
                    }
                    for (a, v) in p.grad_mut().data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                Op::Dense {
                    x,
                    w,
                    b,
                    n_in,
                    n_out,
                } => {
                    if self.nodes[*x].requires_grad {
                        let dx = kernels::dense_backward_input(
                            &g,
                            self.nodes[*w].value.data(),
                            *n_in,
                            *n_out,
                        );
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let dw = kernels::dense_backward_weight(
                            self.nodes[*x].value.data(),
                            &g,
                            *n_in,
                            *n_out,
                        );
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.nodes[*b].requires_grad {
                        self.accumulate(&mut grads, *b, kernels::sum_rows(&g, *n_out));
                    }
                }
                Op::Activation { x, act } => {
                    let xin = self.nodes[*x].value.data();
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(xin.iter().zip(y))
                        .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Conv { x, w, b, geom } => {
                    if self.nodes[*x].requires_grad {
                        let dx =
                            kernels::conv_backward_input(geom, &g, self.nodes[*w].value.data());
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*w].requires_grad {
                        let dw =
                            kernels::conv_backward_weight(geom, self.nodes[*x].value.data(), &g);
                        self.accumulate(&mut grads, *w, dw);
                    }
                    if self.nodes[*b].requires_grad {
                        self.accumulate(&mut grads, *b, kernels::sum_rows(&g, geom.cout));
                    }
                }
                Op::Attention {
                    q,
                    kv,
                    params,
                    geom,
                    caches,
                } => {
                    let pv = |k: usize| self.nodes[params[k]].value.data();
                    let wts = AttnWeights {
                        wq: pv(0),
                        bq: pv(1),
                        wk: pv(2),
                        bk: pv(3),
                        wv: pv(4),
                        bv: pv(5),
                        wo: pv(6),
                        bo: pv(7),
                    };
                    let ag = kernels::attention_backward(
                        geom,
                        &wts,
                        caches,
                        self.nodes[*q].value.data(),
                        self.nodes[*kv].value.data(),
                        &g,
                    );
                    self.accumulate(&mut grads, *q, ag.dxq);
                    self.accumulate(&mut grads, *kv, ag.dxk);
                    for (k, dp) in ag.params.into_iter().enumerate() {
                        self.accumulate(&mut grads, params[k], dp);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Reshape { x } => self.accumulate(&mut grads, *x, g),
                Op::Scale { x, factor } => {
                    let dx = g.iter().map(|v| v * factor).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Mse { x, target } => {
                    let xin = self.nodes[*x].value.data();
                    let k = 2.0 * g[0] / xin.len() as f32;
                    let dx = xin
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &t)| k * (a - t))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::WeightedSum { terms } => {
                    for &(t, w) in terms {
                        self.accumulate(&mut grads, t, vec![g[0] * w]);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = probs.len() / labels.len();
                    let k = g[0] / labels.len() as f32;
                    let mut dx: Vec<f32> = probs.iter().map(|p| p * k).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * c + l] -= k;
                    }
                    self.accumulate(&mut grads, *logits, dx);
                }
                Op::GlobalAvgPool { x, channels } => {
                    let n = self.nodes[*x].value.len();
                    let b = g.len() / channels;
                    let per = n / (b * channels);
                    let mut dx = vec![0.0f32; n];
                    for bi in 0..b {
                        for p in 0..per {
                            for ch in 0..*channels {
                                dx[(bi * per + p) * channels + ch] =
                                    g[bi * channels + ch] / per as f32;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], idx: usize, g: Vec<f32>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) fn check_joint_weights(w_v: f32, w_s: f32) -> Result<()> {
    if w_v < 0.0 || w_s < 0.0 || ((w_v + w_s) - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "joint loss weights must be non-negative and sum to 1, got {w_v} and {w_s}"
        )));
    }
    Ok(())
}

pub(crate) fn softmax_rows(logits: &[f32], width: usize) -> Vec<f32> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
