//! Raw forward/backward kernels. Shapes are validated by the graph layer.

use rayon::prelude::*;

/// Batched affine map `y[b] = x[b] W + bias`, `W` stored `[n_in, n_out]`.
pub(crate) fn dense_forward(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    n_in: usize,
    n_out: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; (x.len() / n_in) * n_out];
    out.par_chunks_mut(n_out)
        .zip(x.par_chunks(n_in))
        .for_each(|(y, xr)| {
            y.copy_from_slice(bias);
            for (i, &xv) in xr.iter().enumerate() {
                let wr = &w[i * n_out..(i + 1) * n_out];
                for (acc, &wv) in y.iter_mut().zip(wr) {
                    *acc += xv * wv;
                }
            }
        });
    out
}

pub(crate) fn dense_backward_input(dy: &[f32], w: &[f32], n_in: usize, n_out: usize) -> Vec<f32> {
    let batch = dy.len() / n_out;
    let mut dx = vec![0.0f32; batch * n_in];
    dx.par_chunks_mut(n_in)
        .zip(dy.par_chunks(n_out))
        .for_each(|(dxr, dyr)| {
            for (i, d) in dxr.iter_mut().enumerate() {
                let wr = &w[i * n_out..(i + 1) * n_out];
                let mut acc = 0.0f32;
                for (&g, &wv) in dyr.iter().zip(wr) {
                    acc += g * wv;
                }
                *d = acc;
            }
        });
    dx
}

pub(crate) fn dense_backward_weight(x: &[f32], dy: &[f32], n_in: usize, n_out: usize) -> Vec<f32> {
    let batch = x.len() / n_in;
    let mut dw = vec![0.0f32; n_in * n_out];
    dw.par_chunks_mut(n_out).enumerate().for_each(|(i, row)| {
        for b in 0..batch {
            let xv = x[b * n_in + i];
            let g = &dy[b * n_out..(b + 1) * n_out];
            for (acc, &gv) in row.iter_mut().zip(g) {
                *acc += xv * gv;
            }
        }
    });
    dw
}

pub(crate) fn sum_rows(dy: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; width];
    for row in dy.chunks(width) {
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

/// Same-padded convolution geometry over three spatial axes. 2D layers use
/// a depth of one and a kernel depth of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    fn pad(&self) -> [isize; 3] {
        [
            (self.kernel[0] / 2) as isize,
            (self.kernel[1] / 2) as isize,
            (self.kernel[2] / 2) as isize,
        ]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Copies the receptive field of output position `pos` into `patch`,
    /// laid out `[tap][c_in]`, with zeros outside the volume.
    #[inline]
    fn gather(&self, xs: &[f32], pos: usize, patch: &mut [f32]) {
        let [d, h, w] = self.dims;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = self.pad();
        let cin = self.cin;
        let (z, y, x) = (
            (pos / (h * w)) as isize,
            ((pos / w) % h) as isize,
            (pos % w) as isize,
        );
        // Columns of the kernel row that fall inside the volume.
        let x0 = (pw - x).max(0) as usize;
        let x1 = (w as isize - x + pw).min(kw as isize) as usize;
        patch.fill(0.0);
        for dz in 0..kd {
            let iz = z + dz as isize - pd;
            if iz < 0 || iz >= d as isize {
                continue;
            }
            for dy in 0..kh {
                let iy = y + dy as isize - ph;
                if iy < 0 || iy >= h as isize || x0 >= x1 {
                    continue;
                }
                let tap = (dz * kh + dy) * kw;
                let ix0 = (x + x0 as isize - pw) as usize;
                let src = ((iz as usize * h + iy as usize) * w + ix0) * cin;
                let n = (x1 - x0) * cin;
                patch[(tap + x0) * cin..(tap + x0) * cin + n].copy_from_slice(&xs[src..src + n]);
            }
        }
    }
}

/// Dot product with eight fixed accumulators; the summation order depends
/// only on the length.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(acc: &mut [f32], a: f32, x: &[f32]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `[rows][cols]` to `[cols][rows]`.
fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: &[f32]) -> Vec<f32> {
    let vol = g.volume();
    let (cin, cout) = (g.cin, g.cout);
    let k = g.taps() * cin;
    let wt = transpose(w, k, cout);
    let mut out = vec![0.0f32; g.batch * vol * cout];
    out.par_chunks_mut(vol * cout)
        .zip(x.par_chunks(vol * cin))
        .for_each(|(ys, xs)| {
            let mut patch = vec![0.0f32; k];
            for p in 0..vol {
                g.gather(xs, p, &mut patch);
                for co in 0..cout {
                    ys[p * cout + co] = bias[co] + dot(&patch, &wt[co * k..(co + 1) * k]);
                }
            }
        });
    out
}

/// Same-padded convolution of `dy` with the spatially flipped, channel
/// transposed kernel (odd kernels make the padding symmetric).
pub(crate) fn conv_backward_input(g: &ConvGeom, dy: &[f32], w: &[f32]) -> Vec<f32> {
    let (cin, cout) = (g.cin, g.cout);
    let taps = g.taps();
    let mut flipped = vec![0.0f32; w.len()];
    for t in 0..taps {
        let src = (taps - 1 - t) * cin * cout;
        for ci in 0..cin {
            for co in 0..cout {
                flipped[t * cin * cout + co * cin + ci] = w[src + ci * cout + co];
            }
        }
    }
    let back = ConvGeom {
        cin: cout,
        cout: cin,
        ..*g
    };
    conv_forward(&back, dy, &flipped, &vec![0.0; cin])
}

pub(crate) fn conv_backward_weight(g: &ConvGeom, x: &[f32], dy: &[f32]) -> Vec<f32> {
    let vol = g.volume();
    let (cin, cout) = (g.cin, g.cout);
    let k = g.taps() * cin;
    let partials: Vec<Vec<f32>> = x
        .par_chunks(vol * cin)
        .zip(dy.par_chunks(vol * cout))
        .map(|(xs, dys)| {
            let mut dwt = vec![0.0f32; cout * k];
            let mut patch = vec![0.0f32; k];
            for p in 0..vol {
                g.gather(xs, p, &mut patch);
                for co in 0..cout {
                    axpy(&mut dwt[co * k..(co + 1) * k], dys[p * cout + co], &patch);
                }
            }
            dwt
        })
        .collect();
    // fixed-order reduction over the batch
    let mut total = vec![0.0f32; cout * k];
    for part in &partials {
        for (a, &v) in total.iter_mut().zip(part) {
            *a += v;
        }
    }
    transpose(&total, cout, k)
}

/// Projection weights of one multi-head attention layer. Q/K/V map
/// `d_model -> heads*key_dim`, the output maps back to `d_model`.
pub(crate) struct AttnWeights<'a> {
    pub wq: &'a [f32],
    pub bq: &'a [f32],
    pub wk: &'a [f32],
    pub bk: &'a [f32],
    pub wv: &'a [f32],
    pub bv: &'a [f32],
    pub wo: &'a [f32],
    pub bo: &'a [f32],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub d_model: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl AttnGeom {
    fn proj(&self) -> usize {
        self.heads * self.key_dim
    }
}

/// Per-sample intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Softmax weights laid out `[head][i][j]`.
    a: Vec<f32>,
    z: Vec<f32>,
}

impl AttnCache {
    pub(crate) fn weights(&self) -> &[f32] {
        &self.a
    }
}

fn affine(x: &[f32], w: &[f32], b: &[f32], rows: usize, n_in: usize, n_out: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * n_out];
    for r in 0..rows {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        yr.copy_from_slice(b);
        for i in 0..n_in {
            let xv = x[r * n_in + i];
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (acc, &wv) in yr.iter_mut().zip(wr) {
                *acc += xv * wv;
            }
        }
    }
    y
}

fn attention_single(
    g: &AttnGeom,
    wts: &AttnWeights,
    xq: &[f32],
    xk: &[f32],
) -> (Vec<f32>, AttnCache) {
    let (lq, lk, d, p, dk) = (g.lq, g.lk, g.d_model, g.proj(), g.key_dim);
    let q = affine(xq, wts.wq, wts.bq, lq, d, p);
    let k = affine(xk, wts.wk, wts.bk, lk, d, p);
    let v = affine(xk, wts.wv, wts.bv, lk, d, p);
    let scale = 1.0 / (dk as f32).sqrt();
    let mut a = vec![0.0f32; g.heads * lq * lk];
    let mut z = vec![0.0f32; lq * p];
    for h in 0..g.heads {
        let c0 = h * dk;
        for i in 0..lq {
            let row = &mut a[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            for (j, s) in row.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for c in 0..dk {
                    acc += q[i * p + c0 + c] * k[j * p + c0 + c];
                }
                *s = acc * scale;
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            for (j, &aw) in row.iter().enumerate() {
                for c in 0..dk {
                    z[i * p + c0 + c] += aw * v[j * p + c0 + c];
                }
            }
        }
    }
    let out = affine(&z, wts.wo, wts.bo, lq, p, d);
    (out, AttnCache { q, k, v, a, z })
}

pub(crate) fn attention_forward(
    g: &AttnGeom,
    wts: &AttnWeights,
    xq: &[f32],
    xk: &[f32],
) -> (Vec<f32>, Vec<AttnCache>) {
    let (lq, lk, d) = (g.lq, g.lk, g.d_model);
    let results: Vec<(Vec<f32>, AttnCache)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            attention_single(
                g,
                wts,
                &xq[b * lq * d..(b + 1) * lq * d],
                &xk[b * lk * d..(b + 1) * lk * d],
            )
        })
        .collect();
    let mut out = Vec::with_capacity(g.batch * lq * d);
    let mut caches = Vec::with_capacity(g.batch);
    for (o, c) in results {
        out.extend_from_slice(&o);
        caches.push(c);
    }
    (out, caches)
}

/// Gradients of one attention layer: inputs first, then the eight
/// parameter tensors in `[wq, bq, wk, bk, wv, bv, wo, bo]` order.
pub(crate) struct AttnGrads {
    pub dxq: Vec<f32>,
    pub dxk: Vec<f32>,
    pub params: [Vec<f32>; 8],
}

// acc[i_in, j_out] += sum_r x[r, i_in] * g[r, j_out]
fn accum_outer(acc: &mut [f32], x: &[f32], gy: &[f32], rows: usize, n_in: usize, n_out: usize) {
    for r in 0..rows {
        for i in 0..n_in {
            let xv = x[r * n_in + i];
            let row = &mut acc[i * n_out..(i + 1) * n_out];
            for (a, &gv) in row.iter_mut().zip(&gy[r * n_out..(r + 1) * n_out]) {
                *a += xv * gv;
            }
        }
    }
}

// out[r, i_in] += sum_j g[r, j] * W[i_in, j]
fn accum_back(out: &mut [f32], gy: &[f32], w: &[f32], rows: usize, n_in: usize, n_out: usize) {
    for r in 0..rows {
        for i in 0..n_in {
            let wr = &w[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0f32;
            for (&gv, &wv) in gy[r * n_out..(r + 1) * n_out].iter().zip(wr) {
                acc += gv * wv;
            }
            out[r * n_in + i] += acc;
        }
    }
}

fn attention_backward_single(
    g: &AttnGeom,
    wts: &AttnWeights,
    cache: &AttnCache,
    xq: &[f32],
    xk: &[f32],
    dout: &[f32],
) -> AttnGrads {
    let (lq, lk, d, p, dk) = (g.lq, g.lk, g.d_model, g.proj(), g.key_dim);
    let scale = 1.0 / (dk as f32).sqrt();
    let mut dwo = vec![0.0f32; p * d];
    accum_outer(&mut dwo, &cache.z, dout, lq, p, d);
    let dbo = sum_rows(dout, d);
    let mut dz = vec![0.0f32; lq * p];
    accum_back(&mut dz, dout, wts.wo, lq, p, d);

    let mut dq = vec![0.0f32; lq * p];
    let mut dk_ = vec![0.0f32; lk * p];
    let mut dv = vec![0.0f32; lk * p];
    let mut da = vec![0.0f32; lk];
    for h in 0..g.heads {
        let c0 = h * dk;
        for i in 0..lq {
            let arow = &cache.a[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            for (j, slot) in da.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for c in 0..dk {
                    acc += dz[i * p + c0 + c] * cache.v[j * p + c0 + c];
                }
                *slot = acc;
            }
            let mut dot = 0.0f32;
            for (&aw, &g_a) in arow.iter().zip(&da) {
                dot += aw * g_a;
            }
            for j in 0..lk {
                let aw = arow[j];
                for c in 0..dk {
                    dv[j * p + c0 + c] += aw * dz[i * p + c0 + c];
                }
                let ds = aw * (da[j] - dot) * scale;
                for c in 0..dk {
                    dq[i * p + c0 + c] += ds * cache.k[j * p + c0 + c];
                    dk_[j * p + c0 + c] += ds * cache.q[i * p + c0 + c];
                }
            }
        }
    }

    let mut dwq = vec![0.0f32; d * p];
    accum_outer(&mut dwq, xq, &dq, lq, d, p);
    let dbq = sum_rows(&dq, p);
    let mut dwk = vec![0.0f32; d * p];
    accum_outer(&mut dwk, xk, &dk_, lk, d, p);
    let dbk = sum_rows(&dk_, p);
    let mut dwv = vec![0.0f32; d * p];
    accum_outer(&mut dwv, xk, &dv, lk, d, p);
    let dbv = sum_rows(&dv, p);

    let mut dxq = vec![0.0f32; lq * d];
    accum_back(&mut dxq, &dq, wts.wq, lq, d, p);
    let mut dxk = vec![0.0f32; lk * d];
    accum_back(&mut dxk, &dk_, wts.wk, lk, d, p);
    accum_back(&mut dxk, &dv, wts.wv, lk, d, p);

    AttnGrads {
        dxq,
        dxk,
        params: [dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo],
    }
}

pub(crate) fn attention_backward(
    g: &AttnGeom,
    wts: &AttnWeights,
    caches: &[AttnCache],
    xq: &[f32],
    xk: &[f32],
    dout: &[f32],
) -> AttnGrads {
    let (lq, lk, d) = (g.lq, g.lk, g.d_model);
    let per_sample: Vec<AttnGrads> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            attention_backward_single(
                g,
                wts,
                &caches[b],
                &xq[b * lq * d..(b + 1) * lq * d],
                &xk[b * lk * d..(b + 1) * lk * d],
                &dout[b * lq * d..(b + 1) * lq * d],
            )
        })
        .collect();
    // fixed-order reduction over the batch
    let mut iter = per_sample.into_iter();
    let mut total = iter.next().expect("attention batch is non-empty");
    for s in iter {
        total.dxq.extend_from_slice(&s.dxq);
        total.dxk.extend_from_slice(&s.dxk);
        for (acc, part) in total.params.iter_mut().zip(s.params.iter()) {
            for (a, &v) in acc.iter_mut().zip(part) {
                *a += v;
            }
        }
    }
    total
}
