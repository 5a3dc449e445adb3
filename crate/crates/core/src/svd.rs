//! Per-resource-block SVD `H = U diag(S) V^H` with a fixed phase convention,
//! plus the precoding/combining maps that diagonalize the channel.
//!
//! The decomposition runs one-sided (Hestenes) Jacobi on the columns of
//! `A = H^H` (n_t x n_r). Rotating column pairs of `A` until they are
//! mutually orthogonal gives `A J = W`, where `J` is the left factor `U` and
//! the normalized columns of `W` are the first `n_r` columns of `V`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::{ChannelTensor, Dims};
use crate::error::{Error, Result};
use crate::linalg::{inner, vec_norm, CMatrix};

pub const MAX_SWEEPS: usize = 60;
/// Pairs with `|a_p^H a_q| <= TOL * ||a_p|| ||a_q||` count as orthogonal.
pub const OFF_DIAGONAL_TOL: f64 = 1e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// SVD of one `n_r x n_t` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RbSvd {
    /// `n_r x n_r`.
    pub u: CMatrix,
    /// Descending, length `n_r`.
    pub s: Vec<f64>,
    /// `n_t x n_t`.
    pub v: CMatrix,
    /// Set when the input was the zero matrix.
    pub degenerate: bool,
}

/// Decomposition of every resource block of a channel tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub dims: Dims,
    pub blocks: Vec<RbSvd>,
}

impl EigenDecomposition {
    /// `V` as `f32` laid out `[rb][row][col][re, im]`.
    pub fn v_data(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dims.n_rb * self.dims.n_t * self.dims.n_t * 2);
        for b in &self.blocks {
            for z in b.v.data() {
                out.push(z.re as f32);
                out.push(z.im as f32);
            }
        }
        out
    }

    /// `S` as `f32` laid out `[rb][i]`.
    pub fn s_data(&self) -> Vec<f32> {
        self.blocks
            .iter()
            .flat_map(|b| b.s.iter().map(|&x| x as f32))
            .collect()
    }

    /// `|U|` laid out `[rb][row][col]`.
    pub fn u_magnitudes(&self) -> Vec<f32> {
        self.blocks
            .iter()
            .flat_map(|b| b.u.data().iter().map(|z| z.norm() as f32))
            .collect()
    }

    pub fn max_singular_value(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.s.iter().copied())
            .fold(0.0, f64::max)
    }

    /// `U diag(S) V^H` for every block.
    pub fn reconstruct(&self) -> Result<ChannelTensor> {
        let mats: Vec<CMatrix> = self
            .blocks
            .iter()
            .map(|b| reconstruct_rb(&b.u, &b.s, &b.v))
            .collect::<Result<_>>()?;
        ChannelTensor::from_matrices(&mats)
    }
}

/// `U diag(s) V^H` using the first `s.len()` columns of `V`.
pub fn reconstruct_rb(u: &CMatrix, s: &[f64], v: &CMatrix) -> Result<CMatrix> {
    let (n_r, n_t) = (u.rows(), v.rows());
    if u.cols() != s.len() || v.cols() < s.len() {
        return Err(Error::dim("reconstruct", "U, S and V disagree on rank"));
    }
    let mut h = CMatrix::zeros(n_r, n_t);
    for (k, &sk) in s.iter().enumerate() {
        for r in 0..n_r {
            let us = u[(r, k)] * sk;
            for t in 0..n_t {
                h[(r, t)] += us * v[(t, k)].conj();
            }
        }
    }
    Ok(h)
}

/// Decomposes every resource block; blocks run in parallel.
pub fn svd_transform(h: &ChannelTensor) -> Result<EigenDecomposition> {
    let dims = h.dims();
    let blocks = (0..dims.n_rb)
        .into_par_iter()
        .map(|rb| svd_rb(&h.rb_matrix(rb)).map_err(|e| with_rb(e, rb)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EigenDecomposition { dims, blocks })
}

fn with_rb(e: Error, rb: usize) -> Error {
    match e {
        Error::SvdNonConvergence { sweeps, .. } => Error::SvdNonConvergence { rb, sweeps },
        other => other,
    }
}

/// SVD of a single `n_r x n_t` block with `n_r <= n_t`.
pub fn svd_rb(h: &CMatrix) -> Result<RbSvd> {
    let (n_r, n_t) = (h.rows(), h.cols());
    if n_r == 0 || n_r > n_t {
        return Err(Error::dim(
            "svd",
            format!("expected 0 < n_r <= n_t, got {n_r}x{n_t}"),
        ));
    }
    if h.data()
        .iter()
        .any(|z| !z.re.is_finite() || !z.im.is_finite())
    {
        return Err(Error::Numerical("svd input has non-finite entries".into()));
    }
    if h.data().iter().all(|z| *z == ZERO) {
        return Ok(RbSvd {
            u: CMatrix::identity(n_r),
            s: vec![0.0; n_r],
            v: CMatrix::identity(n_t),
            degenerate: true,
        });
    }

    // Columns of A = H^H and of the accumulated rotation J.
    let mut a: Vec<Vec<Complex64>> = (0..n_r)
        .map(|r| (0..n_t).map(|t| h[(r, t)].conj()).collect())
        .collect();
    let mut j: Vec<Vec<Complex64>> = (0..n_r)
        .map(|c| {
            (0..n_r)
                .map(|r| {
                    if r == c {
                        Complex64::new(1.0, 0.0)
                    } else {
                        ZERO
                    }
                })
                .collect()
        })
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n_r {
            for q in p + 1..n_r {
                let alpha: f64 = a[p].iter().map(|z| z.norm_sqr()).sum();
                let beta: f64 = a[q].iter().map(|z| z.norm_sqr()).sum();
                let gamma = inner(&a[p], &a[q]);
                let g = gamma.norm();
                if g <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let e = phase.conj();
                rotate(&mut a, p, q, c, s, e);
                rotate(&mut j, p, q, c, s, e);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            rb: 0,
            sweeps: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = a.iter().map(|col| vec_norm(col)).collect();
    let mut order: Vec<usize> = (0..n_r).collect();
    // Stable sort keeps ties in original column order.
    order.sort_by(|&x, &y| {
        norms[y]
            .partial_cmp(&norms[x])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let s_max = norms[order[0]];

    let mut u = CMatrix::zeros(n_r, n_r);
    let mut v_cols: Vec<Vec<Complex64>> = Vec::with_capacity(n_t);
    let mut s = Vec::with_capacity(n_r);
    for (k, &i) in order.iter().enumerate() {
        let sigma = norms[i];
        let mut ucol = j[i].clone();
        // Rotate so the largest-magnitude entry of the U column is real and
        // non-negative; the V column takes the same phase so u v^H is unchanged.
        let lead = ucol
            .iter()
            .enumerate()
            .fold((0usize, -1.0f64), |(bi, bm), (idx, z)| {
                if z.norm() > bm {
                    (idx, z.norm())
                } else {
                    (bi, bm)
                }
            })
            .0;
        let rot = if ucol[lead].norm() > 0.0 {
            ucol[lead].conj() / ucol[lead].norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        for z in &mut ucol {
            *z *= rot;
        }
        ucol[lead] = Complex64::new(ucol[lead].norm(), 0.0);
        u.set_column(k, &ucol);
        s.push(sigma);
        if sigma > 1e-14 * s_max {
            let vcol: Vec<Complex64> = a[i].iter().map(|z| z * rot / sigma).collect();
            v_cols.push(vcol);
        }
    }
    complete_basis(&mut v_cols, n_t);
    // Sorting puts zero singular values last, so the range columns already
    // sit in front of the completed null-space columns.
    let mut v = CMatrix::zeros(n_t, n_t);
    for (k, col) in v_cols.iter().enumerate() {
        v.set_column(k, col);
    }
    Ok(RbSvd {
        u,
        s,
        v,
        degenerate: false,
    })
}

fn rotate(cols: &mut [Vec<Complex64>], p: usize, q: usize, c: f64, s: f64, e: Complex64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let b = e * *y;
        let xp = *x * c - b * s;
        let yq = *x * s + b * c;
        *x = xp;
        *y = yq;
    }
}

/// Extends orthonormal `cols` to a basis of `C^n` by Gram-Schmidt over the
/// canonical vectors `e_0, e_1, ...`.
fn complete_basis(cols: &mut Vec<Vec<Complex64>>, n: usize) {
    for threshold in [0.1, 1e-6] {
        for k in 0..n {
            if cols.len() == n {
                return;
            }
            let mut w = vec![ZERO; n];
            w[k] = Complex64::new(1.0, 0.0);
            // Two passes for numerical orthogonality.
            for _ in 0..2 {
                for c in cols.iter() {
                    let proj = inner(c, &w);
                    for (wi, ci) in w.iter_mut().zip(c) {
                        *wi -= proj * ci;
                    }
                }
            }
            let norm = vec_norm(&w);
            if norm > threshold {
                for z in &mut w {
                    *z /= norm;
                }
                cols.push(w);
            }
        }
    }
}

/// `x_t = V x`.
pub fn precode(v: &CMatrix, x: &[Complex64]) -> Result<Vec<Complex64>> {
    v.matvec(x)
}

/// `U^H y`.
pub fn combine(u: &CMatrix, y: &[Complex64]) -> Result<Vec<Complex64>> {
    if y.len() != u.rows() {
        return Err(Error::dim(
            "combine",
            format!("U has {} rows, signal has {} entries", u.rows(), y.len()),
        ));
    }
    Ok((0..u.cols())
        .map(|k| (0..u.rows()).map(|r| u[(r, k)].conj() * y[r]).sum())
        .collect())
}

/// Per-RB relative residual with its degenerate flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub value: f64,
    /// `H_rb` is zero; `value` is reported as 0.
    pub degenerate: bool,
}

/// `||H_rb - U_rb S_rb V_rb^H||_F / ||H_rb||_F` for every block.
pub fn reconstruction_residual(d: &EigenDecomposition, h: &ChannelTensor) -> Result<Vec<Residual>> {
    if d.dims != h.dims() || d.blocks.len() != h.dims().n_rb {
        return Err(Error::dim(
            "reconstruction_residual",
            "decomposition and channel differ in shape",
        ));
    }
    d.blocks
        .iter()
        .enumerate()
        .map(|(rb, b)| {
            let hm = h.rb_matrix(rb);
            let norm = hm.frobenius();
            if norm == 0.0 {
                return Ok(Residual {
                    value: 0.0,
                    degenerate: true,
                });
            }
            let diff = hm.sub(&reconstruct_rb(&b.u, &b.s, &b.v)?)?;
            Ok(Residual {
                value: diff.frobenius() / norm,
                degenerate: false,
            })
        })
        .collect()
}
