use emev_core::channel::{ChannelTensor, Dims};
use emev_core::linalg::CMatrix;
use emev_core::svd::{combine, precode, reconstruction_residual, svd_transform};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: Dims) -> ChannelTensor {
    let data = (0..dims.h_entries() * 2)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    ChannelTensor::new(dims, data).unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect()
}

/// Singular values as square roots of the eigenvalues of `H H^H`, descending.
pub fn eig_singular_values(h: &CMatrix) -> Vec<f64> {
    let m = DMatrix::from_fn(h.rows(), h.cols(), |r, c| h[(r, c)]);
    let gram = &m * m.adjoint();
    let mut ev: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SvdErrors {
    pub reconstruction: f64,
    pub unitarity: f64,
    pub singular_values: f64,
}

impl SvdErrors {
    pub fn max(self, o: SvdErrors) -> SvdErrors {
        SvdErrors {
            reconstruction: self.reconstruction.max(o.reconstruction),
            unitarity: self.unitarity.max(o.unitarity),
            singular_values: self.singular_values.max(o.singular_values),
        }
    }
}

/// Worst errors of the library SVD on `h` against the eigensolver oracle.
pub fn svd_errors(h: &ChannelTensor) -> SvdErrors {
    let d = svd_transform(h).unwrap();
    let mut out = SvdErrors::default();
    for r in reconstruction_residual(&d, h).unwrap() {
        out.reconstruction = out.reconstruction.max(r.value);
    }
    for (rb, b) in d.blocks.iter().enumerate() {
        out.unitarity = out
            .unitarity
            .max(b.u.unitarity_residual())
            .max(b.v.unitarity_residual());
        let oracle = eig_singular_values(&h.rb_matrix(rb));
        let top = oracle[0].max(f64::MIN_POSITIVE);
        for (s, o) in b.s.iter().zip(&oracle) {
            // Relative to the largest value, so tiny values are not amplified.
            out.singular_values = out.singular_values.max((s - o).abs() / top);
        }
    }
    out
}

/// Largest `|combine(U, H precode(V, x)) - S x|` over blocks.
pub fn chain_error(h: &ChannelTensor, x: &[Complex64]) -> f64 {
    let d = svd_transform(h).unwrap();
    let mut worst = 0.0f64;
    for (rb, b) in d.blocks.iter().enumerate() {
        let y = h.rb_matrix(rb).matvec(&precode(&b.v, x).unwrap()).unwrap();
        let r = combine(&b.u, &y).unwrap();
        for (i, ri) in r.iter().enumerate() {
            worst = worst.max((ri - x[i] * b.s[i]).norm());
        }
    }
    worst
}
