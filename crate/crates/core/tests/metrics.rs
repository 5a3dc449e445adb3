use emev_core::channel::{ChannelProfile, Dims};
use emev_core::dataset::make_dataset;
use emev_core::emevnet::Prepared;
use emev_core::metrics::{
    column_similarity, cosine_similarity, evaluate, nmse_db, nmse_ratio, IdentityCodec, ModelKind,
    Nmse, Reconstructor,
};
use emev_core::Error;
use num_complex::Complex64;
use proptest::prelude::*;

fn complex(v: &[f32]) -> Vec<Complex64> {
    v.chunks(2)
        .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
        .collect()
}

// Column cosine from complex matrices, averaged over non-zero columns.
fn rho_oracle(x: &[f32], y: &[f32], blocks: usize, rows: usize, cols: usize) -> f64 {
    let (x, y) = (complex(x), complex(y));
    let mut total = 0.0;
    let mut n = 0;
    for b in 0..blocks {
        for c in 0..cols {
            let col = |m: &[Complex64]| {
                (0..rows)
                    .map(|r| m[(b * rows + r) * cols + c])
                    .collect::<Vec<_>>()
            };
            let (a, h) = (col(&x), col(&y));
            let na = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let nh = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if na > 0.0 && nh > 0.0 {
                total += a
                    .iter()
                    .zip(&h)
                    .map(|(p, q)| p.conj() * q)
                    .sum::<Complex64>()
                    .norm()
                    / (na * nh);
                n += 1;
            }
        }
    }
    total / n as f64
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f32..4.0, n)
}

#[test]
fn identity_codec_is_perfect() {
    let ds = make_dataset(
        &ChannelProfile::preset("cdl-b-like", Dims::toy()).unwrap(),
        20,
        3,
    )
    .unwrap();
    let data = Prepared::from_dataset(&ds).unwrap();
    let codec = IdentityCodec { dims: Dims::toy() };
    assert_eq!(codec.payload_len(), 4 * (2 * 64 + 2));
    let row = evaluate(
        &codec,
        ModelKind::Identity,
        "cdl-b-like",
        &data,
        &ds.split().test,
    )
    .unwrap();
    assert_eq!((row.nmse_v, row.nmse_s), (Nmse::Perfect, Nmse::Perfect));
    assert!((row.rho_v - 1.0).abs() < 1e-12 && (row.rho_s - 1.0).abs() < 1e-12);
    assert_eq!(row.samples, 3);
    assert!(evaluate(&codec, ModelKind::Identity, "x", &data, &[]).is_err());
}

#[test]
fn zero_reference_is_undefined() {
    assert!(matches!(
        nmse_ratio(&[0.0; 4], &[1.0; 4]),
        Err(Error::UndefinedReference(_))
    ));
    assert!(matches!(
        cosine_similarity(&[0.0; 4], &[1.0; 4], 1, 2, 1, true),
        Err(Error::UndefinedReference(_))
    ));
}

proptest! {
    #[test]
    fn nmse_is_scale_invariant(x in vals(24), y in vals(24), k in 0.01f32..100.0) {
        prop_assume!(x.iter().any(|v| v.abs() > 0.1));
        let a = nmse_ratio(&x, &y).unwrap();
        let xs: Vec<f32> = x.iter().map(|v| v * k).collect();
        let ys: Vec<f32> = y.iter().map(|v| v * k).collect();
        let b = nmse_ratio(&xs, &ys).unwrap();
        prop_assert!((a - b).abs() <= 1e-4 * a.max(1e-6));
    }

    #[test]
    fn nmse_matches_complex_oracle(x in vals(16), y in vals(16)) {
        prop_assume!(x.iter().any(|v| v.abs() > 0.1));
        let (cx, cy) = (complex(&x), complex(&y));
        let err: f64 = cx.iter().zip(&cy).map(|(a, b)| (a - b).norm_sqr()).sum();
        let norm: f64 = cx.iter().map(|a| a.norm_sqr()).sum();
        let got = nmse_db(&x, &y).unwrap();
        let want = 10.0 * (err / norm).log10();
        match got {
            Nmse::Perfect => prop_assert_eq!(err, 0.0),
            Nmse::Db(d) => prop_assert!((d - want).abs() < 1e-9),
        }
    }

    #[test]
    fn rho_matches_oracle_and_is_bounded(x in vals(2 * 2 * 3 * 4), y in vals(2 * 2 * 3 * 4)) {
        let r = cosine_similarity(&x, &y, 2, 3, 4, true).unwrap();
        prop_assert!((r - rho_oracle(&x, &y, 2, 3, 4)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn rho_ignores_column_phase_and_scale(x in vals(2 * 3 * 2), phase in 0.0f64..std::f64::consts::TAU, k in 0.1f64..10.0) {
        prop_assume!(column_similarity(&x, &x, 1, 3, 2, true).unwrap().skipped == 0);
        // Rotate and scale the second column only.
        let rot = Complex64::from_polar(k, phase);
        let mut y = x.clone();
        for r in 0..3 {
            let i = (r * 2 + 1) * 2;
            let z = Complex64::new(x[i] as f64, x[i + 1] as f64) * rot;
            y[i] = z.re as f32;
            y[i + 1] = z.im as f32;
        }
        let r = cosine_similarity(&x, &y, 1, 3, 2, true).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_columns_are_skipped(x in vals(6)) {
        let mut y = x.clone();
        y[1] = 0.0; y[3] = 0.0; y[5] = 0.0;
        let s = column_similarity(&x, &y, 1, 3, 2, false).unwrap();
        prop_assert_eq!(s.skipped, 1);
        prop_assert_eq!(s.columns + s.skipped, 2);
    }
}
