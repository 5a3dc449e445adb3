use emev_core::channel::{
    apply_channel, generate_channel, los_probability, ArrayGeometry, ChannelProfile, ChannelTensor,
    Dims, PRESET_NAMES,
};
use emev_core::dataset::make_dataset;
use num_complex::Complex64;
use proptest::prelude::*;

// Urban-macro LOS probability written out independently of the library.
fn los_oracle(d: f64, h: f64) -> f64 {
    if d <= 18.0 {
        return 1.0;
    }
    let c = if h <= 13.0 {
        0.0
    } else {
        ((h - 13.0) / 10.0).powf(1.5)
    };
    let a = 18.0 / d + (1.0 - 18.0 / d) * (-d / 63.0).exp();
    a * (1.0 + 0.8 * c * (d / 100.0).powi(3) * (-d / 150.0).exp())
}

#[test]
fn los_probability_matches_oracle() {
    let spot = los_probability(100.0, 10.0).unwrap();
    assert!((spot - 0.3477).abs() < 1e-3, "{spot}");
    assert!((spot - los_oracle(100.0, 10.0)).abs() < 1e-12);
    for d in [0.0, 5.0, 18.0] {
        assert_eq!(los_probability(d, 10.0).unwrap(), 1.0);
    }
    for (d, h) in [(50.0, 20.0), (300.0, 25.0), (1000.0, 1.5)] {
        assert!((los_probability(d, h).unwrap() - los_oracle(d, h).min(1.0)).abs() < 1e-12);
    }
    assert!(los_probability(-1.0, 10.0).is_err());
    assert!(los_probability(100.0, 30.0).is_err());
}

#[test]
fn los_probability_is_monotone_at_ten_metres() {
    let mut prev = f64::INFINITY;
    for i in 0..=4820 {
        let d = 18.0 + i as f64 * 0.1;
        let p = los_probability(d, 10.0).unwrap();
        assert!(p <= prev + 1e-15, "rises at d={d}");
        prev = p;
    }
}

#[test]
fn average_power_is_normalized() {
    for name in PRESET_NAMES {
        let p = ChannelProfile::preset(name, Dims::toy()).unwrap();
        let n = 2000;
        let mean: f64 = (0..n)
            .map(|s| generate_channel(&p, s).unwrap().frobenius_sq())
            .sum::<f64>()
            / n as f64;
        let rel = (mean - p.expected_power()).abs() / p.expected_power();
        assert!(
            rel < 0.05,
            "{name}: mean power {mean}, expected {}",
            p.expected_power()
        );
    }
}

#[test]
fn upa_profiles_are_normalized_too() {
    let mut p = ChannelProfile::preset("cdl-b-like", Dims::new(2, 2, 16)).unwrap();
    p.geometry = ArrayGeometry::Upa { rows: 4, cols: 4 };
    let n = 2000;
    let mean: f64 = (0..n)
        .map(|s| generate_channel(&p, s).unwrap().frobenius_sq())
        .sum::<f64>()
        / n as f64;
    assert!((mean / p.expected_power() - 1.0).abs() < 0.05, "{mean}");
    p.geometry = ArrayGeometry::Upa { rows: 3, cols: 4 };
    assert!(p.validate().is_err());
}

#[test]
fn noise_has_the_requested_power() {
    let dims = Dims::new(8, 4, 4);
    let h = ChannelTensor::zeros(dims);
    let x = vec![Complex64::new(1.0, 0.0); 4];
    let mut total = 0.0;
    let mut count = 0usize;
    for seed in 0..200 {
        for y in apply_channel(&h, &x, 0.5, seed).unwrap() {
            total += y.iter().map(|v| v.norm_sqr()).sum::<f64>();
            count += y.len();
        }
    }
    let mean = total / count as f64;
    assert!((mean - 0.5).abs() / 0.5 < 0.10, "{mean}");
}

#[test]
fn samples_are_independent_of_generation_order() {
    let p = ChannelProfile::preset("cdl-c-like", Dims::toy()).unwrap();
    let ds = make_dataset(&p, 12, 77).unwrap();
    let again = make_dataset(&p, 12, 77).unwrap();
    assert_eq!(ds, again);
    let other = make_dataset(&p, 12, 78).unwrap();
    assert_ne!(ds.samples, other.samples);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn channels_are_finite_and_dimensioned(seed in any::<u64>(), which in 0usize..5, n_rb in 1usize..5, n_r in 1usize..4) {
        let dims = Dims::new(n_rb, n_r, n_r + 3);
        let p = ChannelProfile::preset(PRESET_NAMES[which], dims).unwrap();
        let h = generate_channel(&p, seed).unwrap();
        prop_assert_eq!(h.dims(), dims);
        prop_assert_eq!(h.data().len(), dims.h_entries() * 2);
        prop_assert!(h.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn los_probability_stays_in_unit_interval(d in 0.0f64..5000.0, h in 0.0f64..28.0) {
        let p = los_probability(d, h).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
