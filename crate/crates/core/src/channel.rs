//! Geometric multipath channel generator.
//!
//! Each ray contributes `sqrt(P) * c * exp(j 2 pi v t) * a_r(aoa) a_t(aod)^T`
//! with a per-RB phase ramp `exp(-j 2 pi f_rb tau)` so the resource-block
//! axis carries frequency selectivity. LOS profiles add a dominant
//! zero-delay ray whose share of the power is set by a Rician K-factor.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Subcarriers per resource block.
const SUBCARRIERS_PER_RB: f64 = 12.0;

/// Channel tensor dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_rb: usize,
    pub n_r: usize,
    pub n_t: usize,
}

impl Dims {
    pub const fn new(n_rb: usize, n_r: usize, n_t: usize) -> Self {
        Self { n_rb, n_r, n_t }
    }

    /// 13 RBs, 4 receive and 64 transmit antennas.
    pub const fn full() -> Self {
        Self::new(13, 4, 64)
    }

    /// 4 RBs, 2 receive and 8 transmit antennas.
    pub const fn toy() -> Self {
        Self::new(4, 2, 8)
    }

    /// Number of complex entries in one channel tensor.
    pub fn h_entries(&self) -> usize {
        self.n_rb * self.n_r * self.n_t
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rb == 0 || self.n_r == 0 || self.n_t == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive: {self:?}"
            )));
        }
        if self.n_t < self.n_r {
            return Err(Error::Config(format!(
                "n_t ({}) must be >= n_r ({})",
                self.n_t, self.n_r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArrayGeometry {
    Ula,
    /// Uniform planar array; element `(row, col)` sits at flat index
    /// `row * cols + col`.
    Upa {
        rows: usize,
        cols: usize,
    },
}

/// One scattering cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Relative power (linear). Normalized over the profile before use.
    pub power: f64,
    /// Mean angle of departure, radians.
    pub aod: f64,
    /// Mean angle of arrival, radians.
    pub aoa: f64,
    /// Mean elevation of departure, radians (UPA only).
    pub zod: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    /// Small integer channel-type label carried alongside codewords.
    pub label: u8,
    pub clusters: Vec<Cluster>,
    pub rays_per_cluster: usize,
    pub los: bool,
    /// Rician K-factor of the LOS ray, dB.
    pub k_factor_db: f64,
    pub los_aod: f64,
    pub los_aoa: f64,
    /// Half-width of the uniform intra-cluster angle spread, radians.
    pub angle_spread: f64,
    /// Mean of the exponential cluster-delay distribution, seconds.
    pub delay_spread: f64,
    /// UE speeds to draw from, km/h.
    pub speeds_kmh: Vec<f64>,
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub dims: Dims,
    /// Element spacing over wavelength.
    pub spacing: f64,
    pub geometry: ArrayGeometry,
    /// When false every ray coefficient `c` is exactly 1.
    pub random_phase: bool,
    /// Snapshot time `t` in seconds. Samples are independent snapshots.
    pub snapshot_time: f64,
}

/// Preset names, in label order.
pub const PRESET_NAMES: [&str; 5] = [
    "cdl-a-like",
    "cdl-b-like",
    "cdl-c-like",
    "cdl-d-like",
    "cdl-e-like",
];

fn deg(d: f64) -> f64 {
    d.to_radians()
}

fn nlos_clusters(aods: [f64; 8], aoa_shift: f64, decay_db: f64) -> Vec<Cluster> {
    aods.iter()
        .enumerate()
        .map(|(n, &a)| Cluster {
            power: 10f64.powf(-(n as f64) * decay_db / 10.0),
            aod: deg(a),
            aoa: deg(aoa_shift - a * 0.7),
            zod: deg(5.0 + 2.0 * n as f64),
        })
        .collect()
}

fn los_clusters(aods: [f64; 4], aoa_shift: f64) -> Vec<Cluster> {
    aods.iter()
        .enumerate()
        .map(|(n, &a)| Cluster {
            power: 10f64.powf(-(n as f64) * 3.0 / 10.0),
            aod: deg(a),
            aoa: deg(aoa_shift + a * 0.5),
            zod: deg(3.0 + 3.0 * n as f64),
        })
        .collect()
}

impl ChannelProfile {
    /// Built-in profile by name at the given dimensions.
    pub fn preset(name: &str, dims: Dims) -> Result<Self> {
        let base =
            |label: u8, clusters: Vec<Cluster>, los: bool, delay_ns: f64, spread_deg: f64| {
                ChannelProfile {
                    name: name.to_string(),
                    label,
                    clusters,
                    rays_per_cluster: 10,
                    los,
                    k_factor_db: 10.0,
                    los_aod: 0.0,
                    los_aoa: 0.0,
                    angle_spread: deg(spread_deg),
                    delay_spread: delay_ns * 1e-9,
                    speeds_kmh: vec![4.8, 24.0, 40.0, 60.0],
                    carrier_hz: 28e9,
                    subcarrier_spacing_hz: 60e3,
                    dims,
                    spacing: 0.5,
                    geometry: ArrayGeometry::Ula,
                    random_phase: true,
                    snapshot_time: 0.0,
                }
            };
        let p = match name {
            "cdl-a-like" => base(
                0,
                nlos_clusters(
                    [-60.0, -35.0, -10.0, 5.0, 20.0, 40.0, 55.0, 70.0],
                    10.0,
                    2.0,
                ),
                false,
                129.0,
                5.0,
            ),
            "cdl-b-like" => base(
                1,
                nlos_clusters(
                    [-70.0, -50.0, -30.0, -15.0, 0.0, 25.0, 45.0, 65.0],
                    -20.0,
                    1.0,
                ),
                false,
                634.0,
                5.0,
            ),
            "cdl-c-like" => base(
                2,
                nlos_clusters(
                    [-45.0, -25.0, -5.0, 10.0, 30.0, 50.0, 65.0, 80.0],
                    30.0,
                    1.5,
                ),
                false,
                634.0,
                5.0,
            ),
            "cdl-d-like" => {
                let mut p = base(
                    3,
                    los_clusters([-40.0, -15.0, 25.0, 50.0], 5.0),
                    true,
                    65.0,
                    3.0,
                );
                p.los_aod = deg(10.0);
                p.los_aoa = deg(-10.0);
                p
            }
            "cdl-e-like" => {
                let mut p = base(
                    4,
                    los_clusters([-55.0, -30.0, 15.0, 45.0], -15.0),
                    true,
                    65.0,
                    3.0,
                );
                p.los_aod = deg(-20.0);
                p.los_aoa = deg(25.0);
                p
            }
            other => return Err(Error::Usage(format!("unknown channel profile '{other}'"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.clusters.is_empty() || self.rays_per_cluster == 0 {
            return Err(Error::Config(format!(
                "{}: need at least one cluster and one ray",
                self.name
            )));
        }
        if self
            .clusters
            .iter()
            .any(|c| !(c.power > 0.0) || !c.power.is_finite())
        {
            return Err(Error::Config(format!(
                "{}: cluster powers must be positive",
                self.name
            )));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config("element spacing must be positive".into()));
        }
        if self.delay_spread < 0.0 || self.angle_spread < 0.0 {
            return Err(Error::Config("spreads must be non-negative".into()));
        }
        if let ArrayGeometry::Upa { rows, cols } = self.geometry {
            if rows * cols != self.dims.n_t {
                return Err(Error::Config(format!(
                    "UPA {rows}x{cols} does not hold {} elements",
                    self.dims.n_t
                )));
            }
        }
        Ok(())
    }

    /// Cluster powers rescaled to sum to one.
    pub fn normalized_powers(&self) -> Vec<f64> {
        let total: f64 = self.clusters.iter().map(|c| c.power).sum();
        self.clusters.iter().map(|c| c.power / total).collect()
    }

    /// Expected `||H||_F^2`: unit average power per antenna pair and RB.
    pub fn expected_power(&self) -> f64 {
        self.dims.h_entries() as f64
    }

    fn k_factor(&self) -> f64 {
        10f64.powf(self.k_factor_db / 10.0)
    }

    fn tx_steering(&self, aod: f64, zod: f64) -> Vec<Complex64> {
        match self.geometry {
            ArrayGeometry::Ula => steering_vector(aod, self.dims.n_t, self.spacing),
            ArrayGeometry::Upa { rows, cols } => upa_steering(aod, zod, rows, cols, self.spacing),
        }
    }
}

/// ULA response `exp(-j 2 pi k (d/lambda) sin(theta))`, `k = 0..n`.
pub fn steering_vector(theta: f64, n: usize, spacing: f64) -> Vec<Complex64> {
    let step = -2.0 * PI * spacing * theta.sin();
    (0..n)
        .map(|k| Complex64::from_polar(1.0, step * k as f64))
        .collect()
}

/// UPA response for azimuth `theta` and elevation `psi`.
pub fn upa_steering(
    theta: f64,
    psi: f64,
    rows: usize,
    cols: usize,
    spacing: f64,
) -> Vec<Complex64> {
    let col_step = -2.0 * PI * spacing * theta.sin() * psi.cos();
    let row_step = -2.0 * PI * spacing * psi.sin();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(Complex64::from_polar(
                1.0,
                row_step * r as f64 + col_step * c as f64,
            ));
        }
    }
    out
}

/// LOS probability for the urban-macro scenario.
pub fn los_probability(d_2d: f64, h_ut: f64) -> Result<f64> {
    if !(d_2d >= 0.0) || !(h_ut >= 0.0) {
        return Err(Error::Usage(format!(
            "invalid geometry d_2d={d_2d}, h_ut={h_ut}"
        )));
    }
    if h_ut > 28.0 {
        return Err(Error::Usage(format!(
            "UE height {h_ut} m is outside the model (<= 28 m)"
        )));
    }
    if d_2d <= 18.0 {
        return Ok(1.0);
    }
    let c = height_factor(h_ut);
    let first = 18.0 / d_2d + (-d_2d / 63.0).exp() * (1.0 - 18.0 / d_2d);
    let second = 1.0 + 0.8 * c * (d_2d / 100.0).powi(3) * (-d_2d / 150.0).exp();
    Ok((first * second).clamp(0.0, 1.0))
}

/// `C(h_UT)`; zero up to 13 m.
pub fn height_factor(h_ut: f64) -> f64 {
    if h_ut <= 13.0 {
        0.0
    } else {
        ((h_ut - 13.0) / 10.0).powf(1.5)
    }
}

/// CSI tensor `H[rb][rx][tx]`, stored as `f32` with a trailing re/im axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    dims: Dims,
    data: Vec<f32>,
}

impl ChannelTensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.h_entries() * 2 {
            return Err(Error::dim(
                "channel tensor",
                format!(
                    "{dims:?} needs {} floats, got {}",
                    dims.h_entries() * 2,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "channel tensor has non-finite entries".into(),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.h_entries() * 2],
        }
    }

    /// Builds a tensor from per-RB matrices (rounded to `f32`).
    pub fn from_matrices(mats: &[CMatrix]) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| Error::dim("channel tensor", "no resource blocks"))?;
        let dims = Dims::new(mats.len(), first.rows(), first.cols());
        let mut data = Vec::with_capacity(dims.h_entries() * 2);
        for m in mats {
            if m.rows() != dims.n_r || m.cols() != dims.n_t {
                return Err(Error::dim(
                    "channel tensor",
                    "resource blocks differ in shape",
                ));
            }
            for v in m.data() {
                data.push(v.re as f32);
                data.push(v.im as f32);
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, rb: usize, r: usize, t: usize) -> Complex64 {
        let i = 2 * ((rb * self.dims.n_r + r) * self.dims.n_t + t);
        Complex64::new(self.data[i] as f64, self.data[i + 1] as f64)
    }

    pub fn rb_matrix(&self, rb: usize) -> CMatrix {
        CMatrix::from_fn(self.dims.n_r, self.dims.n_t, |r, t| self.get(rb, r, t))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn scaled(&self, factor: f32) -> ChannelTensor {
        ChannelTensor {
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// SplitMix64 mixing step, used to derive independent per-item seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        ^ index
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Ray {
    gain: Complex64,
    tx: Vec<Complex64>,
    rx: Vec<Complex64>,
    delay: f64,
}

/// Draws one channel snapshot. Pure function of `(profile, seed)`.
pub fn generate_channel(profile: &ChannelProfile, seed: u64) -> Result<ChannelTensor> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = profile.dims;
    let powers = profile.normalized_powers();
    let (los_share, nlos_share) = if profile.los {
        let k = profile.k_factor();
        (k / (k + 1.0), 1.0 / (k + 1.0))
    } else {
        (0.0, 1.0)
    };

    let speed_kmh = if profile.speeds_kmh.is_empty() {
        0.0
    } else {
        profile.speeds_kmh[rng.gen_range(0..profile.speeds_kmh.len())]
    };
    let max_doppler = speed_kmh / 3.6 * profile.carrier_hz / SPEED_OF_LIGHT;
    let t = profile.snapshot_time;

    let phase = |rng: &mut ChaCha8Rng| -> Complex64 {
        if profile.random_phase {
            Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI))
        } else {
            Complex64::new(1.0, 0.0)
        }
    };

    let mut rays = Vec::with_capacity(profile.clusters.len() * profile.rays_per_cluster + 1);
    if profile.los {
        let c = phase(&mut rng);
        let doppler = max_doppler * rng.gen_range(-1.0f64..=1.0);
        rays.push(Ray {
            gain: los_share.sqrt() * c * Complex64::from_polar(1.0, 2.0 * PI * doppler * t),
            tx: profile.tx_steering(profile.los_aod, 0.0),
            rx: steering_vector(profile.los_aoa, dims.n_r, profile.spacing),
            delay: 0.0,
        });
    }
    let m = profile.rays_per_cluster as f64;
    for (cluster, &p) in profile.clusters.iter().zip(&powers) {
        let delay = if profile.delay_spread > 0.0 {
            Exp::new(1.0 / profile.delay_spread)
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng)
        } else {
            0.0
        };
        let amp = (nlos_share * p / m).sqrt();
        for _ in 0..profile.rays_per_cluster {
            let spread = |rng: &mut ChaCha8Rng| {
                if profile.angle_spread > 0.0 {
                    rng.gen_range(-profile.angle_spread..=profile.angle_spread)
                } else {
                    0.0
                }
            };
            let aod = cluster.aod + spread(&mut rng);
            let aoa = cluster.aoa + spread(&mut rng);
            let c = phase(&mut rng);
            let doppler = max_doppler * rng.gen_range(-1.0f64..=1.0);
            rays.push(Ray {
                gain: amp * c * Complex64::from_polar(1.0, 2.0 * PI * doppler * t),
                tx: profile.tx_steering(aod, cluster.zod),
                rx: steering_vector(aoa, dims.n_r, profile.spacing),
                delay,
            });
        }
    }

    let rb_width = SUBCARRIERS_PER_RB * profile.subcarrier_spacing_hz;
    let mut data = Vec::with_capacity(dims.h_entries() * 2);
    for rb in 0..dims.n_rb {
        let f = rb as f64 * rb_width;
        let mut h = CMatrix::zeros(dims.n_r, dims.n_t);
        for ray in &rays {
            let g = ray.gain * Complex64::from_polar(1.0, -2.0 * PI * f * ray.delay);
            for r in 0..dims.n_r {
                let gr = g * ray.rx[r];
                for (k, &a) in ray.tx.iter().enumerate() {
                    h[(r, k)] += gr * a;
                }
            }
        }
        for v in h.data() {
            data.push(v.re as f32);
            data.push(v.im as f32);
        }
    }
    ChannelTensor::new(dims, data)
}

/// `y = H x + n` for every resource block, with circularly symmetric
/// Gaussian noise of total power `noise_power` per receive antenna.
pub fn apply_channel(
    h: &ChannelTensor,
    x: &[Complex64],
    noise_power: f64,
    seed: u64,
) -> Result<Vec<Vec<Complex64>>> {
    let dims = h.dims();
    if x.len() != dims.n_t {
        return Err(Error::dim(
            "apply_channel",
            format!(
                "signal has {} entries, channel has {} transmit antennas",
                x.len(),
                dims.n_t
            ),
        ));
    }
    if !(noise_power >= 0.0) {
        return Err(Error::Usage("noise power must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (noise_power / 2.0).sqrt();
    let mut out = Vec::with_capacity(dims.n_rb);
    for rb in 0..dims.n_rb {
        let mut y = h.rb_matrix(rb).matvec(x)?;
        if noise_power > 0.0 {
            for v in &mut y {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                *v += Complex64::new(sigma * re, sigma * im);
            }
        }
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn steering_at_broadside_is_all_ones() {
        for v in steering_vector(0.0, 8, 0.5) {
            assert!(close(v, Complex64::new(1.0, 0.0), 1e-15));
        }
    }

    #[test]
    fn steering_at_thirty_degrees_rotates_by_quarter_turns() {
        let a = steering_vector(30f64.to_radians(), 4, 0.5);
        let j = Complex64::new(0.0, 1.0);
        let expected = [Complex64::new(1.0, 0.0), -j, Complex64::new(-1.0, 0.0), j];
        for (got, want) in a.iter().zip(expected) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn los_probability_spot_values() {
        assert_eq!(los_probability(18.0, 10.0).unwrap(), 1.0);
        assert_eq!(los_probability(3.0, 25.0).unwrap(), 1.0);
        let p = los_probability(100.0, 10.0).unwrap();
        let expected = 0.18 + 0.82 * (-100.0f64 / 63.0).exp();
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 0.3477).abs() < 1e-3);
        assert_eq!(height_factor(13.0), 0.0);
        assert!(height_factor(13.5) > 0.0);
        assert!(los_probability(100.0, 28.5).is_err());
    }

    #[test]
    fn single_deterministic_ray_is_flat_all_ones() {
        let mut p = ChannelProfile::preset("cdl-a-like", Dims::new(3, 2, 4)).unwrap();
        p.clusters = vec![Cluster {
            power: 2.5,
            aod: 0.0,
            aoa: 0.0,
            zod: 0.0,
        }];
        p.rays_per_cluster = 1;
        p.angle_spread = 0.0;
        p.delay_spread = 0.0;
        p.speeds_kmh.clear();
        p.random_phase = false;
        let h = generate_channel(&p, 7).unwrap();
        for rb in 0..3 {
            for r in 0..2 {
                for t in 0..4 {
                    assert!(close(h.get(rb, r, t), Complex64::new(1.0, 0.0), 1e-6));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = ChannelProfile::preset("cdl-d-like", Dims::toy()).unwrap();
        assert_eq!(
            generate_channel(&p, 11).unwrap(),
            generate_channel(&p, 11).unwrap()
        );
        assert_ne!(
            generate_channel(&p, 11).unwrap(),
            generate_channel(&p, 12).unwrap()
        );
    }

    #[test]
    fn noiseless_channel_is_exact_and_linear() {
        let p = ChannelProfile::preset("cdl-b-like", Dims::toy()).unwrap();
        let h = generate_channel(&p, 3).unwrap();
        let x1: Vec<Complex64> = (0..8)
            .map(|k| Complex64::new(k as f64 * 0.1, 0.3))
            .collect();
        let x2: Vec<Complex64> = (0..8)
            .map(|k| Complex64::new(-0.2, k as f64 * 0.05))
            .collect();
        let sum: Vec<Complex64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let y1 = apply_channel(&h, &x1, 0.0, 0).unwrap();
        let y2 = apply_channel(&h, &x2, 0.0, 0).unwrap();
        let ys = apply_channel(&h, &sum, 0.0, 0).unwrap();
        for rb in 0..4 {
            let direct = h.rb_matrix(rb).matvec(&x1).unwrap();
            for r in 0..2 {
                assert_eq!(y1[rb][r], direct[r]);
                assert!(close(ys[rb][r], y1[rb][r] + y2[rb][r], 1e-6));
            }
        }
        assert!(apply_channel(&h, &x1[..7], 0.0, 0).is_err());
    }

    #[test]
    fn unknown_profile_is_rejected() {
        assert!(matches!(
            ChannelProfile::preset("cdl-z", Dims::toy()),
            Err(Error::Usage(_))
        ));
    }
}
