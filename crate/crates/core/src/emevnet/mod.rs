//! Dual-input attention autoencoder for the eigenmatrix `V` and the
//! singular values `S`, plus the full-CSI baseline codec and training.

mod baseline;
mod complexity;
mod model;
pub mod train;

pub use baseline::{BaselineNet, BaselineObjective, BASELINE_RES_BLOCKS};
pub use complexity::{complexity_report, ComplexityRow, Table};
pub use model::{EmevNet, EmevObjective, Prepared};

use crate::channel::Dims;
use crate::config::{join_list, Config};
use crate::error::{Error, Result};
use crate::tensor::DEFAULT_LEAKY_SLOPE;

/// Payload length for a compression ratio of the full channel tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodewordLength {
    pub l_eps: usize,
    /// Set when `beta_h` does not divide the element count.
    pub floored: bool,
}

/// `floor(2 n_rb n_r n_t / beta_h)`. The channel-type id travels next to the
/// payload, not inside it.
pub fn codeword_length(beta_h: f64, dims: Dims) -> Result<CodewordLength> {
    if !(beta_h > 0.0) || !beta_h.is_finite() {
        return Err(Error::Config(format!(
            "compression ratio must be positive, got {beta_h}"
        )));
    }
    let elements = (2 * dims.h_entries()) as f64;
    let exact = elements / beta_h;
    let l_eps = exact.floor() as usize;
    if l_eps == 0 {
        return Err(Error::Config(format!(
            "compression ratio {beta_h} exceeds the {elements} channel elements"
        )));
    }
    Ok(CodewordLength {
        l_eps,
        floored: exact.fract() != 0.0,
    })
}

/// Compression ratio of `(V, S)` for a given `beta_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmevRatio {
    /// `n_rb (2 n_t^2 + n_r) / (2 n_rb n_r n_t) * beta_h`.
    pub exact: f64,
    /// `floor(exact / beta_h) * beta_h`, the integer multiple quoted in reports.
    pub reported: f64,
}

pub fn emev_ratio(beta_h: f64, dims: Dims) -> EmevRatio {
    let (n_rb, n_r, n_t) = (dims.n_rb as f64, dims.n_r as f64, dims.n_t as f64);
    let factor = n_rb * (2.0 * n_t * n_t + n_r) / (2.0 * n_rb * n_r * n_t);
    EmevRatio {
        exact: factor * beta_h,
        reported: factor.floor() * beta_h,
    }
}

/// Architecture and loss settings shared by the codecs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmevConfig {
    pub dims: Dims,
    pub l_xi_v: usize,
    pub l_xi_s: usize,
    pub l_eps: usize,
    pub heads: usize,
    pub key_dim: usize,
    /// Width of the token sequence the feature vectors are folded into.
    pub d_model: usize,
    /// One cross-attention block followed by `depth - 1` self blocks.
    pub attention_depth: usize,
    pub kernel: usize,
    /// Output channels of the two feature-extraction convolutions.
    pub feature_filters: [usize; 2],
    /// Output channels of the three convolutions in a `V` residual block.
    pub res_filters_v: [usize; 3],
    /// Output channels of the three convolutions in an `S` residual block.
    pub res_filters_s: [usize; 3],
    pub res_blocks: usize,
    pub leaky_slope: f32,
    /// Singular-value normalizer; 0 until set from a dataset.
    pub s_scale: f32,
    pub w_v: f32,
    pub w_s: f32,
}

impl EmevConfig {
    /// Desk-scale defaults: 4 RBs, 8 tx, 2 rx.
    pub fn toy(l_eps: usize) -> Self {
        Self::with_dims(Dims::toy(), 128, 16, l_eps)
    }

    /// Full-scale defaults: 13 RBs, 64 tx, 4 rx.
    pub fn full(l_eps: usize) -> Self {
        Self::with_dims(Dims::full(), 512, 64, l_eps)
    }

    pub fn with_dims(dims: Dims, l_xi_v: usize, l_xi_s: usize, l_eps: usize) -> Self {
        Self {
            dims,
            l_xi_v,
            l_xi_s,
            l_eps,
            heads: 2,
            key_dim: 3,
            d_model: 8,
            attention_depth: 5,
            kernel: 3,
            feature_filters: [2, 8],
            res_filters_v: [2, 8, 2],
            res_filters_s: [2, 8, 1],
            res_blocks: 3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            s_scale: 0.0,
            w_v: 0.5,
            w_s: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let positive = [
            ("l_xi_v", self.l_xi_v),
            ("l_xi_s", self.l_xi_s),
            ("l_eps", self.l_eps),
            ("heads", self.heads),
            ("key_dim", self.key_dim),
            ("d_model", self.d_model),
            ("attention_depth", self.attention_depth),
            ("kernel", self.kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.feature_filters.contains(&0)
            || self.res_filters_v.contains(&0)
            || self.res_filters_s.contains(&0)
        {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        if self.l_eps > self.l_xi_v {
            return Err(Error::Config(format!(
                "l_eps ({}) must not exceed l_xi_v ({})",
                self.l_eps, self.l_xi_v
            )));
        }
        if !self.l_xi_v.is_multiple_of(self.d_model) || !self.l_xi_s.is_multiple_of(self.d_model) {
            return Err(Error::Config(format!(
                "feature lengths {} and {} must be multiples of d_model {}",
                self.l_xi_v, self.l_xi_s, self.d_model
            )));
        }
        if self.res_filters_v[2] != 2 || self.res_filters_s[2] != 1 {
            return Err(Error::Config(
                "residual blocks must end with the branch width (2 for V, 1 for S)".into(),
            ));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be non-negative".into()));
        }
        if !(self.s_scale >= 0.0) || !self.s_scale.is_finite() {
            return Err(Error::Config(
                "s_scale must be a finite non-negative number".into(),
            ));
        }
        crate::tensor::check_joint_weights(self.w_v, self.w_s)
    }

    /// Reads a config, falling back to the toy defaults for missing keys.
    /// `l_eps` may be given directly or through `beta_h`.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let dims = Dims::new(
            cfg.get_or("n_rb", Dims::toy().n_rb)?,
            cfg.get_or("n_r", Dims::toy().n_r)?,
            cfg.get_or("n_t", Dims::toy().n_t)?,
        );
        let l_eps = match (cfg.get::<usize>("l_eps")?, cfg.get::<f64>("beta_h")?) {
            (Some(l), None) => l,
            (None, Some(b)) => codeword_length(b, dims)?.l_eps,
            (Some(l), Some(b)) => {
                let derived = codeword_length(b, dims)?.l_eps;
                if derived != l {
                    return Err(Error::Config(format!(
                        "l_eps = {l} disagrees with beta_h = {b} (gives {derived})"
                    )));
                }
                l
            }
            (None, None) => 16,
        };
        let d = Self::toy(l_eps);
        let arr = |key: &str, def: &[usize]| -> Result<Vec<usize>> {
            let v = cfg.get_list::<usize>(key)?.unwrap_or_else(|| def.to_vec());
            if v.len() != def.len() {
                return Err(Error::Config(format!("{key} needs {} entries", def.len())));
            }
            Ok(v)
        };
        let ff = arr("feature_filters", &d.feature_filters)?;
        let rv = arr("res_filters_v", &d.res_filters_v)?;
        let rs = arr("res_filters_s", &d.res_filters_s)?;
        let c = Self {
            dims,
            l_xi_v: cfg.get_or("l_xi_v", d.l_xi_v)?,
            l_xi_s: cfg.get_or("l_xi_s", d.l_xi_s)?,
            l_eps,
            heads: cfg.get_or("heads", d.heads)?,
            key_dim: cfg.get_or("key_dim", d.key_dim)?,
            d_model: cfg.get_or("d_model", d.d_model)?,
            attention_depth: cfg.get_or("attention_depth", d.attention_depth)?,
            kernel: cfg.get_or("kernel", d.kernel)?,
            feature_filters: [ff[0], ff[1]],
            res_filters_v: [rv[0], rv[1], rv[2]],
            res_filters_s: [rs[0], rs[1], rs[2]],
            res_blocks: cfg.get_or("res_blocks", d.res_blocks)?,
            leaky_slope: cfg.get_or("leaky_slope", d.leaky_slope)?,
            s_scale: cfg.get_or("s_scale", d.s_scale)?,
            w_v: cfg.get_or("w_v", d.w_v)?,
            w_s: cfg.get_or("w_s", d.w_s)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Writes every field; the inverse of [`EmevConfig::from_config`].
    pub fn write_into(&self, cfg: &mut Config) {
        cfg.set("n_rb", self.dims.n_rb);
        cfg.set("n_r", self.dims.n_r);
        cfg.set("n_t", self.dims.n_t);
        cfg.set("l_xi_v", self.l_xi_v);
        cfg.set("l_xi_s", self.l_xi_s);
        cfg.set("l_eps", self.l_eps);
        cfg.set("heads", self.heads);
        cfg.set("key_dim", self.key_dim);
        cfg.set("d_model", self.d_model);
        cfg.set("attention_depth", self.attention_depth);
        cfg.set("kernel", self.kernel);
        cfg.set("feature_filters", join_list(&self.feature_filters));
        cfg.set("res_filters_v", join_list(&self.res_filters_v));
        cfg.set("res_filters_s", join_list(&self.res_filters_s));
        cfg.set("res_blocks", self.res_blocks);
        cfg.set("leaky_slope", self.leaky_slope);
        cfg.set("s_scale", self.s_scale);
        cfg.set("w_v", self.w_v);
        cfg.set("w_s", self.w_s);
    }

    /// Elements of the flattened `V` input, `n_rb n_t n_t 2`.
    pub fn v_len(&self) -> usize {
        self.dims.n_rb * self.dims.n_t * self.dims.n_t * 2
    }

    /// Elements of the `S` input, `n_rb n_r`.
    pub fn s_len(&self) -> usize {
        self.dims.n_rb * self.dims.n_r
    }
}

/// Payload plus the out-of-band channel-type id.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub payload: Vec<f32>,
    pub channel_id: u8,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codeword_lengths_at_full_scale() {
        let got: Vec<usize> = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0]
            .iter()
            .map(|&b| codeword_length(b, Dims::full()).unwrap().l_eps)
            .collect();
        assert_eq!(got, vec![416, 208, 104, 52, 26, 13, 6]);
        assert!(codeword_length(1024.0, Dims::full()).unwrap().floored);
        assert!(!codeword_length(16.0, Dims::full()).unwrap().floored);
        assert_eq!(codeword_length(6656.0, Dims::full()).unwrap().l_eps, 1);
        assert!(codeword_length(0.0, Dims::full()).is_err());
        assert!(codeword_length(-2.0, Dims::full()).is_err());
    }

    #[test]
    fn emev_ratio_values() {
        let r = emev_ratio(16.0, Dims::full());
        assert!((r.exact - 8196.0 / 512.0 * 16.0).abs() < 1e-12);
        assert_eq!(r.reported, 256.0);
        let one = emev_ratio(1.0, Dims::full());
        assert!((one.exact - 16.0078125).abs() < 1e-12);
        // One RB, square: (2n^2 + n) / (2n^2).
        let sq = emev_ratio(3.0, Dims::new(1, 4, 4));
        assert!((sq.exact - 9.0 / 8.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip() {
        let mut c = EmevConfig::toy(8);
        c.s_scale = 3.25;
        let mut cfg = Config::new();
        c.write_into(&mut cfg);
        assert_eq!(EmevConfig::from_config(&cfg).unwrap(), c);
    }

    #[test]
    fn beta_h_selects_l_eps() {
        let cfg = Config::parse("beta_h = 16").unwrap();
        // 2 * 4 * 2 * 8 = 128 elements at the default dims.
        assert_eq!(EmevConfig::from_config(&cfg).unwrap().l_eps, 8);
        let bad = Config::parse("beta_h = 16\nl_eps = 16").unwrap();
        assert!(EmevConfig::from_config(&bad).is_err());
    }

    #[test]
    fn validation() {
        let mut c = EmevConfig::toy(8);
        c.l_eps = 200;
        assert!(c.validate().is_err());
        let mut c = EmevConfig::toy(8);
        c.kernel = 2;
        assert!(c.validate().is_err());
        let mut c = EmevConfig::toy(8);
        c.w_v = 0.7;
        assert!(c.validate().is_err());
    }
}
