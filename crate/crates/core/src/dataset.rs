//! Channel datasets: generation, mixing, the train/val/test split and the
//! `EMEVDS01` binary file format.
//!
//! File layout (little-endian): magic, version `u32`, `n_samples n_rb n_r
//! n_t` as `u32`, name length `u32` + UTF-8 name, master seed `u64`,
//! `s_scale` `f32` (0 = unset), every sample's `H` as `f32`
//! `[rb][rx][tx][re,im]`, then one `u8` label per sample.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{derive_seed, generate_channel, ChannelProfile, ChannelTensor, Dims};
use crate::error::{Error, Result};
use crate::svd::svd_transform;

pub const DATASET_MAGIC: &[u8; 8] = b"EMEVDS01";
pub const DATASET_VERSION: u32 = 1;
/// Label used for mixed datasets' name field.
pub const MIX_NAME: &str = "mix";

const SPLIT_STREAM: u64 = 0x53_504c_4954;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub master_seed: u64,
    /// Largest singular value over the training split; 0 when unset.
    pub s_scale: f32,
    pub dims: Dims,
    pub samples: Vec<ChannelTensor>,
    pub labels: Vec<u8>,
}

/// Index lists of the 70/15/15 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Deterministic shuffle seeded by the dataset's master seed.
    pub fn new(n: usize, master_seed: u64) -> Split {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, SPLIT_STREAM));
        idx.shuffle(&mut rng);
        let n_train = (n as f64 * 0.70).round() as usize;
        let n_val = ((n as f64 * 0.15).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Split {
            train: idx,
            val,
            test,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self) -> Split {
        Split::new(self.len(), self.master_seed)
    }

    /// Recomputes `s_scale` from the training split.
    pub fn compute_s_scale(&mut self) -> Result<()> {
        let split = self.split();
        let maxima = split
            .train
            .par_iter()
            .map(|&i| svd_transform(&self.samples[i]).map(|d| d.max_singular_value()))
            .collect::<Result<Vec<f64>>>()?;
        let s = maxima.into_iter().fold(0.0, f64::max) as f32;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numerical(
                "training split has no non-zero singular values".into(),
            ));
        }
        self.s_scale = s;
        Ok(())
    }

    /// Subset with the given indices, keeping metadata.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            master_seed: self.master_seed,
            s_scale: self.s_scale,
            dims: self.dims,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = u32::try_from(self.len()).map_err(|_| Error::Config("too many samples".into()))?;
        let per = self.dims.h_entries() * 2;
        let mut out = Vec::with_capacity(64 + self.name.len() + self.len() * (per * 4 + 1));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [
            n,
            self.dims.n_rb as u32,
            self.dims.n_r as u32,
            self.dims.n_t as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        out.extend_from_slice(&self.s_scale.to_le_bytes());
        for s in &self.samples {
            for v in s.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.labels);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
        let fmt = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = ByteReader::new(bytes);
        let magic = r
            .take(8)
            .ok_or_else(|| fmt("file too short for header".into()))?;
        if magic != DATASET_MAGIC {
            return Err(fmt("not a dataset file (bad magic)".into()));
        }
        let version = r.u32().ok_or_else(|| fmt("truncated header".into()))?;
        if version != DATASET_VERSION {
            return Err(fmt(format!("unsupported dataset version {version}")));
        }
        let mut h = [0usize; 4];
        for v in &mut h {
            *v = r.u32().ok_or_else(|| fmt("truncated header".into()))? as usize;
        }
        let [n, n_rb, n_r, n_t] = h;
        let name_len = r.u32().ok_or_else(|| fmt("truncated header".into()))? as usize;
        let name = r
            .take(name_len)
            .ok_or_else(|| fmt("truncated profile name".into()))
            .and_then(|b| {
                String::from_utf8(b.to_vec()).map_err(|_| fmt("profile name is not UTF-8".into()))
            })?;
        let master_seed = r.u64().ok_or_else(|| fmt("truncated header".into()))?;
        let s_scale = f32::from_bits(r.u32().ok_or_else(|| fmt("truncated header".into()))?);
        let dims = Dims::new(n_rb, n_r, n_t);
        dims.validate().map_err(|e| fmt(e.to_string()))?;
        let per = dims.h_entries() * 2;
        let expected = n
            .checked_mul(per * 4 + 1)
            .ok_or_else(|| fmt("sample count overflows".into()))?;
        if r.remaining() != expected {
            return Err(fmt(format!(
                "payload is {} bytes, header implies {expected}",
                r.remaining()
            )));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = r.take(per * 4).expect("length checked");
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            samples.push(ChannelTensor::new(dims, data).map_err(|e| fmt(e.to_string()))?);
        }
        let labels = r.take(n).expect("length checked").to_vec();
        Ok(Dataset {
            name,
            master_seed,
            s_scale,
            dims,
            samples,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, path)
    }
}

/// Generates `count` samples of one profile. Sample `i` uses the seed
/// `derive_seed(seed, i)`, so generation order does not matter.
pub fn make_dataset(profile: &ChannelProfile, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Usage("dataset needs at least one sample".into()));
    }
    profile.validate()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate_channel(profile, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset {
        name: profile.name.clone(),
        master_seed: seed,
        s_scale: 0.0,
        dims: profile.dims,
        samples,
        labels: vec![profile.label; count],
    };
    ds.compute_s_scale()?;
    Ok(ds)
}

/// Concatenates datasets of equal dims, keeping per-sample labels.
pub fn mix_datasets(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("nothing to mix".into()))?;
    let mut seed = 0u64;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.dims != first.dims {
            return Err(Error::dim(
                "mix",
                format!(
                    "{} has dims {:?}, expected {:?}",
                    p.name, p.dims, first.dims
                ),
            ));
        }
        seed = derive_seed(seed, p.master_seed);
        samples.extend(p.samples.iter().cloned());
        labels.extend_from_slice(&p.labels);
    }
    let mut ds = Dataset {
        name: MIX_NAME.to_string(),
        master_seed: seed,
        s_scale: 0.0,
        dims: first.dims,
        samples,
        labels,
    };
    ds.compute_s_scale()?;
    Ok(ds)
}

/// 64-bit FNV-1a digest, printed as a file checksum.
pub fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Dataset {
        let p = ChannelProfile::preset("cdl-d-like", Dims::toy()).unwrap();
        make_dataset(&p, 10, seed).unwrap()
    }

    #[test]
    fn split_partitions_indices() {
        let s = Split::new(1000, 5);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 150, 150));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, Split::new(1000, 5));
        assert_ne!(s, Split::new(1000, 6));
    }

    #[test]
    fn bytes_round_trip() {
        let ds = small(1);
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(ds.s_scale > 0.0);
    }

    #[test]
    fn matches_direct_generation() {
        let p = ChannelProfile::preset("cdl-d-like", Dims::toy()).unwrap();
        let ds = small(1);
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(*s, generate_channel(&p, derive_seed(1, i as u64)).unwrap());
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = small(2).to_bytes().unwrap();
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bad, p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..10], p),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn mixing_keeps_labels() {
        let a = make_dataset(
            &ChannelProfile::preset("cdl-a-like", Dims::toy()).unwrap(),
            4,
            1,
        )
        .unwrap();
        let e = make_dataset(
            &ChannelProfile::preset("cdl-e-like", Dims::toy()).unwrap(),
            3,
            1,
        )
        .unwrap();
        let m = mix_datasets(&[a, e]).unwrap();
        assert_eq!(m.labels, vec![0, 0, 0, 0, 4, 4, 4]);
        assert_eq!(m.name, MIX_NAME);
    }
}
