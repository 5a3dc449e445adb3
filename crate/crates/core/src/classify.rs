//! Channel-type identification from `(|U|, S)` and codec switching.
//!
//! The classifier sees one row per resource block: the `n_r x n_r`
//! magnitudes of `U` followed by `S` divided by its own maximum. Two
//! same-padded convolutions, a global average pool and a dense softmax
//! layer produce a 5-way probability vector.

use std::collections::BTreeMap;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::Dims;
use crate::config::{join_list, Config};
use crate::emevnet::train::Objective;
use crate::emevnet::Prepared;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, ParamId, ParamStore, Tensor, Var, DEFAULT_LEAKY_SLOPE};

/// Size of the classifier's output layer (one class per preset).
pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelId {
    Known(u8),
    /// Nothing to classify (all-zero input); routed to the fallback codec.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub id: ChannelId,
    /// Softmax output; empty for unknown inputs.
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub dims: Dims,
    pub filters: [usize; 2],
    pub kernel: usize,
    pub leaky_slope: f32,
    /// Channel id reported for each output class.
    pub classes: [u8; NUM_CLASSES],
}

impl ClassifierConfig {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            filters: [8, 8],
            kernel: 3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            classes: [0, 1, 2, 3, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.kernel.is_multiple_of(2) || self.filters.contains(&0) {
            return Err(Error::Config(
                "classifier kernel must be odd and filters positive".into(),
            ));
        }
        let mut seen = self.classes;
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "classifier class ids must be distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let dims = Dims::new(
            cfg.require("n_rb")?,
            cfg.require("n_r")?,
            cfg.require("n_t")?,
        );
        let d = Self::new(dims);
        let filters = cfg
            .get_list::<usize>("cls_filters")?
            .unwrap_or(d.filters.to_vec());
        let classes = cfg
            .get_list::<u8>("cls_classes")?
            .unwrap_or(d.classes.to_vec());
        if filters.len() != 2 || classes.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "cls_filters needs 2 entries and cls_classes {NUM_CLASSES}"
            )));
        }
        let c = Self {
            dims,
            filters: [filters[0], filters[1]],
            kernel: cfg.get_or("cls_kernel", d.kernel)?,
            leaky_slope: cfg.get_or("leaky_slope", d.leaky_slope)?,
            classes: [classes[0], classes[1], classes[2], classes[3], classes[4]],
        };
        c.validate()?;
        Ok(c)
    }

    pub fn write_into(&self, cfg: &mut Config) {
        cfg.set("n_rb", self.dims.n_rb);
        cfg.set("n_r", self.dims.n_r);
        cfg.set("n_t", self.dims.n_t);
        cfg.set("cls_filters", join_list(&self.filters));
        cfg.set("cls_kernel", self.kernel);
        cfg.set("leaky_slope", self.leaky_slope);
        cfg.set("cls_classes", join_list(&self.classes));
    }

    /// Width of one classifier input row, `n_r^2 + n_r`.
    pub fn row_width(&self) -> usize {
        self.dims.n_r * self.dims.n_r + self.dims.n_r
    }
}

/// Classifier input map `[n_rb, n_r^2 + n_r]`, or `None` when `s` is all
/// zero.
pub fn features(dims: Dims, u_mag: &[f32], s: &[f32]) -> Result<Option<Vec<f32>>> {
    let Dims { n_rb, n_r, .. } = dims;
    if u_mag.len() != n_rb * n_r * n_r || s.len() != n_rb * n_r {
        return Err(Error::dim(
            "classify",
            format!(
                "expected |U| of {} and S of {} values",
                n_rb * n_r * n_r,
                n_rb * n_r
            ),
        ));
    }
    let max = s.iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(n_rb * (n_r * n_r + n_r));
    for rb in 0..n_rb {
        out.extend_from_slice(&u_mag[rb * n_r * n_r..(rb + 1) * n_r * n_r]);
        out.extend(s[rb * n_r..(rb + 1) * n_r].iter().map(|x| x / max));
    }
    Ok(Some(out))
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub store: ParamStore,
    ids: [ParamId; 6],
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let k = config.kernel;
        let [f1, f2] = config.filters;
        let w1 = st.add_uniform("cls.conv2d_1.w", &[k, k, 1, f1], k * k, &mut rng);
        let b1 = st.add_zeros("cls.conv2d_1.b", &[f1]);
        let w2 = st.add_uniform("cls.conv2d_2.w", &[k, k, f1, f2], k * k * f1, &mut rng);
        let b2 = st.add_zeros("cls.conv2d_2.b", &[f2]);
        let w3 = st.add_uniform("cls.fc.w", &[f2, NUM_CLASSES], f2, &mut rng);
        let b3 = st.add_zeros("cls.fc.b", &[NUM_CLASSES]);
        Ok(Self {
            config,
            store: st,
            ids: [w1, b1, w2, b2, w3, b3],
        })
    }

    /// Logits `[B, NUM_CLASSES]` for a `[B, n_rb, n_r^2 + n_r, 1]` input.
    pub fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p: Vec<Var> = self
            .ids
            .iter()
            .map(|&id| g.param(&self.store, id))
            .collect();
        let leaky = Activation::LeakyRelu {
            slope: self.config.leaky_slope,
        };
        let h = g.conv2d(x, p[0], p[1], leaky)?;
        let h = g.conv2d(h, p[2], p[3], leaky)?;
        let h = g.global_avg_pool(h)?;
        g.dense(h, p[4], p[5], Activation::Linear)
    }

    fn batch_tensor(&self, rows: &[Vec<f32>]) -> Result<Tensor> {
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(
            &[
                rows.len(),
                self.config.dims.n_rb,
                self.config.row_width(),
                1,
            ],
            data,
        )
    }

    /// Class probabilities for prepared feature maps.
    fn probabilities(&self, rows: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let x = g.input(self.batch_tensor(rows)?);
        let logits = self.logits_graph(&mut g, x)?;
        let probs = crate::tensor::softmax_rows(g.value(logits).data(), NUM_CLASSES);
        Ok(probs.chunks(NUM_CLASSES).map(|c| c.to_vec()).collect())
    }

    pub fn classify(&self, u_mag: &[f32], s: &[f32]) -> Result<Classification> {
        Ok(self
            .classify_batch(&[u_mag], &[s])?
            .pop()
            .expect("one sample"))
    }

    pub fn classify_batch(&self, u_mag: &[&[f32]], s: &[&[f32]]) -> Result<Vec<Classification>> {
        if u_mag.len() != s.len() {
            return Err(Error::dim("classify", "|U| and S batches differ in length"));
        }
        let feats = u_mag
            .iter()
            .zip(s)
            .map(|(u, s)| features(self.config.dims, u, s))
            .collect::<Result<Vec<_>>>()?;
        let known: Vec<Vec<f32>> = feats.iter().flatten().cloned().collect();
        let mut probs = if known.is_empty() {
            Vec::new()
        } else {
            self.probabilities(&known)?
        }
        .into_iter();
        Ok(feats
            .iter()
            .map(|f| match f {
                None => Classification {
                    id: ChannelId::Unknown,
                    probs: Vec::new(),
                },
                Some(_) => {
                    let p = probs.next().expect("one row per known sample");
                    // Strict comparison keeps the lowest index on ties.
                    let best = (1..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                    Classification {
                        id: ChannelId::Known(self.config.classes[best]),
                        probs: p,
                    }
                }
            })
            .collect())
    }

    /// Mean cross-entropy on `idx`; samples whose label is not a class are
    /// rejected.
    pub fn batch_loss(&mut self, data: &Prepared, idx: &[usize], grad: bool) -> Result<f64> {
        let mut rows = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let f = features(data.dims, &data.u_mag[i], &data.s[i])?.ok_or_else(|| {
                Error::UndefinedReference(format!("sample {i} is an all-zero channel"))
            })?;
            rows.push(f);
            let class = self
                .config
                .classes
                .iter()
                .position(|&c| c == data.labels[i])
                .ok_or_else(|| {
                    Error::Config(format!(
                        "label {} is not a classifier class",
                        data.labels[i]
                    ))
                })?;
            labels.push(class);
        }
        let mut g = Graph::new();
        let x = g.input(self.batch_tensor(&rows)?);
        let logits = self.logits_graph(&mut g, x)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        if grad {
            g.backward(loss, &mut self.store)?;
        }
        g.scalar(loss)
    }

    /// Fraction of `idx` whose predicted id equals the stored label.
    pub fn accuracy(&self, data: &Prepared, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::Usage("accuracy over an empty index set".into()));
        }
        let u: Vec<&[f32]> = idx.iter().map(|&i| data.u_mag[i].as_slice()).collect();
        let s: Vec<&[f32]> = idx.iter().map(|&i| data.s[i].as_slice()).collect();
        let hits = self
            .classify_batch(&u, &s)?
            .iter()
            .zip(idx)
            .filter(|(c, &i)| c.id == ChannelId::Known(data.labels[i]))
            .count();
        Ok(hits as f64 / idx.len() as f64)
    }
}

pub struct ClassifierObjective<'a> {
    pub net: &'a mut Classifier,
    pub data: &'a Prepared,
}

impl Objective for ClassifierObjective<'_> {
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

/// Anything selectable by the registry: it must report its payload length.
pub trait Codec {
    fn payload_len(&self) -> usize;
}

impl Codec for crate::emevnet::EmevNet {
    fn payload_len(&self) -> usize {
        self.l_eps()
    }
}

/// Which registry entry served a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Specialized(u8),
    Fallback,
}

/// Channel id to codec map with a mandatory mixed-data fallback. Every entry
/// shares one payload length.
#[derive(Debug, Clone)]
pub struct CodecRegistry<C> {
    entries: BTreeMap<u8, C>,
    fallback: C,
}

impl<C: Codec> CodecRegistry<C> {
    pub fn new(fallback: Option<C>, entries: impl IntoIterator<Item = (u8, C)>) -> Result<Self> {
        let fallback = fallback
            .ok_or_else(|| Error::Config("codec registry needs a fallback codec".into()))?;
        let entries: BTreeMap<u8, C> = entries.into_iter().collect();
        let l = fallback.payload_len();
        if let Some((id, c)) = entries.iter().find(|(_, c)| c.payload_len() != l) {
            return Err(Error::Config(format!(
                "codec for channel {id} has payload length {}, fallback has {l}",
                c.payload_len()
            )));
        }
        Ok(Self { entries, fallback })
    }

    pub fn payload_len(&self) -> usize {
        self.fallback.payload_len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.keys().copied()
    }

    pub fn fallback(&self) -> &C {
        &self.fallback
    }
}

/// The encoder/decoder pair for `id`; one codec object serves both ends.
pub fn select_codec<C: Codec>(id: ChannelId, registry: &CodecRegistry<C>) -> (&C, Selection) {
    let hit = match id {
        ChannelId::Known(k) => registry
            .entries
            .get(&k)
            .map(|c| (c, Selection::Specialized(k))),
        ChannelId::Unknown => None,
    };
    let (codec, sel) = hit.unwrap_or((&registry.fallback, Selection::Fallback));
    info!("channel {id:?} -> {sel:?}");
    (codec, sel)
}
