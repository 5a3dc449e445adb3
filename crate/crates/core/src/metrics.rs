//! Reconstruction quality: NMSE in dB, column-wise cosine similarity, and
//! report rows for evaluation and model comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::channel::Dims;
use crate::classify::{select_codec, Classifier, CodecRegistry, Selection};
use crate::emevnet::{emev_ratio, BaselineNet, EmevNet, Prepared};
use crate::error::{Error, Result};

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// An NMSE value; exact reconstruction has no finite dB value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nmse {
    Perfect,
    Db(f64),
}

impl Nmse {
    pub fn from_ratio(ratio: f64) -> Nmse {
        if ratio == 0.0 {
            Nmse::Perfect
        } else {
            Nmse::Db(10.0 * ratio.log10())
        }
    }

    /// dB value, `-inf` when perfect.
    pub fn db(self) -> f64 {
        match self {
            Nmse::Perfect => f64::NEG_INFINITY,
            Nmse::Db(d) => d,
        }
    }

    pub fn is_perfect(self) -> bool {
        self == Nmse::Perfect
    }
}

impl fmt::Display for Nmse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nmse::Perfect => f.write_str("-inf"),
            Nmse::Db(d) => write!(f, "{d}"),
        }
    }
}

/// `||x - x_hat||^2 / ||x||^2` over the flat real representation.
pub fn nmse_ratio(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::dim(
            "nmse",
            format!("{} vs {} values", x.len(), x_hat.len()),
        ));
    }
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(x_hat) {
        let d = a as f64 - b as f64;
        err += d * d;
        norm += a as f64 * a as f64;
    }
    if norm == 0.0 {
        return Err(Error::UndefinedReference(
            "nmse reference has zero norm".into(),
        ));
    }
    Ok(err / norm)
}

pub fn nmse_db(x: &[f32], x_hat: &[f32]) -> Result<Nmse> {
    nmse_ratio(x, x_hat).map(Nmse::from_ratio)
}

/// Sum of per-column similarities plus how many columns were used or
/// skipped for having zero norm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Similarity {
    pub sum: f64,
    pub columns: usize,
    pub skipped: usize,
}

impl Similarity {
    pub fn mean(&self) -> Result<f64> {
        if self.columns == 0 {
            return Err(Error::UndefinedReference(
                "every column has zero norm".into(),
            ));
        }
        Ok(self.sum / self.columns as f64)
    }

    pub fn merge(&mut self, other: Similarity) {
        self.sum += other.sum;
        self.columns += other.columns;
        self.skipped += other.skipped;
    }
}

/// Column similarities `|x_c^H x_hat_c| / (||x_c|| ||x_hat_c||)` for `blocks`
/// stacked `rows x cols` matrices stored row-major. With `complex`, each
/// entry is an `(re, im)` pair.
pub fn column_similarity(
    x: &[f32],
    x_hat: &[f32],
    blocks: usize,
    rows: usize,
    cols: usize,
    complex: bool,
) -> Result<Similarity> {
    let width = if complex { 2 } else { 1 };
    let n = blocks * rows * cols * width;
    if x.len() != n || x_hat.len() != n {
        return Err(Error::dim(
            "cosine",
            format!("expected {n} values, got {} and {}", x.len(), x_hat.len()),
        ));
    }
    let mut out = Similarity::default();
    for b in 0..blocks {
        for c in 0..cols {
            let (mut re, mut im, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for r in 0..rows {
                let k = ((b * rows + r) * cols + c) * width;
                let (ar, br) = (x[k] as f64, x_hat[k] as f64);
                let (ai, bi) = if complex {
                    (x[k + 1] as f64, x_hat[k + 1] as f64)
                } else {
                    (0.0, 0.0)
                };
                // conj(a) * b
                re += ar * br + ai * bi;
                im += ar * bi - ai * br;
                na += ar * ar + ai * ai;
                nb += br * br + bi * bi;
            }
            if na == 0.0 || nb == 0.0 {
                out.skipped += 1;
                continue;
            }
            out.sum += (re.hypot(im) / (na.sqrt() * nb.sqrt())).min(1.0);
            out.columns += 1;
        }
    }
    Ok(out)
}

/// Mean column similarity; errors when every column is zero.
pub fn cosine_similarity(
    x: &[f32],
    x_hat: &[f32],
    blocks: usize,
    rows: usize,
    cols: usize,
    complex: bool,
) -> Result<f64> {
    column_similarity(x, x_hat, blocks, rows, cols, complex)?.mean()
}

/// A codec under evaluation: maps dataset samples to `(V_hat, S_hat)` with
/// `S_hat` in physical units.
pub trait Reconstructor {
    fn dims(&self) -> Dims;
    fn payload_len(&self) -> usize;
    fn reconstruct(&self, data: &Prepared, idx: &[usize]) -> Result<Vec<(Vec<f32>, Vec<f32>)>>;
}

impl Reconstructor for EmevNet {
    fn dims(&self) -> Dims {
        self.config.dims
    }

    fn payload_len(&self) -> usize {
        self.l_eps()
    }

    fn reconstruct(&self, data: &Prepared, idx: &[usize]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        let v: Vec<&[f32]> = idx.iter().map(|&i| data.v[i].as_slice()).collect();
        let s: Vec<&[f32]> = idx.iter().map(|&i| data.s[i].as_slice()).collect();
        self.reconstruct_batch(&v, &s)
    }
}

impl Reconstructor for BaselineNet {
    fn dims(&self) -> Dims {
        self.config.dims
    }

    fn payload_len(&self) -> usize {
        self.l_eps()
    }

    fn reconstruct(&self, data: &Prepared, idx: &[usize]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        let h: Vec<&[f32]> = idx.iter().map(|&i| data.h[i].as_slice()).collect();
        self.reconstruct_batch(&h)
    }
}

/// Debug codec that returns its inputs unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCodec {
    pub dims: Dims,
}

impl Reconstructor for IdentityCodec {
    fn dims(&self) -> Dims {
        self.dims
    }

    /// Everything is sent: `V` and `S` in full.
    fn payload_len(&self) -> usize {
        let Dims { n_rb, n_r, n_t } = self.dims;
        n_rb * (2 * n_t * n_t + n_r)
    }

    fn reconstruct(&self, data: &Prepared, idx: &[usize]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        Ok(idx
            .iter()
            .map(|&i| (data.v[i].clone(), data.s[i].clone()))
            .collect())
    }
}

/// Identification followed by codec switching: each sample is classified
/// and sent through the codec the registry selects for it.
pub struct SwitchedCodec<'a> {
    pub classifier: &'a Classifier,
    pub registry: &'a CodecRegistry<EmevNet>,
}

impl SwitchedCodec<'_> {
    /// Which registry entry each sample is routed to.
    pub fn selections(&self, data: &Prepared, idx: &[usize]) -> Result<Vec<Selection>> {
        let u: Vec<&[f32]> = idx.iter().map(|&i| data.u_mag[i].as_slice()).collect();
        let s: Vec<&[f32]> = idx.iter().map(|&i| data.s[i].as_slice()).collect();
        Ok(self
            .classifier
            .classify_batch(&u, &s)?
            .into_iter()
            .map(|c| select_codec(c.id, self.registry).1)
            .collect())
    }
}

impl Reconstructor for SwitchedCodec<'_> {
    fn dims(&self) -> Dims {
        self.registry.fallback().config.dims
    }

    fn payload_len(&self) -> usize {
        self.registry.payload_len()
    }

    fn reconstruct(&self, data: &Prepared, idx: &[usize]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        let sel = self.selections(data, idx)?;
        let mut groups: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
        for (pos, s) in sel.iter().enumerate() {
            let key = match s {
                Selection::Specialized(id) => Some(*id),
                Selection::Fallback => None,
            };
            groups.entry(key).or_default().push(pos);
        }
        let mut out = vec![None; idx.len()];
        for (key, positions) in groups {
            let codec = match key {
                Some(id) => select_codec(crate::classify::ChannelId::Known(id), self.registry).0,
                None => self.registry.fallback(),
            };
            let sub: Vec<usize> = positions.iter().map(|&p| idx[p]).collect();
            for (p, r) in positions.into_iter().zip(codec.reconstruct(data, &sub)?) {
                out[p] = Some(r);
            }
        }
        Ok(out
            .into_iter()
            .map(|r| r.expect("every sample routed"))
            .collect())
    }
}

/// Which family a report row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ModelKind {
    #[serde(rename = "N_sp")]
    Specialized,
    #[serde(rename = "N_mix")]
    Mixed,
    #[serde(rename = "N_csi")]
    FullCsi,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "switched")]
    Switched,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Specialized => "N_sp",
            ModelKind::Mixed => "N_mix",
            ModelKind::FullCsi => "N_csi",
            ModelKind::Identity => "identity",
            ModelKind::Switched => "switched",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub profile: String,
    pub model: ModelKind,
    pub l_eps: usize,
    /// Compression ratio of `H` implied by `l_eps`.
    pub beta_h: f64,
    pub beta_emev: f64,
    pub nmse_v: Nmse,
    pub nmse_s: Nmse,
    pub rho_v: f64,
    pub rho_s: f64,
    pub samples: usize,
}

/// Runs `model` over `idx` of `data` and averages both metrics for `V_hat`
/// and `S_hat`. NMSE is the mean of per-sample ratios; rho the mean over all
/// non-zero columns.
pub fn evaluate(
    model: &dyn Reconstructor,
    kind: ModelKind,
    profile: &str,
    data: &Prepared,
    idx: &[usize],
) -> Result<EvalRow> {
    if idx.is_empty() {
        return Err(Error::Usage("evaluation needs at least one sample".into()));
    }
    let dims = model.dims();
    if dims != data.dims {
        return Err(Error::dim(
            "evaluate",
            format!(
                "model dims {dims:?} differ from dataset dims {:?}",
                data.dims
            ),
        ));
    }
    let Dims { n_rb, n_r, n_t } = dims;
    let (mut ratio_v, mut ratio_s) = (0.0f64, 0.0f64);
    let (mut sim_v, mut sim_s) = (Similarity::default(), Similarity::default());
    for chunk in idx.chunks(EVAL_BATCH) {
        let out = model.reconstruct(data, chunk)?;
        for (&i, (v_hat, s_hat)) in chunk.iter().zip(&out) {
            ratio_v += nmse_ratio(&data.v[i], v_hat)?;
            ratio_s += nmse_ratio(&data.s[i], s_hat)?;
            sim_v.merge(column_similarity(&data.v[i], v_hat, n_rb, n_t, n_t, true)?);
            sim_s.merge(column_similarity(&data.s[i], s_hat, n_rb, n_r, 1, false)?);
        }
    }
    let n = idx.len() as f64;
    let l_eps = model.payload_len();
    let beta_h = (2 * dims.h_entries()) as f64 / l_eps as f64;
    Ok(EvalRow {
        profile: profile.to_string(),
        model: kind,
        l_eps,
        beta_h,
        beta_emev: emev_ratio(beta_h, dims).exact,
        nmse_v: Nmse::from_ratio(ratio_v / n),
        nmse_s: Nmse::from_ratio(ratio_s / n),
        rho_v: sim_v.mean()?,
        rho_s: sim_s.mean()?,
        samples: idx.len(),
    })
}

#[derive(Serialize)]
struct JsonRow<'a> {
    profile: &'a str,
    model: ModelKind,
    l_eps: usize,
    beta_h: f64,
    beta_emev: f64,
    nmse_v_db: Option<f64>,
    nmse_v_perfect: bool,
    nmse_s_db: Option<f64>,
    nmse_s_perfect: bool,
    rho_v: f64,
    rho_s: f64,
    samples: usize,
}

impl<'a> From<&'a EvalRow> for JsonRow<'a> {
    fn from(r: &'a EvalRow) -> Self {
        let finite = |n: Nmse| match n {
            Nmse::Perfect => None,
            Nmse::Db(d) => Some(d),
        };
        JsonRow {
            profile: &r.profile,
            model: r.model,
            l_eps: r.l_eps,
            beta_h: r.beta_h,
            beta_emev: r.beta_emev,
            nmse_v_db: finite(r.nmse_v),
            nmse_v_perfect: r.nmse_v.is_perfect(),
            nmse_s_db: finite(r.nmse_s),
            nmse_s_perfect: r.nmse_s.is_perfect(),
            rho_v: r.rho_v,
            rho_s: r.rho_s,
            samples: r.samples,
        }
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "profile",
    "model",
    "l_eps",
    "beta_h",
    "beta_emev",
    "nmse_v_db",
    "nmse_v_perfect",
    "nmse_s_db",
    "nmse_s_perfect",
    "rho_v",
    "rho_s",
    "samples",
];

fn row_fields(r: &EvalRow) -> Vec<String> {
    vec![
        r.profile.clone(),
        r.model.name().to_string(),
        r.l_eps.to_string(),
        r.beta_h.to_string(),
        r.beta_emev.to_string(),
        r.nmse_v.to_string(),
        r.nmse_v.is_perfect().to_string(),
        r.nmse_s.to_string(),
        r.nmse_s.is_perfect().to_string(),
        r.rho_v.to_string(),
        r.rho_s.to_string(),
        r.samples.to_string(),
    ]
}

/// Report rows headed by a manifest line (`# ...`) naming the command,
/// flags, seeds and tool version.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub manifest: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        write_csv(
            &self.manifest,
            &REPORT_COLUMNS,
            self.rows.iter().map(row_fields),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<JsonRow> = self.rows.iter().map(JsonRow::from).collect();
        serde_json::to_string_pretty(
            &serde_json::json!({ "manifest": self.manifest, "rows": rows }),
        )
        .map_err(|e| Error::Numerical(format!("report serialization: {e}")))
    }

    /// Writes the CSV to `path` and the JSON mirror next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv()?)?;
        write_text(&path.with_extension("json"), &self.to_json()?)
    }
}

/// Side-by-side rows for one profile and payload length.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub specialized: EvalRow,
    pub mixed: Option<EvalRow>,
    pub baseline: Option<EvalRow>,
}

/// Differences `specialized - other` of the four metrics. NMSE deltas are
/// undefined when either side is perfect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Delta {
    pub nmse_v_db: Option<f64>,
    pub nmse_s_db: Option<f64>,
    pub rho_v: f64,
    pub rho_s: f64,
}

pub fn delta(sp: &EvalRow, other: &EvalRow) -> Delta {
    let d = |a: Nmse, b: Nmse| match (a, b) {
        (Nmse::Db(x), Nmse::Db(y)) => Some(x - y),
        _ => None,
    };
    Delta {
        nmse_v_db: d(sp.nmse_v, other.nmse_v),
        nmse_s_db: d(sp.nmse_s, other.nmse_s),
        rho_v: sp.rho_v - other.rho_v,
        rho_s: sp.rho_s - other.rho_s,
    }
}

impl ComparisonRow {
    /// Refuses rows whose payload lengths differ: comparisons are only made
    /// at equal feedback overhead.
    pub fn new(
        specialized: EvalRow,
        mixed: Option<EvalRow>,
        baseline: Option<EvalRow>,
    ) -> Result<Self> {
        for other in mixed.iter().chain(&baseline) {
            if other.l_eps != specialized.l_eps {
                return Err(Error::Usage(format!(
                    "refusing to compare payload lengths {} and {}",
                    specialized.l_eps, other.l_eps
                )));
            }
        }
        Ok(Self {
            specialized,
            mixed,
            baseline,
        })
    }

    pub fn vs_mixed(&self) -> Option<Delta> {
        self.mixed.as_ref().map(|m| delta(&self.specialized, m))
    }

    pub fn vs_baseline(&self) -> Option<Delta> {
        self.baseline.as_ref().map(|b| delta(&self.specialized, b))
    }
}

const METRICS: [&str; 4] = ["nmse_v_db", "nmse_s_db", "rho_v", "rho_s"];

fn metric_fields(r: Option<&EvalRow>) -> Vec<String> {
    match r {
        Some(r) => vec![
            r.nmse_v.to_string(),
            r.nmse_s.to_string(),
            r.rho_v.to_string(),
            r.rho_s.to_string(),
        ],
        None => vec![String::new(); 4],
    }
}

fn delta_fields(d: Option<Delta>) -> Vec<String> {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    match d {
        Some(d) => vec![
            opt(d.nmse_v_db),
            opt(d.nmse_s_db),
            d.rho_v.to_string(),
            d.rho_s.to_string(),
        ],
        None => vec![String::new(); 4],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub manifest: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn columns() -> Vec<String> {
        let mut cols = vec!["profile".to_string(), "l_eps".to_string()];
        for prefix in ["sp", "mix", "csi", "sp_minus_mix", "sp_minus_csi"] {
            cols.extend(METRICS.iter().map(|m| format!("{prefix}_{m}")));
        }
        cols
    }

    pub fn to_csv(&self) -> Result<String> {
        let cols = Self::columns();
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        write_csv(
            &self.manifest,
            &cols,
            self.rows.iter().map(|r| {
                let mut f = vec![
                    r.specialized.profile.clone(),
                    r.specialized.l_eps.to_string(),
                ];
                f.extend(metric_fields(Some(&r.specialized)));
                f.extend(metric_fields(r.mixed.as_ref()));
                f.extend(metric_fields(r.baseline.as_ref()));
                f.extend(delta_fields(r.vs_mixed()));
                f.extend(delta_fields(r.vs_baseline()));
                f
            }),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "specialized": JsonRow::from(&r.specialized),
                    "mixed": r.mixed.as_ref().map(JsonRow::from),
                    "baseline": r.baseline.as_ref().map(JsonRow::from),
                    "sp_minus_mix": r.vs_mixed(),
                    "sp_minus_csi": r.vs_baseline(),
                })
            })
            .collect();
        serde_json::to_string_pretty(
            &serde_json::json!({ "manifest": self.manifest, "rows": rows }),
        )
        .map_err(|e| Error::Numerical(format!("report serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv()?)?;
        write_text(&path.with_extension("json"), &self.to_json()?)
    }
}

fn write_csv(
    manifest: &str,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Numerical(format!("csv encoding: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Numerical(format!("csv encoding: {e}")))?;
    Ok(format!("# {manifest}\n{}", String::from_utf8_lossy(&body)))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
