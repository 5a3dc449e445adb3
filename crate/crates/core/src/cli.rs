//! The `emev` command line: generate, train, eval, compare and flops.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::bundle::{Model, ModelBundle, ModelType};
use crate::channel::{ChannelProfile, Dims};
use crate::checkpoint::Checkpoint;
use crate::classify::{ClassifierObjective, CodecRegistry};
use crate::config::Config;
use crate::dataset::{checksum, make_dataset, mix_datasets, Dataset, MIX_NAME};
use crate::emevnet::train::{attach_state, detach_state, train, write_curve, TrainConfig};
use crate::emevnet::{
    complexity_report, BaselineObjective, EmevConfig, EmevNet, EmevObjective, Prepared, Table,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, write_text, ComparisonReport, ComparisonRow, EvalReport, EvalRow, IdentityCodec,
    ModelKind, Reconstructor, SwitchedCodec,
};

/// Environment variable selecting the worker thread count.
pub const THREADS_ENV: &str = "EMEV_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "emev",
    version,
    about = "CSI feedback lab: channels, SVD precoding and eigenmatrix autoencoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a channel dataset, or mix existing ones.
    Generate(GenerateArgs),
    /// Train an EMEVNet, baseline or classifier model.
    Train(TrainArgs),
    /// Evaluate checkpoints on the test split of datasets.
    Eval(EvalArgs),
    /// Compare specialized models with mixed and baseline models.
    Compare(CompareArgs),
    /// Print per-layer parameter and FLOP counts.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct DimArgs {
    #[arg(long)]
    pub n_rb: Option<usize>,
    #[arg(long)]
    pub n_r: Option<usize>,
    #[arg(long)]
    pub n_t: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concatenate these dataset files instead of generating.
    #[arg(long, num_args = 1.., conflicts_with_all = ["profile", "count", "seed"])]
    pub mix: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub dims: DimArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "emev")]
    pub model: String,
    #[arg(long, conflicts_with = "l_eps")]
    pub beta_h: Option<f64>,
    #[arg(long)]
    pub l_eps: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, num_args = 1..)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Add a row for the pass-through debug codec per dataset.
    #[arg(long)]
    pub identity: bool,
    /// Registry config (`classifier`, `fallback`, `codec.<id>` paths):
    /// adds a row for identification plus codec switching per dataset.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub specialized: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub mixed: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub baseline: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of feature, transcoding, decoder.
    #[arg(long)]
    pub tables: Option<String>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(stdout_err)?;
            return Ok(());
        }
        Err(e) => return Err(Error::Usage(e.to_string())),
    };
    let manifest = manifest(&args);
    match cli.command {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, &manifest, out),
        Command::Compare(a) => compare_cmd(a, &manifest, out),
        Command::Flops(a) => flops_cmd(a, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// `emev v<version> <args...>`; heads every report.
fn manifest(args: &[std::ffi::OsString]) -> String {
    let flags: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    format!("emev v{} {}", env!("CARGO_PKG_VERSION"), flags.join(" "))
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map(Config::load)
        .transpose()
        .map(Option::unwrap_or_default)
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let ds = if !a.mix.is_empty() {
        let parts = a
            .mix
            .iter()
            .map(|p| Dataset::load(p))
            .collect::<Result<Vec<_>>>()?;
        mix_datasets(&parts)?
    } else {
        let mut cfg = load_config(a.config.as_deref())?;
        if let Some(p) = &a.profile {
            cfg.set("profile", p);
        }
        if let Some(c) = a.count {
            cfg.set("count", c);
        }
        if let Some(s) = a.seed {
            cfg.set("seed", s);
        }
        let toy = Dims::toy();
        let dims = Dims::new(
            a.dims
                .n_rb
                .map_or_else(|| cfg.get_or("n_rb", toy.n_rb), Ok)?,
            a.dims.n_r.map_or_else(|| cfg.get_or("n_r", toy.n_r), Ok)?,
            a.dims.n_t.map_or_else(|| cfg.get_or("n_t", toy.n_t), Ok)?,
        );
        let name: String = cfg
            .require("profile")
            .map_err(|_| Error::Usage("--profile is required".into()))?;
        let count: usize = cfg
            .require("count")
            .map_err(|_| Error::Usage("--count is required".into()))?;
        let profile = ChannelProfile::preset(&name, dims)?;
        make_dataset(&profile, count, cfg.get_or("seed", 0)?)?
    };
    let bytes = ds.to_bytes()?;
    std::fs::write(&a.out, &bytes).map_err(|e| Error::io(&a.out, e))?;
    writeln!(
        out,
        "wrote {} samples of {} to {} (checksum {:016x}, s_scale {})",
        ds.len(),
        ds.name,
        a.out.display(),
        checksum(&bytes),
        ds.s_scale
    )
    .map_err(stdout_err)
}

/// Loads a dataset, filling in `s_scale` when the file leaves it unset.
fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = Dataset::load(path)?;
    if ds.s_scale == 0.0 {
        ds.compute_s_scale()?;
    }
    Ok(ds)
}

/// Path of the training curve written next to a checkpoint.
pub fn curve_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("curve.csv")
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let kind = ModelType::parse(&a.model)?;
    let ds = load_dataset(&a.data)?;
    let mut cfg = load_config(a.config.as_deref())?;
    let overrides: [(&str, Option<String>); 7] = [
        ("beta_h", a.beta_h.map(|v| v.to_string())),
        ("l_eps", a.l_eps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("patience", a.patience.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            if k == "beta_h" {
                cfg.remove("l_eps");
            } else if k == "l_eps" {
                cfg.remove("beta_h");
            }
            cfg.set(k, v);
        }
    }
    for (k, v) in [
        ("n_rb", ds.dims.n_rb),
        ("n_r", ds.dims.n_r),
        ("n_t", ds.dims.n_t),
    ] {
        if !cfg.contains(k) {
            cfg.set(k, v);
        }
    }
    cfg.set("s_scale", ds.s_scale);
    cfg.set("profile", &ds.name);
    let seed: u64 = cfg.get_or("seed", 0)?;
    let tc = TrainConfig::from_config(&cfg)?;
    let (mut model, resume) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let b = ModelBundle::from_checkpoint(&ck)?;
            if b.model.model_type() != kind {
                return Err(Error::Usage(format!(
                    "cannot resume a {} checkpoint as {}",
                    b.model.model_type().name(),
                    kind.name()
                )));
            }
            let state = detach_state(&ck, b.model.store())?;
            (b.model, Some(state))
        }
        None => (Model::from_config(kind, &cfg, seed)?, None),
    };
    let dims = match &model {
        Model::Emev(m) => m.config.dims,
        Model::Baseline(m) => m.config.dims,
        Model::Classifier(m) => m.config.dims,
    };
    if dims != ds.dims {
        return Err(Error::dim(
            "train",
            format!("model dims {dims:?} differ from dataset dims {:?}", ds.dims),
        ));
    }
    let data = Prepared::from_dataset(&ds)?;
    let split = ds.split();
    info!(
        "split from master seed {}: {} train, {} val, {} test",
        ds.master_seed,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let outcome = match &mut model {
        Model::Emev(net) => train(&mut EmevObjective { net, data: &data }, &split, &tc, resume)?,
        Model::Baseline(net) => train(
            &mut BaselineObjective { net, data: &data },
            &split,
            &tc,
            resume,
        )?,
        Model::Classifier(net) => train(
            &mut ClassifierObjective { net, data: &data },
            &split,
            &tc,
            resume,
        )?,
    };
    let mut meta = cfg.clone();
    tc.write_into(&mut meta);
    let bundle = ModelBundle::new(model, meta);
    let mut ck = bundle.to_checkpoint();
    attach_state(&mut ck, bundle.model.store(), &outcome.state);
    ck.save(&a.out)?;
    write_curve(&curve_path(&a.out), &outcome.curve)?;
    let last = outcome
        .curve
        .last()
        .map_or(outcome.state.epoch, |r| r.epoch);
    writeln!(
        out,
        "trained {} on {} for {} epochs (best val {:.6e} at epoch {}{}) -> {}",
        kind.name(),
        ds.name,
        last,
        outcome.state.best_val,
        outcome.state.best_epoch,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        },
        a.out.display()
    )
    .map_err(stdout_err)?;
    if let Model::Classifier(c) = &bundle.model {
        writeln!(out, "test accuracy {:.4}", c.accuracy(&data, &split.test)?)
            .map_err(stdout_err)?;
    }
    Ok(())
}

/// Report row kind for a reconstruction model.
fn row_kind(b: &ModelBundle) -> Result<ModelKind> {
    match b.model {
        Model::Emev(_) if b.profile() == Some(MIX_NAME) => Ok(ModelKind::Mixed),
        Model::Emev(_) => Ok(ModelKind::Specialized),
        Model::Baseline(_) => Ok(ModelKind::FullCsi),
        Model::Classifier(_) => Err(Error::Usage(
            "classifier checkpoints are evaluated through --registry".into(),
        )),
    }
}

fn reconstructor(b: &ModelBundle) -> Result<&dyn Reconstructor> {
    match &b.model {
        Model::Emev(m) => Ok(m),
        Model::Baseline(m) => Ok(m),
        Model::Classifier(_) => Err(Error::Usage(
            "a classifier does not reconstruct channels".into(),
        )),
    }
}

struct Loaded {
    ds: Dataset,
    data: Prepared,
    test: Vec<usize>,
}

fn load_eval_data(paths: &[PathBuf]) -> Result<Vec<Loaded>> {
    paths
        .iter()
        .map(|p| {
            let ds = load_dataset(p)?;
            let data = Prepared::from_dataset(&ds)?;
            let test = ds.split().test;
            info!(
                "{}: evaluating {} test samples (split seed {})",
                ds.name,
                test.len(),
                ds.master_seed
            );
            Ok(Loaded { ds, data, test })
        })
        .collect()
}

fn eval_row(b: &ModelBundle, d: &Loaded) -> Result<EvalRow> {
    evaluate(
        reconstructor(b)?,
        row_kind(b)?,
        &d.ds.name,
        &d.data,
        &d.test,
    )
}

/// Registry built from a config of checkpoint paths, relative to the config
/// file's directory.
pub struct RegistryFiles {
    pub classifier: ModelBundle,
    pub registry: CodecRegistry<EmevNet>,
}

pub fn load_registry(path: &Path) -> Result<RegistryFiles> {
    let cfg = Config::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let emev = |p: &str| -> Result<EmevNet> {
        match ModelBundle::load(&base.join(p))?.model {
            Model::Emev(m) => Ok(m),
            _ => Err(Error::Config(format!(
                "registry entry {p} is not an EMEVNet checkpoint"
            ))),
        }
    };
    let classifier = ModelBundle::load(&base.join(cfg.require::<String>("classifier")?))?;
    if classifier.model.model_type() != ModelType::Classifier {
        return Err(Error::Config(
            "registry 'classifier' must be a classifier checkpoint".into(),
        ));
    }
    let fallback = cfg.get_str("fallback").map(emev).transpose()?;
    let mut entries = Vec::new();
    for (k, v) in cfg.entries() {
        if let Some(id) = k.strip_prefix("codec.") {
            let id: u8 = id
                .parse()
                .map_err(|_| Error::Config(format!("bad registry key '{k}'")))?;
            entries.push((id, emev(v)?));
        }
    }
    Ok(RegistryFiles {
        classifier,
        registry: CodecRegistry::new(fallback, entries)?,
    })
}

fn eval_cmd(a: EvalArgs, manifest: &str, out: &mut dyn Write) -> Result<()> {
    let bundles = a
        .ckpt
        .iter()
        .map(|p| ModelBundle::load(p))
        .collect::<Result<Vec<_>>>()?;
    let data = load_eval_data(&a.data)?;
    let registry = a.registry.as_deref().map(load_registry).transpose()?;
    let mut rows = Vec::new();
    for b in &bundles {
        for d in &data {
            rows.push(eval_row(b, d)?);
        }
    }
    for d in &data {
        if a.identity {
            let id = IdentityCodec { dims: d.ds.dims };
            rows.push(evaluate(
                &id,
                ModelKind::Identity,
                &d.ds.name,
                &d.data,
                &d.test,
            )?);
        }
        if let Some(r) = &registry {
            let Model::Classifier(c) = &r.classifier.model else {
                unreachable!("checked on load")
            };
            let sw = SwitchedCodec {
                classifier: c,
                registry: &r.registry,
            };
            rows.push(evaluate(
                &sw,
                ModelKind::Switched,
                &d.ds.name,
                &d.data,
                &d.test,
            )?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Usage(
            "nothing to evaluate: give --ckpt, --identity or --registry".into(),
        ));
    }
    let report = EvalReport {
        manifest: manifest.to_string(),
        rows,
    };
    report.save(&a.report)?;
    out.write_all(report.to_csv()?.as_bytes())
        .map_err(stdout_err)
}

fn l_eps_of(b: &ModelBundle) -> Result<usize> {
    reconstructor(b).map(|r| r.payload_len())
}

/// The model in `pool` with payload length `l`; `None` only when `pool` is
/// empty.
fn same_overhead<'a>(
    pool: &'a [ModelBundle],
    l: usize,
    what: &str,
) -> Result<Option<&'a ModelBundle>> {
    if pool.is_empty() {
        return Ok(None);
    }
    for b in pool {
        if l_eps_of(b)? == l {
            return Ok(Some(b));
        }
    }
    let have: Vec<usize> = pool.iter().map(l_eps_of).collect::<Result<_>>()?;
    Err(Error::Usage(format!(
        "refusing to compare: specialized model has payload length {l}, {what} models have {have:?}"
    )))
}

fn compare_cmd(a: CompareArgs, manifest: &str, out: &mut dyn Write) -> Result<()> {
    let load = |ps: &[PathBuf]| {
        ps.iter()
            .map(|p| ModelBundle::load(p))
            .collect::<Result<Vec<_>>>()
    };
    let (sp, mix, base) = (load(&a.specialized)?, load(&a.mixed)?, load(&a.baseline)?);
    // Check overhead fairness before spending time on evaluation.
    for s in &sp {
        let l = l_eps_of(s)?;
        same_overhead(&mix, l, "mixed")?;
        same_overhead(&base, l, "baseline")?;
    }
    let data = load_eval_data(&a.data)?;
    let mut rows = Vec::new();
    for d in &data {
        let matching: Vec<&ModelBundle> = sp
            .iter()
            .filter(|b| b.profile() == Some(d.ds.name.as_str()))
            .collect();
        if matching.is_empty() {
            return Err(Error::Usage(format!(
                "no specialized model was trained on '{}'",
                d.ds.name
            )));
        }
        for s in matching {
            let l = l_eps_of(s)?;
            let m = same_overhead(&mix, l, "mixed")?
                .map(|b| eval_row(b, d))
                .transpose()?;
            let c = same_overhead(&base, l, "baseline")?
                .map(|b| eval_row(b, d))
                .transpose()?;
            rows.push(ComparisonRow::new(eval_row(s, d)?, m, c)?);
        }
    }
    let report = ComparisonReport {
        manifest: manifest.to_string(),
        rows,
    };
    report.save(&a.report)?;
    out.write_all(report.to_csv()?.as_bytes())
        .map_err(stdout_err)
}

fn flops_cmd(a: FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let ec = EmevConfig::from_config(&cfg)?;
    let names: Vec<String> = match &a.tables {
        Some(t) => t
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => match cfg.get_list::<String>("tables")? {
            Some(l) => l,
            None => Table::ALL.iter().map(|t| t.name().to_string()).collect(),
        },
    };
    let tables = names
        .iter()
        .map(|n| Table::parse(n))
        .collect::<Result<Vec<_>>>()?;
    let rows = complexity_report(&ec, &tables);
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Numerical(format!("csv encoding: {e}"));
    w.write_record(["table", "layer", "params", "flops"])
        .map_err(err)?;
    for r in &rows {
        w.write_record([
            r.table.name(),
            &r.layer,
            &r.params.to_string(),
            &r.flops.to_string(),
        ])
        .map_err(err)?;
        writeln!(
            out,
            "{:<12} {:<22} {:>14} {:>18}",
            r.table.name(),
            r.layer,
            r.params,
            r.flops
        )
        .map_err(stdout_err)?;
    }
    let (p, f) = rows
        .iter()
        .fold((0u128, 0u128), |(p, f), r| (p + r.params, f + r.flops));
    writeln!(out, "{:<12} {:<22} {:>14} {:>18}", "total", "", p, f).map_err(stdout_err)?;
    if let Some(path) = &a.csv {
        let body = w
            .into_inner()
            .map_err(|e| Error::Numerical(format!("csv encoding: {e}")))?;
        write_text(path, &String::from_utf8_lossy(&body))?;
    }
    Ok(())
}
