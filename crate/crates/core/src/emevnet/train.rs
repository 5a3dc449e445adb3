//! Mini-batch Adam training with learning-rate decay on stagnation, early
//! stopping and best-validation parameter selection.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::derive_seed;
use crate::checkpoint::{Checkpoint, NamedTensors};
use crate::config::Config;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

/// A model plus data that can report mean mini-batch losses.
pub trait Objective {
    /// Mean loss over the samples `idx`. With `grad`, also adds the gradient
    /// of that mean into the parameter store.
    fn batch_loss(&mut self, idx: &[usize], grad: bool) -> Result<f64>;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    /// Multiply the learning rate by `decay` every `decay_every` stagnant epochs.
    pub decay_every: usize,
    pub decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 500,
            patience: 50,
            decay_every: 20,
            decay: 0.7,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            lr: cfg.get_or("lr", d.lr)?,
            max_epochs: cfg.get_or("epochs", d.max_epochs)?,
            patience: cfg.get_or("patience", d.patience)?,
            decay_every: cfg.get_or("decay_every", d.decay_every)?,
            decay: cfg.get_or("decay", d.decay)?,
            batch_size: cfg.get_or("batch_size", d.batch_size)?,
            seed: cfg.get_or("seed", d.seed)?,
        };
        if !(c.lr > 0.0)
            || c.batch_size == 0
            || c.patience == 0
            || c.decay_every == 0
            || !(c.decay > 0.0)
        {
            return Err(Error::Config(
                "lr, decay, batch_size, patience and decay_every must be positive".into(),
            ));
        }
        Ok(c)
    }

    pub fn write_into(&self, cfg: &mut Config) {
        cfg.set("lr", self.lr);
        cfg.set("epochs", self.max_epochs);
        cfg.set("patience", self.patience);
        cfg.set("decay_every", self.decay_every);
        cfg.set("decay", self.decay);
        cfg.set("batch_size", self.batch_size);
        cfg.set("seed", self.seed);
    }
}

/// One line of the training curve. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stagnant: usize,
    pub adam: Adam,
    /// Parameters at the best validation loss so far.
    pub best: Vec<Tensor>,
    /// Parameters after the last completed epoch.
    pub current: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub state: TrainState,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> f64 {
        self.state.best_val
    }
}

fn mean_loss<O: Objective>(obj: &mut O, idx: &[usize], batch: usize) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        total += obj.batch_loss(chunk, false)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains `obj` on `split.train`, selecting on `split.val`. On return the
/// store holds the best-validation parameters.
pub fn train<O: Objective>(
    obj: &mut O,
    split: &Split,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Usage(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let mut curve = Vec::new();
    let mut state = match resume {
        Some(s) => {
            obj.store_mut().restore(&s.current)?;
            s
        }
        None => {
            let train0 = mean_loss(obj, &split.train, cfg.batch_size)?;
            let val0 = mean_loss(obj, &split.val, cfg.batch_size)?;
            if !val0.is_finite() {
                return Err(Error::Divergence { epoch: 0 });
            }
            curve.push(EpochRecord {
                epoch: 0,
                train_loss: train0,
                val_loss: val0,
                lr: cfg.lr,
            });
            let snap = obj.store().snapshot();
            TrainState {
                epoch: 0,
                lr: cfg.lr,
                best_val: val0,
                best_epoch: 0,
                stagnant: 0,
                adam: Adam::new(
                    obj.store(),
                    AdamConfig {
                        lr: cfg.lr,
                        ..AdamConfig::default()
                    },
                ),
                best: snap.clone(),
                current: snap,
            }
        }
    };
    let mut stopped_early = false;
    while state.epoch < cfg.max_epochs {
        if state.stagnant >= cfg.patience {
            stopped_early = true;
            break;
        }
        let epoch = state.epoch + 1;
        let lr = state.lr;
        state.adam.set_lr(lr);
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            epoch as u64,
        )));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = obj.batch_loss(chunk, true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += loss * chunk.len() as f64;
            state.adam.step(obj.store_mut())?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(obj, &split.val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:.3e}");
        state.epoch = epoch;
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_epoch = epoch;
            state.best = obj.store().snapshot();
            state.stagnant = 0;
        } else {
            state.stagnant += 1;
            if state.stagnant % cfg.decay_every == 0 {
                state.lr *= cfg.decay;
                info!(
                    "epoch {epoch}: {} stagnant epochs, lr -> {:.3e}",
                    state.stagnant, state.lr
                );
            }
        }
        if state.stagnant >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    state.current = obj.store().snapshot();
    obj.store_mut().restore(&state.best)?;
    Ok(TrainOutcome {
        curve,
        state,
        stopped_early,
    })
}

/// Writes the curve as CSV (`epoch,train_loss,val_loss,lr`).
pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "train_loss", "val_loss", "lr"])
        .map_err(|e| csv_err(path, e))?;
    for r in curve {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.lr.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Stores resume state into a checkpoint: counters go in the config blob,
/// tensors in the optimizer section.
pub fn attach_state(ck: &mut Checkpoint, store: &ParamStore, state: &TrainState) {
    let c = &mut ck.config;
    c.set("resume.epoch", state.epoch);
    c.set("resume.lr", state.lr);
    c.set("resume.best_val", state.best_val);
    c.set("resume.best_epoch", state.best_epoch);
    c.set("resume.stagnant", state.stagnant);
    c.set("resume.step", state.adam.step_count());
    let mut opt: NamedTensors = Vec::new();
    for (i, p) in store.iter().enumerate() {
        opt.push((
            format!("adam.m.{}", p.name),
            state.adam.first_moments()[i].clone(),
        ));
        opt.push((
            format!("adam.v.{}", p.name),
            state.adam.second_moments()[i].clone(),
        ));
        opt.push((format!("resume.{}", p.name), state.current[i].clone()));
    }
    ck.optimizer = Some(opt);
}

/// Reads resume state back; the checkpoint's parameters are the best ones.
pub fn detach_state(ck: &Checkpoint, store: &ParamStore) -> Result<TrainState> {
    let c = &ck.config;
    let lr: f64 = c.require("resume.lr")?;
    let mut first = Vec::with_capacity(store.len());
    let mut second = Vec::with_capacity(store.len());
    let mut current = Vec::with_capacity(store.len());
    let get = |name: String| {
        ck.optimizer_tensor(&name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer state '{name}'")))
    };
    for p in store.iter() {
        first.push(get(format!("adam.m.{}", p.name))?);
        second.push(get(format!("adam.v.{}", p.name))?);
        current.push(get(format!("resume.{}", p.name))?);
    }
    let best = store
        .iter()
        .map(|p| {
            ck.params
                .iter()
                .find(|(n, _)| *n == p.name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", p.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainState {
        epoch: c.require("resume.epoch")?,
        lr,
        best_val: c.require("resume.best_val")?,
        best_epoch: c.require("resume.best_epoch")?,
        stagnant: c.require("resume.stagnant")?,
        adam: Adam::from_parts(
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            c.require("resume.step")?,
            first,
            second,
        )?,
        best,
        current,
    })
}

/// Prints the curve to any writer, one epoch per line.
pub fn print_curve(out: &mut impl Write, curve: &[EpochRecord]) -> std::io::Result<()> {
    for r in curve {
        writeln!(
            out,
            "{:>4}  train {:.6e}  val {:.6e}  lr {:.3e}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        )?;
    }
    Ok(())
}
