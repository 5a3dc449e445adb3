//! Trained models with their configuration, stored as checkpoints.
//!
//! The checkpoint config blob carries `model = emev | baseline | classifier`,
//! every architecture key, and free-form metadata such as the training
//! dataset name.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::classify::{Classifier, ClassifierConfig};
use crate::config::Config;
use crate::emevnet::{BaselineNet, EmevConfig, EmevNet};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelType {
    Emev,
    Baseline,
    Classifier,
}

impl ModelType {
    pub fn parse(s: &str) -> Result<ModelType> {
        match s {
            "emev" => Ok(ModelType::Emev),
            "baseline" => Ok(ModelType::Baseline),
            "classifier" => Ok(ModelType::Classifier),
            other => Err(Error::Usage(format!("unknown model type '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelType::Emev => "emev",
            ModelType::Baseline => "baseline",
            ModelType::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Emev(EmevNet),
    Baseline(BaselineNet),
    Classifier(Classifier),
}

impl Model {
    pub fn model_type(&self) -> ModelType {
        match self {
            Model::Emev(_) => ModelType::Emev,
            Model::Baseline(_) => ModelType::Baseline,
            Model::Classifier(_) => ModelType::Classifier,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Emev(m) => &m.store,
            Model::Baseline(m) => &m.store,
            Model::Classifier(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Emev(m) => &mut m.store,
            Model::Baseline(m) => &mut m.store,
            Model::Classifier(m) => &mut m.store,
        }
    }

    /// Builds a freshly initialized model of `kind` from config keys.
    pub fn from_config(kind: ModelType, cfg: &Config, seed: u64) -> Result<Model> {
        Ok(match kind {
            ModelType::Emev => Model::Emev(EmevNet::new(EmevConfig::from_config(cfg)?, seed)?),
            ModelType::Baseline => {
                Model::Baseline(BaselineNet::new(EmevConfig::from_config(cfg)?, seed)?)
            }
            ModelType::Classifier => {
                Model::Classifier(Classifier::new(ClassifierConfig::from_config(cfg)?, seed)?)
            }
        })
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("model", self.model_type().name());
        match self {
            Model::Emev(m) => m.config.write_into(cfg),
            Model::Baseline(m) => m.config.write_into(cfg),
            Model::Classifier(m) => m.config.write_into(cfg),
        }
    }
}

/// A model plus the metadata it was trained with.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: Model,
    /// Metadata keys (`profile`, seeds, ...); architecture keys are
    /// regenerated from the model on save.
    pub meta: Config,
}

impl ModelBundle {
    pub fn new(model: Model, meta: Config) -> Self {
        Self { model, meta }
    }

    /// Name of the dataset the model was trained on, if recorded.
    pub fn profile(&self) -> Option<&str> {
        self.meta.get_str("profile")
    }

    pub fn config(&self) -> Config {
        let mut cfg = self.meta.clone();
        self.model.write_config(&mut cfg);
        cfg
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.config(), self.model.store())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ModelBundle> {
        let kind = ModelType::parse(
            ck.config
                .get_str("model")
                .ok_or_else(|| Error::Config("checkpoint does not name its model type".into()))?,
        )?;
        let mut model = Model::from_config(kind, &ck.config, 0)?;
        ck.load_into(model.store_mut())?;
        Ok(ModelBundle {
            model,
            meta: ck.config.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
