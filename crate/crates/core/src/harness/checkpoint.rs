use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::Adam;
use super::train::EpochLog;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

const PARAM_PREFIX: &str = "param/";
const ADAM_PREFIX: &str = "adam/";

/// Everything needed to evaluate a model or continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    config: RunConfig,
    config_hash: String,
    dataset_hash: Option<String>,
    rng: ChaCha8Rng,
    adam_step: u64,
    history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            cfg: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter() {
            store.insert(&format!("{PARAM_PREFIX}{name}"), t.clone());
        }
        for (name, t) in self.adam.moments(&self.params).iter() {
            store.insert(&format!("{ADAM_PREFIX}{name}"), t.clone());
        }
        let meta = Meta {
            epoch: self.epoch,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            rng: self.rng.clone(),
            adam_step: self.adam.step,
            history: self.history.clone(),
        };
        store.write_container(w, &serde_json::to_value(meta).expect("meta serializes"))
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self> {
        let (store, meta) = ParamStore::read_container(r)?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| Error::Format {
            what: "checkpoint metadata",
            reason: e.to_string(),
        })?;
        let (mut params, mut moments) = (ParamStore::new(), ParamStore::new());
        for (name, t) in store.iter() {
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix(ADAM_PREFIX) {
                moments.insert(n, t.clone());
            } else {
                return Err(Error::Format {
                    what: "checkpoint",
                    reason: format!("unexpected entry `{name}`"),
                });
            }
        }
        let o = &meta.config.optim;
        let mut adam = Adam::new(o.beta1, o.beta2, o.eps);
        adam.restore_moments(&moments)?;
        adam.step = meta.adam_step;
        Ok(Self {
            params,
            adam,
            epoch: meta.epoch,
            config: meta.config,
            config_hash: meta.config_hash,
            dataset_hash: meta.dataset_hash,
            rng: meta.rng,
            history: meta.history,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
