use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::{clip_global_norm, Adam};
use crate::error::{Error, Result};
use crate::heads::CenterBox;
use crate::model::{Model, Targets};
use crate::synth::{Dataset, Sample};
use crate::tensor::Graph;

pub const CHECKPOINT_FILE: &str = "checkpoint.mcnp";
pub const LOSS_LOG_FILE: &str = "losses.csv";

/// Mean losses over one epoch; absent terms are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub rec: Option<f64>,
    pub res: Option<f64>,
    pub cem: Option<f64>,
    pub seconds: f64,
}

/// Loss values and summed gradients for one sample.
pub struct SampleStep {
    pub total: f64,
    pub rec: Option<f64>,
    pub res: Option<f64>,
    pub cem: Option<f64>,
}

/// Runs forward, losses and backward for one sample, adding `scale` times the
/// gradient into the model's parameter grads.
pub fn accumulate_sample(model: &mut Model, sample: &Sample, scale: f64) -> Result<SampleStep> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let out = model.forward(&mut g, &bound, &sample.image, &sample.tokens)?;
    let mask = sample.mask_coarse.as_f64();
    let targets = Targets {
        gt_box: CenterBox::from_corners(sample.gt_box),
        gt_mask_coarse: &mask,
    };
    let terms = model.losses(&mut g, &bound, &out, &targets)?;
    g.backward(terms.total)?;
    model.params.accumulate_grads(&g, &bound, scale);
    let val = |v: Option<crate::tensor::Var>| v.map(|v| g.scalar(v));
    Ok(SampleStep {
        total: g.scalar(terms.total),
        rec: val(terms.rec),
        res: val(terms.res),
        cem: val(terms.cem),
    })
}

pub struct Trainer<'a> {
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub config: RunConfig,
    pub history: Vec<EpochLog>,
    data: &'a Dataset,
    last_good: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), config.seed)?;
        check_geometry(&model, data)?;
        let o = &config.optim;
        Ok(Self {
            model,
            adam: Adam::new(o.beta1, o.beta2, o.eps),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a),
            epoch: 0,
            config,
            history: Vec::new(),
            data,
            last_good: None,
        })
    }

    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let model = ckpt.model();
        check_geometry(&model, data)?;
        if ckpt.dataset_hash.as_deref() != Some(data.manifest.config_hash.as_str()) {
            log::warn!("resuming on a dataset that differs from the one the checkpoint was trained on");
        }
        Ok(Self {
            model,
            adam: ckpt.adam,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            config: ckpt.config,
            history: ckpt.history,
            data,
            last_good: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            config_hash: self.config.training_hash(),
            config: self.config.clone(),
            dataset_hash: Some(self.data.manifest.config_hash.clone()),
            rng: self.rng.clone(),
            history: self.history.clone(),
        }
    }

    fn fault(&self, step: usize, reason: String) -> Error {
        Error::TrainingFault {
            epoch: self.epoch + 1,
            step,
            reason,
            last_good: self.last_good.clone(),
        }
    }

    /// One pass over the shuffled training split.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let lr = self.config.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut rec, mut res, mut cem) = (0.0, 0.0, 0.0, 0.0);
        let (mut has_rec, mut has_res, mut has_cem) = (false, false, false);
        for (step, batch) in order.chunks(self.config.optim.batch_size).enumerate() {
            self.model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = match accumulate_sample(&mut self.model, &self.data.train[i], scale) {
                    Ok(s) => s,
                    Err(Error::TrainingFault { reason, .. }) => return Err(self.fault(step, reason)),
                    Err(e) => return Err(e),
                };
                total += s.total;
                if let Some(v) = s.rec {
                    rec += v;
                    has_rec = true;
                }
                if let Some(v) = s.res {
                    res += v;
                    has_res = true;
                }
                if let Some(v) = s.cem {
                    cem += v;
                    has_cem = true;
                }
            }
            let norm = clip_global_norm(&mut self.model.params, self.config.optim.clip_norm);
            if !norm.is_finite() {
                return Err(self.fault(step, format!("gradient norm is {norm}")));
            }
            self.adam.update(&mut self.model.params, lr);
        }
        self.model.params.zero_grads();
        self.epoch = epoch;
        let n = order.len().max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            total: total / n,
            rec: has_rec.then_some(rec / n),
            res: has_res.then_some(res / n),
            cem: has_cem.then_some(cem / n),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains to the configured epoch count, checkpointing after every epoch
    /// when an output directory is set.
    pub fn run(mut self) -> Result<Checkpoint> {
        let out_dir = self.config.out_dir.clone();
        if let Some(dir) = &out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.config.optim.epochs {
            let log = self.run_epoch()?;
            log::info!(
                "epoch {:>3}  lr {:.1e}  loss {:.4}  rec {}  res {}  cem {}  ({:.1}s)",
                log.epoch,
                log.lr,
                log.total,
                fmt_opt(log.rec),
                fmt_opt(log.res),
                fmt_opt(log.cem),
                log.seconds
            );
            if let Some(dir) = &out_dir {
                let path = dir.join(CHECKPOINT_FILE);
                self.checkpoint().save(&path)?;
                write_loss_log(&self.history, &dir.join(LOSS_LOG_FILE))?;
                self.last_good = Some(path);
            }
        }
        Ok(self.checkpoint())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn check_geometry(model: &Model, data: &Dataset) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let stride = data.manifest.config.mask_stride;
    if stride != model.res_stride() {
        return Err(Error::Config(format!(
            "dataset masks use stride {stride} but the segmentation grid has stride {}",
            model.res_stride()
        )));
    }
    Ok(())
}

pub fn write_loss_log(history: &[EpochLog], path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(["epoch", "lr", "total", "rec", "res", "cem", "seconds"]).map_err(io)?;
    for h in history {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            h.epoch.to_string(),
            h.lr.to_string(),
            h.total.to_string(),
            opt(h.rec),
            opt(h.res),
            opt(h.cem),
            format!("{:.3}", h.seconds),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains from scratch on `data`.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<Checkpoint> {
    Trainer::new(config.clone(), data)?.run()
}
