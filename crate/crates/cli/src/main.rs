use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcn::harness::{self, Checkpoint, ConfigOverrides, RunConfig, Trainer};
use mcn::metrics::MetricsReport;
use mcn::model::Structure;
use mcn::postprocess::RefinementMode;
use mcn::synth::{emit_dataset, Dataset, Sample, SynthConfig};

#[derive(Parser)]
#[command(name = "mcn", version, about = "Joint referring expression comprehension and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and loss log after every epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint and loss log.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Report file; `.json` or `.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict box and mask for one sample file.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        /// Prediction JSON file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    structure: Option<Structure>,
    #[arg(long)]
    use_cem: Option<bool>,
    #[arg(long)]
    postproc: Option<RefinementMode>,
    #[arg(long)]
    alpha_up: Option<f64>,
    #[arg(long)]
    alpha_dec: Option<f64>,
    #[arg(long)]
    bin_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    /// Defaults, then the config file, then command-line flags.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            ConfigOverrides::load(path)?.apply(&mut cfg);
        }
        ConfigOverrides {
            structure: self.structure,
            use_cem: self.use_cem,
            postproc: self.postproc,
            alpha_up: self.alpha_up,
            alpha_dec: self.alpha_dec,
            bin_threshold: self.bin_threshold,
            seed: self.seed,
            ..Default::default()
        }
        .apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_dataset(dir: Option<&Path>) -> Result<Dataset> {
    let Some(dir) = dir else {
        bail!("no dataset directory; pass --data or set data_dir in the config file");
    };
    if !dir.join("manifest.json").exists() {
        bail!("configuration error: no dataset manifest in {}", dir.display());
    }
    Ok(Dataset::load(dir)?)
}

fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
            MetricsReport::write_csv(std::slice::from_ref(report), f)?;
        }
        Some("json") => fs::write(out, report.to_json())?,
        _ => bail!("report path must end in .json or .csv"),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { n_train, n_val, seed, out } => {
            let m = emit_dataset(n_train, n_val, seed, &SynthConfig::default(), &out)?;
            println!("wrote {} train / {} val samples to {} (hash {})", m.n_train, m.n_val, out.display(), m.config_hash);
        }
        Command::Train {
            run,
            data,
            out,
            epochs,
            resume,
        } => {
            let (base, resumed) = match &resume {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    (ck.config.clone(), Some(ck))
                }
                None => (RunConfig::default(), None),
            };
            let mut cfg = run.resolve(base)?;
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            if data.is_some() {
                cfg.data_dir = data;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let ds = load_dataset(cfg.data_dir.as_deref())?;
            let trainer = match resumed {
                Some(mut ck) => {
                    if ck.config.training_hash() != cfg.training_hash() && ck.config.optim.epochs == cfg.optim.epochs {
                        log::warn!("flags change the training configuration of the resumed checkpoint");
                    }
                    ck.config = cfg;
                    Trainer::resume(ck, &ds)?
                }
                None => Trainer::new(cfg, &ds)?,
            };
            let ck = trainer.run()?;
            if let Some(last) = ck.history.last() {
                println!("trained {} epochs; final loss {:.6}", ck.epoch, last.total);
            }
        }
        Command::Eval {
            run,
            checkpoint,
            data,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = run.resolve(ck.config.clone())?;
            let ds = load_dataset(data.as_deref().or(cfg.data_dir.as_deref()))?;
            let report = harness::evaluate(&ck, &ds, &split, &cfg.postproc)?;
            println!("{}", report.summary());
            if let Some(out) = out {
                write_report(&report, &out)?;
            }
        }
        Command::Predict {
            run,
            checkpoint,
            sample,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = run.resolve(ck.config.clone())?;
            let s = Sample::load(&sample)?;
            let pred = harness::predict(&ck.model(), &s, &cfg.postproc)?;
            let json = serde_json::to_string_pretty(&pred)?;
            match out {
                Some(path) => fs::write(&path, json)?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}
