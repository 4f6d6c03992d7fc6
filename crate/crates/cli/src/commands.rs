//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sgdiff::metrics::{evaluate, run_inference, GroundTruth, Selection};
use sgdiff::model::Example;
use sgdiff::synthdata::{generate_dataset, read_dataset, split, write_dataset, SceneParams, Split};
use sgdiff::trainer::Trainer;

use crate::config::RunConfig;
use crate::service::{self, Service};

#[derive(Debug, Parser)]
#[command(name = "sgdiff", version, about = "Joint caption and mask generation from a box prompt")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test splits of the synthetic shape world.
    GenData(GenData),
    /// Train a model (caption stage, then joint stage).
    Train(Train),
    /// Evaluate a checkpoint on a split and write per-sample records.
    Eval(Eval),
    /// Print candidates for one dataset sample.
    Sample(SampleCmd),
    /// Run the HTTP inference service.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML file overriding model, training and data settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.ckpt, run.jsonl and config.toml.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint (its configuration wins).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or a gen-data directory (its test split is used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub k: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-sample record file (one JSON report per selection rule).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file, or a gen-data directory (its test split is used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub k: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn split_file(data: &Path, name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{name}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

/// Loads a dataset file as model inputs.
pub fn load_examples(path: &Path, iou_threshold: f64) -> Result<Vec<Example>> {
    let samples = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    samples.iter().map(|s| Example::from_sample(s, iou_threshold).map_err(Into::into)).collect()
}

pub fn gen_data(a: &GenData) -> Result<()> {
    let c = a.common.load()?;
    if c.data.val + c.data.test >= c.data.scenes {
        bail!("{} scenes cannot hold {} validation and {} test scenes", c.data.scenes, c.data.val, c.data.test);
    }
    let params = SceneParams { canvas: c.model.canvas, ..SceneParams::default() };
    let all = generate_dataset(&params, c.train.seed, c.data.scenes)?;
    let (train, val, test) = split(&all, Split { val: c.data.val, test: c.data.test });
    std::fs::create_dir_all(&a.out)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        write_dataset(&a.out.join(format!("{name}.jsonl")), part)?;
    }
    println!("wrote {} / {} / {} samples to {}", train.len(), val.len(), test.len(), a.out.display());
    Ok(())
}

pub fn train(a: &Train) -> Result<()> {
    let mut trainer = match &a.checkpoint {
        Some(p) => Trainer::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let c = a.common.load()?;
            Trainer::new(c.model, c.train)?
        }
    };
    let thr = trainer.model.config.iou_threshold;
    let train = load_examples(&split_file(&a.data, "train"), thr)?;
    let val = if a.data.is_dir() { load_examples(&a.data.join("val.jsonl"), thr)? } else { Vec::new() };
    std::fs::create_dir_all(&a.out)?;
    let cfg = RunConfig { model: trainer.model.config.clone(), train: trainer.config.clone(), ..RunConfig::desk() };
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let log_path = a.out.join("run.jsonl");
    let mut log = BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(a.checkpoint.is_some()).write(true).truncate(a.checkpoint.is_none()).open(&log_path)?,
    );
    let ckpt = a.out.join("model.ckpt");
    let records = trainer.run(&train, &val, &mut log, |t, r| {
        eprintln!(
            "epoch {:>3} {:<8} loss {:.4} caption {:.4} mask {:.4} val {}",
            r.epoch,
            format!("{:?}", r.stage).to_lowercase(),
            r.train.total,
            r.train.caption,
            r.train.mask,
            r.val_caption.map_or("-".into(), |v| format!("{v:.4}"))
        );
        t.save(&ckpt)
    })?;
    log.flush()?;
    println!("trained {} epochs; checkpoint {}", records.len(), ckpt.display());
    Ok(())
}

pub fn eval(a: &Eval) -> Result<()> {
    let svc = Service::load(&a.checkpoint)?;
    let examples = load_examples(&split_file(&a.data, "test"), svc.model.config.iou_threshold)?;
    let cands = run_inference(&svc.model, &svc.params, &examples, a.k as usize, a.seed)?;
    let gts: Vec<GroundTruth> = examples.iter().map(GroundTruth::from_example).collect();
    let mut out = a.out.as_ref().map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    for sel in [Selection::BestOf, Selection::First] {
        let report = evaluate(&cands, &gts, sel);
        println!("{}\n", report.summary());
        if let Some(w) = out.as_mut() {
            serde_json::to_writer(&mut *w, &report)?;
            w.write_all(b"\n")?;
        }
    }
    if let Some(mut w) = out {
        w.flush()?;
    }
    Ok(())
}

pub fn sample(a: &SampleCmd) -> Result<()> {
    let svc = Service::load(&a.checkpoint)?;
    let examples = load_examples(&split_file(&a.data, "test"), svc.model.config.iou_threshold)?;
    let Some(e) = examples.get(a.index) else {
        bail!("index {} out of range ({} samples)", a.index, examples.len());
    };
    let cands = svc.model.infer(&svc.params, &e.graph, &e.rgb, a.k as usize, a.seed)?;
    let out: Vec<_> = cands.iter().map(service::candidate_out).collect();
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn serve(a: &Serve) -> Result<()> {
    let svc = Service::load(&a.checkpoint)?;
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port).parse().context("listen address")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(svc, addr))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Serve(a) => serve(a),
    }
}
