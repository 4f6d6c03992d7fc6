//! Two-stage training loop, checkpoints and run logs.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Example, LossParts, MaskSource, Model, ModelConfig, Noise, PassOptions};
use crate::nn::{Ctx, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Matrix, Real, Tape, Var};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Caption,
    Joint,
}

/// Which objectives a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Caption stage, then joint stage.
    Joint,
    CaptionOnly,
    MaskOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch: usize,
    /// Epoch budget of the caption stage.
    pub caption_epochs: usize,
    /// Epochs of the joint stage.
    pub joint_epochs: usize,
    /// Caption-stage exit after this many epochs without a new best
    /// validation caption loss.
    pub patience: usize,
    /// Joint-stage epochs that feed ground-truth masks to the alignment loss.
    pub mecl_warmup: usize,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lr: 1e-4,
            weight_decay: 0.05,
            clip_norm: 1.0,
            batch: 16,
            caption_epochs: 40,
            joint_epochs: 20,
            patience: 5,
            mecl_warmup: 10,
            objective: Objective::Joint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule.
    pub fn desk() -> Self {
        Self { lr: 1e-3, caption_epochs: 30, joint_epochs: 15, mecl_warmup: 5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..AdamWConfig::default() }
    }

    /// Total epoch budget of single-objective runs, so ablations see the
    /// same number of epochs as the two-stage schedule.
    fn single_budget(&self) -> usize {
        self.caption_epochs + self.joint_epochs
    }
}

/// `L_Caption + L_Mask + l1 L_SG + l2 L_MEC`; the mask and alignment terms
/// are dropped in the caption stage. Non-finite components are errors.
pub fn total_loss<'t, F: Real>(
    parts: &LossParts<'t, F>,
    lambda1: f64,
    lambda2: f64,
    stage: Stage,
) -> Result<Var<'t, F>> {
    let check = |name: &str, v: Var<'t, F>| {
        let x = v.item().f64();
        if x.is_finite() {
            Ok(v)
        } else {
            Err(Error::Training(format!("{name} loss is {x}")))
        }
    };
    let mut total = check("sg-adaptor", parts.sg())?.scale(F::c(lambda1));
    if let Some(c) = parts.caption {
        total = total.add(check("caption", c)?);
    }
    match stage {
        Stage::Caption => {
            if parts.mask.is_some() || parts.mec().is_some() {
                log::info!("caption stage: mask and alignment terms ignored");
            }
        }
        Stage::Joint => {
            if let Some(m) = parts.mask {
                total = total.add(check("mask", m)?);
            }
            if let Some(m) = parts.mec() {
                total = total.add(check("alignment", m)?.scale(F::c(lambda2)));
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    pub caption: f64,
    pub bit: f64,
    pub ce: f64,
    pub mask: f64,
    pub adaptor: f64,
    pub ranking: f64,
    pub intra: f64,
    pub inter: f64,
}

impl LossRecord {
    fn add<F: Real>(&mut self, total: f64, p: &LossParts<'_, F>) {
        let v = |x: Option<Var<'_, F>>| x.map_or(0.0, |v| v.item().f64());
        self.total += total;
        self.caption += v(p.caption);
        self.bit += v(p.bit);
        self.ce += v(p.ce);
        self.mask += v(p.mask);
        self.adaptor += p.adaptor.item().f64();
        self.ranking += p.ranking.item().f64();
        self.intra += v(p.intra);
        self.inter += v(p.inter);
    }

    fn scale(&mut self, s: f64) {
        for x in [
            &mut self.total,
            &mut self.caption,
            &mut self.bit,
            &mut self.ce,
            &mut self.mask,
            &mut self.adaptor,
            &mut self.ranking,
            &mut self.intra,
            &mut self.inter,
        ] {
            *x *= s;
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub mecl_source: Option<MaskSource>,
    pub steps: usize,
    pub train: LossRecord,
    pub val_caption: Option<f64>,
    pub grad_norm: f64,
}

/// Mutable training state; everything needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub stage: Stage,
    pub joint_epoch: usize,
    pub best_val: Option<f64>,
    pub stale: usize,
    pub done: bool,
}

pub struct Trainer<F: Real> {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamSet<F>,
    pub opt: AdamW<F>,
    pub progress: Progress,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<F: Real> Trainer<F> {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let model = Model::new(model_config, &mut params, config.seed);
        let opt = AdamW::new(config.optimizer(), &params);
        let stage = if config.objective == Objective::MaskOnly { Stage::Joint } else { Stage::Caption };
        let progress = Progress { epoch: 0, stage, joint_epoch: 0, best_val: None, stale: 0, done: false };
        Ok(Self { config, model, params, opt, progress })
    }

    fn pass_options(&self) -> (PassOptions, Option<MaskSource>) {
        let c = &self.config;
        match (self.progress.stage, c.objective) {
            (Stage::Caption, _) => (PassOptions { caption: true, masks: false, mecl: None }, None),
            (Stage::Joint, Objective::MaskOnly) => (PassOptions { caption: false, masks: true, mecl: None }, None),
            (Stage::Joint, _) => {
                let src = if self.progress.joint_epoch < c.mecl_warmup { MaskSource::Gt } else { MaskSource::Predicted };
                let mecl = (c.lambda2 > 0.0).then_some(src);
                (PassOptions { caption: true, masks: true, mecl }, mecl)
            }
        }
    }

    /// Mean validation caption loss under fixed noise.
    pub fn validation_loss(&self, val: &[Example]) -> Result<f64> {
        let mut rng = epoch_rng(self.config.seed, u64::MAX);
        let opts = PassOptions { caption: true, masks: false, mecl: None };
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in val.chunks(self.config.batch) {
            let batch: Vec<&Example> = chunk.iter().collect();
            let noise = Noise::<F>::sample(&mut rng, batch.len());
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.params, false);
            let parts = self.model.losses(&ctx, &batch, &noise, opts)?;
            sum += parts.caption.expect("caption requested").item().f64() * batch.len() as f64;
            n += batch.len();
        }
        Ok(sum / n.max(1) as f64)
    }

    /// Runs one epoch and advances the schedule. Returns `None` once
    /// training has finished.
    pub fn step_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<Option<EpochRecord>> {
        if self.progress.done {
            return Ok(None);
        }
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let (opts, mecl_source) = self.pass_options();
        let stage = self.progress.stage;
        let mut rng = epoch_rng(self.config.seed, self.progress.epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut rec = LossRecord::default();
        let (mut steps, mut norm_sum) = (0usize, 0.0);
        for chunk in order.chunks(self.config.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let noise = Noise::<F>::sample(&mut rng, batch.len());
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.params, true);
            let parts = self.model.losses(&ctx, &batch, &noise, opts)?;
            let total = total_loss(&parts, self.config.lambda1, self.config.lambda2, stage)?;
            let value = total.item().f64();
            if value > DIVERGENCE {
                return Err(Error::Training(format!(
                    "loss {value:.3e} exceeds {DIVERGENCE:.0e} at epoch {} step {steps}",
                    self.progress.epoch
                )));
            }
            rec.add(value, &parts);
            let grads = ctx.param_grads(&tape.backward(total));
            drop(ctx);
            let norm = self.opt.update(&mut self.params, &grads, self.config.lr);
            if !norm.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at epoch {}", self.progress.epoch)));
            }
            norm_sum += norm;
            steps += 1;
        }
        rec.scale(1.0 / steps as f64);
        let val_caption = if val.is_empty() || self.config.objective == Objective::MaskOnly {
            None
        } else {
            Some(self.validation_loss(val)?)
        };
        let record = EpochRecord {
            epoch: self.progress.epoch,
            stage,
            mecl_source,
            steps,
            train: rec,
            val_caption,
            grad_norm: norm_sum / steps as f64,
        };
        self.advance(val_caption);
        Ok(Some(record))
    }

    fn advance(&mut self, val: Option<f64>) {
        let c = &self.config;
        let p = &mut self.progress;
        p.epoch += 1;
        match p.stage {
            Stage::Caption => {
                let plateau = match (val, p.best_val) {
                    (Some(v), Some(b)) if v >= b => {
                        p.stale += 1;
                        p.stale >= c.patience
                    }
                    (Some(v), _) => {
                        p.best_val = Some(v);
                        p.stale = 0;
                        false
                    }
                    (None, _) => false,
                };
                let budget = if c.objective == Objective::CaptionOnly { c.single_budget() } else { c.caption_epochs };
                if plateau || p.epoch >= budget {
                    if c.objective == Objective::CaptionOnly || c.joint_epochs == 0 {
                        p.done = true;
                    } else {
                        log::info!("caption stage ends after epoch {} (plateau: {plateau})", p.epoch);
                        p.stage = Stage::Joint;
                    }
                }
            }
            Stage::Joint => {
                p.joint_epoch += 1;
                let budget = if c.objective == Objective::MaskOnly { c.single_budget() } else { c.joint_epochs };
                if p.joint_epoch >= budget {
                    p.done = true;
                }
            }
        }
    }

    /// Trains to completion, appending one JSON line per epoch to `log` and
    /// calling `after_epoch` (e.g. for checkpointing) after each.
    pub fn run(
        &mut self,
        train: &[Example],
        val: &[Example],
        log: &mut dyn Write,
        mut after_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        while let Some(rec) = self.step_epoch(train, val)? {
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
            log::info!(
                "epoch {} {:?} loss {:.4} val {:?}",
                rec.epoch,
                rec.stage,
                rec.train.total,
                rec.val_caption
            );
            after_epoch(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }
}

const MAGIC: &[u8; 8] = b"SGDCKPT\x01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    model: ModelConfig,
    train: TrainConfig,
    progress: Progress,
    opt_step: u64,
    tensors: Vec<(String, usize, usize)>,
}

/// Hex sha256 of the model and training configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(model, train)).expect("configs serialize"));
    hex::encode(h.finalize())
}

fn write_blob<F: Real>(w: &mut impl Write, m: &Matrix<F>) -> Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 8);
    for v in m.data() {
        buf.extend_from_slice(&v.f64().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_blob<F: Real>(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix<F>> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    let data = buf.chunks_exact(8).map(|c| F::c(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

impl<F: Real> Trainer<F> {
    /// Container: magic, little-endian u64 header length, JSON header, then
    /// every parameter followed by both optimizer moments as f64 blobs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config_hash: config_hash(&self.model.config, &self.config),
            model: self.model.config.clone(),
            train: self.config.clone(),
            progress: self.progress.clone(),
            opt_step: self.opt.step,
            tensors: self.params.entries().iter().map(|p| (p.name.clone(), p.value.rows(), p.value.cols())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (i, p) in self.params.entries().iter().enumerate() {
                write_blob(&mut w, &p.value)?;
                write_blob(&mut w, &self.opt.m[i])?;
                write_blob(&mut w, &self.opt.v[i])?;
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Checkpoint("missing header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if h.config_hash != config_hash(&h.model, &h.train) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let mut t = Trainer::<F>::new(h.model, h.train)?;
        if t.params.len() != h.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                h.tensors.len(),
                t.params.len()
            )));
        }
        for (i, (name, rows, cols)) in h.tensors.iter().enumerate() {
            let p = &t.params.entries()[i];
            if &p.name != name || p.value.shape() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!("tensor {i} is {name} {rows}x{cols}, expected {}", p.name)));
            }
            t.params.entries_mut()[i].value = read_blob(&mut r, *rows, *cols)?;
            t.opt.m[i] = read_blob(&mut r, *rows, *cols)?;
            t.opt.v[i] = read_blob(&mut r, *rows, *cols)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        t.opt.step = h.opt_step;
        t.progress = h.progress;
        Ok(t)
    }
}
