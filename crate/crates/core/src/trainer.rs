//! The optimization loop.
//!
//! Each optimizer step consumes `grad_accum_steps` consecutive batches of
//! the current epoch (fewer at the epoch's end). Per-example losses are
//! summed across the micro-batches and divided by the number of
//! non-skipped examples, so accumulation reproduces a single larger batch.
//!
//! All randomness is keyed by `(seed, stream, step, example offset)`; a
//! step's draws depend on nothing but its index, which is what makes resume
//! from a checkpoint bit-identical.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::corpus::{self, Batch, TokenSequence, Vocabulary};
use crate::diffusion::{self, MaskingMode, TimestepDraw, DEFAULT_T_MIN};
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig};
use crate::objectives::{self, ExampleRngs, LossContext, ObjectiveSpec, Regime};
use crate::optim::{self, AdamConfig, AdamState};
use crate::rng::{self, Stream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub objective: ObjectiveSpec,
    pub checkpoint_every: u64,
    pub t_min: f64,
    pub masking: MaskingMode,
    /// Drop training examples longer than this many tokens.
    pub max_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            grad_accum_steps: 1,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            objective: ObjectiveSpec::default(),
            checkpoint_every: 1000,
            t_min: DEFAULT_T_MIN,
            masking: MaskingMode::Bernoulli,
            max_len: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.max_grad_norm > 0.0) {
            return fail(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return fail("grad_accum_steps, batch_size, epochs and checkpoint_every must be positive".into());
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return fail(format!("t_min must lie in (0, 1), got {}", self.t_min));
        }
        self.objective.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Per-example part of a step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub t: f64,
    pub rho: f64,
    pub regime: Option<Regime>,
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Mean loss over non-skipped examples (0 when the whole step skipped).
    pub loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub skipped: bool,
    pub active: usize,
    pub examples: Vec<ExampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub skipped_steps: u64,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub train_config: TrainConfig,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub corpus_hash: String,
    pub config_fingerprint: String,
    pub code_version: String,
    pub total_steps: u64,
    pub steps: Vec<StepRecord>,
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
    epochs: csv::Writer<File>,
}

pub struct Trainer {
    config: TrainConfig,
    model: Denoiser,
    opt: AdamState,
    step: u64,
    data: Vec<TokenSequence>,
    mask_id: usize,
    pad_id: usize,
    vocab_hash: String,
    corpus_hash: String,
    records: Vec<StepRecord>,
    epoch_cache: Option<(u64, Vec<Batch>)>,
    outputs: Option<Outputs>,
    extra_config: serde_json::Value,
}

fn sequence_hash(data: &[TokenSequence]) -> String {
    let mut h = Sha256::new();
    for s in data {
        h.update((s.prompt_len as u64).to_le_bytes());
        h.update((s.response_len as u64).to_le_bytes());
        for &id in &s.ids {
            h.update((id as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Denoiser, data: Vec<TokenSequence>, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Mismatch(format!(
                "model vocabulary size {} does not match vocabulary of {} tokens",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        let data = corpus::filter_max_len(data, config.max_len);
        if data.is_empty() {
            return Err(Error::Ingestion("training corpus is empty".into()));
        }
        if let Some(s) = data.iter().find(|s| s.content_len() > model.config().max_seq_len) {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                s.content_len(),
                model.config().max_seq_len
            )));
        }
        let opt = AdamState::new(model.params());
        Ok(Trainer {
            corpus_hash: sequence_hash(&data),
            vocab_hash: vocab.hash(),
            config,
            model,
            opt,
            step: 0,
            data,
            mask_id: vocab.mask_id(),
            pad_id: vocab.pad_id(),
            records: Vec::new(),
            epoch_cache: None,
            outputs: None,
            extra_config: serde_json::Value::Null,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, data: Vec<TokenSequence>, vocab: &Vocabulary) -> Result<Self> {
        let state = checkpoint
            .train
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let opt = checkpoint
            .optimizer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        let model = checkpoint.into_model()?;
        let mut t = Trainer::new(state.config, model, data, vocab)?;
        if t.vocab_hash != state.vocab_hash {
            return Err(Error::Mismatch("vocabulary differs from the one the checkpoint was trained with".into()));
        }
        if t.corpus_hash != state.corpus_hash {
            return Err(Error::Mismatch("corpus differs from the one the checkpoint was trained with".into()));
        }
        if opt.m.len() != t.model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        t.opt = opt;
        t.step = state.step;
        Ok(t)
    }

    /// Writes `train_log.jsonl`, `epochs.csv` and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = BufWriter::new(
            fs::OpenOptions::new()
                .create(true)
                .append(self.step > 0)
                .write(true)
                .truncate(self.step == 0)
                .open(dir.join("train_log.jsonl"))?,
        );
        let epochs_path = dir.join("epochs.csv");
        let fresh = self.step == 0 || !epochs_path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&epochs_path)?;
        let epochs = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        self.outputs = Some(Outputs {
            dir: dir.to_path_buf(),
            log,
            epochs,
        });
        Ok(self)
    }

    /// Extra configuration (e.g. the full run-config file) echoed into the manifest.
    pub fn with_config_echo(mut self, value: serde_json::Value) -> Self {
        self.extra_config = value;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    /// Optimizer steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn batches_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches_per_epoch().div_ceil(self.config.grad_accum_steps as u64)
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: *self.model.config(),
            params: self.model.params().clone(),
            optimizer: Some(self.opt.clone()),
            train: Some(TrainState {
                step: self.step,
                config: self.config.clone(),
                vocab_hash: self.vocab_hash.clone(),
                corpus_hash: self.corpus_hash.clone(),
            }),
        }
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            config: self.extra_config.clone(),
            train_config: self.config.clone(),
            model: *self.model.config(),
            vocab_hash: self.vocab_hash.clone(),
            corpus_hash: self.corpus_hash.clone(),
            config_fingerprint: self.config.fingerprint(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            total_steps: self.total_steps(),
            steps: self.records.clone(),
        }
    }

    fn step_batches(&mut self, step: u64) -> Result<Vec<Batch>> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let b = corpus::make_batches(&self.data, self.config.batch_size, self.config.seed, epoch, self.pad_id)?;
            self.epoch_cache = Some((epoch, b));
        }
        let batches = &self.epoch_cache.as_ref().expect("cached").1;
        let a = self.config.grad_accum_steps;
        let first = (step % spe) as usize * a;
        Ok(batches[first..(first + a).min(batches.len())].to_vec())
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let step = self.step;
        let seed = self.config.seed;
        let total = self.total_steps();
        let lr = optim::linear_lr(self.config.learning_rate, step, total);
        let ctx = LossContext {
            spec: self.config.objective,
            mask_id: self.mask_id,
            masking: self.config.masking,
        };
        let batches = self.step_batches(step)?;

        let mut grads: Option<Vec<Tensor>> = None;
        let mut examples = Vec::new();
        let mut active = 0usize;
        let mut loss_sum = 0.0;
        let mut offset = 0u64;
        for batch in &batches {
            let n = batch.len();
            let paths: Vec<[u64; 2]> = (0..n as u64).map(|i| [step, offset + i]).collect();
            offset += n as u64;
            let draws = paths
                .iter()
                .map(|p| {
                    diffusion::sample_timestep(
                        self.config.objective.rho,
                        self.config.t_min,
                        &mut rng::stream(seed, Stream::Timestep, p),
                        &mut rng::stream(seed, Stream::Rho, p),
                    )
                })
                .collect::<Result<Vec<TimestepDraw>>>()?;
            let mut rngs: Vec<ExampleRngs> = paths.iter().map(|p| ExampleRngs::new(seed, p)).collect();
            let mut dropout: Vec<StreamRng> = paths.iter().map(|p| rng::stream(seed, Stream::Dropout, p)).collect();

            let mut g = crate::autodiff::Graph::new(self.model.params());
            let out = objectives::batch_loss(
                &mut g,
                &self.model,
                &batch.sequences,
                &draws,
                &ctx,
                &mut rngs,
                Some(&mut dropout),
                None,
            )?;
            for e in &out.examples {
                examples.push(ExampleRecord {
                    t: e.draw.t,
                    rho: e.draw.rho,
                    regime: e.regime,
                    loss: e.value,
                    skipped: e.skipped,
                });
            }
            active += out.active();
            loss_sum += out.total();
            if let Some(sum) = out.sum {
                let gr = g.backward(sum)?.into_params();
                match grads.as_mut() {
                    None => grads = Some(gr),
                    Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| a.add_assign(b)),
                }
            }
        }

        let epoch = step / self.steps_per_epoch();
        let mut record = StepRecord {
            step,
            epoch,
            lr,
            loss: 0.0,
            grad_norm: 0.0,
            skipped: true,
            active,
            examples,
        };
        if let (Some(mut grads), true) = (grads, active > 0) {
            let scale = 1.0 / active as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            let loss = loss_sum / active as f64;
            let finite = loss.is_finite() && grads.iter().all(Tensor::all_finite);
            record.loss = loss;
            record.grad_norm = optim::global_norm(&grads);
            record.skipped = false;
            if !finite {
                self.log(&record)?;
                return Err(Error::NonFinite(format!(
                    "step {step}: loss {loss}, grad norm {}",
                    record.grad_norm
                )));
            }
            optim::adam_step(self.model.params_mut(), &mut grads, &mut self.opt, &self.config.adam(), lr)?;
        }
        self.step += 1;
        self.log(&record)?;
        self.records.push(record.clone());
        if self.step.is_multiple_of(self.steps_per_epoch()) {
            self.write_epoch(epoch)?;
        }
        if self.outputs.is_some() && (self.step.is_multiple_of(self.config.checkpoint_every) || self.is_done()) {
            self.save_checkpoint()?;
        }
        Ok(record)
    }

    /// Runs up to `n` more steps (stopping at the end of training).
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.train_step()?;
        }
        Ok(())
    }

    /// Trains to the end of the epoch budget.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.train_step()?;
        }
        Ok(())
    }

    fn log(&mut self, record: &StepRecord) -> Result<()> {
        if let Some(o) = self.outputs.as_mut() {
            serde_json::to_writer(&mut o.log, record)?;
            o.log.write_all(b"\n")?;
        }
        Ok(())
    }

    fn write_epoch(&mut self, epoch: u64) -> Result<()> {
        let Some(o) = self.outputs.as_mut() else { return Ok(()) };
        let recs: Vec<&StepRecord> = self.records.iter().filter(|r| r.epoch == epoch).collect();
        let done: Vec<&&StepRecord> = recs.iter().filter(|r| !r.skipped).collect();
        let n = done.len().max(1) as f64;
        o.epochs.serialize(EpochSummary {
            epoch,
            steps: recs.len() as u64,
            skipped_steps: (recs.len() - done.len()) as u64,
            mean_loss: done.iter().map(|r| r.loss).sum::<f64>() / n,
            mean_grad_norm: done.iter().map(|r| r.grad_norm).sum::<f64>() / n,
        })?;
        o.epochs.flush()?;
        o.log.flush()?;
        Ok(())
    }

    /// Writes `checkpoint_<step>.ckpt` and refreshes `last.ckpt` and the manifest.
    pub fn save_checkpoint(&mut self) -> Result<()> {
        let Some(dir) = self.outputs.as_ref().map(|o| o.dir.clone()) else {
            return Ok(());
        };
        let ck = self.checkpoint();
        ck.save(&dir.join(format!("checkpoint_{}.ckpt", self.step)))?;
        ck.save(&dir.join("last.ckpt"))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), manifest)?;
        if let Some(o) = self.outputs.as_mut() {
            o.log.flush()?;
        }
        Ok(())
    }
}
