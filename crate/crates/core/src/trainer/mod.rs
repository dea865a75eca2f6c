//! The joint learn-and-adapt training loop.
//!
//! Every epoch reseeds seven independent generators from `(seed, epoch,
//! stream)`: source order, source augmentation, source dropout, target
//! order, target augmentation, target dropout. Parameter initialisation
//! uses its own stream at epoch 0. Because the source side never shares a
//! generator with the target side, switching the alignment terms off yields
//! exactly the trajectory of a loop that never sees target data, and a run
//! resumed from an epoch-boundary checkpoint matches an uninterrupted one.

mod checkpoint;
mod optim;

pub use checkpoint::{latest_checkpoint, load_model, Checkpoint};
pub use optim::{check_decay_set, sgd_step, OptimizerState};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{source_epoch, AugmentConfig, SourceSet, SourceTensors, TargetSet, TargetStream};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::loss::{on_tape, LossComponents, LossReport, LossWeights};
use crate::model::{ExtractorConfig, HeadConfig, MmfaModel, ModelConfig, PassOptions};
use crate::tape::{Mode, Tape};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub kernel: KernelSpec,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub lr: f64,
    /// Last epoch trained at the initial rate.
    pub lr_drop_epoch: usize,
    pub lr_drop_divisor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub extractor: ExtractorConfig,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 32,
            weights: LossWeights::default(),
            kernel: KernelSpec::default(),
            seed: 0,
            checkpoint_every: 5,
            lr: 0.01,
            lr_drop_epoch: 20,
            lr_drop_divisor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: AugmentConfig::default(),
            extractor: ExtractorConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2; batch norm needs two samples", self.batch_size));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be > 0", self.lr));
        }
        if !(self.lr_drop_divisor.is_finite() && self.lr_drop_divisor >= 1.0) {
            return bad(format!("lr drop divisor {} must be >= 1", self.lr_drop_divisor));
        }
        self.weights.validate()?;
        self.kernel.validate()?;
        self.augment.validate()?;
        self.extractor.validate()?;
        self.head.validate()?;
        let input = self.extractor.input;
        if (self.augment.out_height, self.augment.out_width) != (input.height, input.width) {
            return bad(format!(
                "augment output {}×{} differs from network input {}×{}",
                self.augment.out_height, self.augment.out_width, input.height, input.width
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, num_identities: usize, num_attributes: usize) -> ModelConfig {
        ModelConfig {
            extractor: self.extractor.clone(),
            head: self.head.clone(),
            num_identities,
            num_attributes,
            attr_dim: 1,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learning rate for a 1-based epoch: the base rate through
/// `lr_drop_epoch`, divided by `lr_drop_divisor` afterwards.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch <= config.lr_drop_epoch {
        config.lr
    } else {
        config.lr / config.lr_drop_divisor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Init = 0,
    SourceOrder = 1,
    SourceAugment = 2,
    SourceDropout = 3,
    TargetOrder = 4,
    TargetAugment = 5,
    TargetDropout = 6,
}

fn rng_for(seed: u64, epoch: usize, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(stream as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Inputs of one optimisation step. Without a target batch the step is
/// purely supervised and no target pass is run.
pub struct StepBatch<'a, T> {
    pub source: &'a SourceTensors<T>,
    pub target: Option<&'a Tensor<T>>,
}

/// Dropout generators for the two passes.
pub struct StepRngs<'a, R: ?Sized> {
    pub source: &'a mut R,
    pub target: &'a mut R,
}

#[derive(Serialize)]
struct NanDump {
    step: u64,
    l_id: f64,
    l_attr: f64,
    l_aal: f64,
    l_mdal: f64,
    l_all: f64,
    grad_norms: Vec<(String, f64)>,
}

/// Forward both domains, total loss, backward, one SGD update.
pub fn train_step<T: Real, R: Rng + ?Sized>(
    batch: StepBatch<'_, T>,
    model: &mut MmfaModel<T>,
    optimizer: &mut OptimizerState<T>,
    weights: &LossWeights,
    spec: &KernelSpec,
    rngs: StepRngs<'_, R>,
    step: u64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let mut sopts = PassOptions {
        mode: Mode::Train,
        rng: rngs.source,
        update_running: true,
    };
    let src = batch.source;
    let (s, t) = match batch.target {
        Some(tgt) => {
            let mut topts = PassOptions {
                mode: Mode::Train,
                rng: rngs.target,
                update_running: false,
            };
            let (s, t) = model.forward_all(&mut tape, src.images.clone(), tgt.clone(), &mut sopts, &mut topts)?;
            (s, Some(t))
        }
        None => (model.forward(&mut tape, src.images.clone(), &mut sopts)?, None),
    };
    let l_id = on_tape::identity_loss(&mut tape, s.id_logits, &src.labels)?;
    let l_attr = on_tape::attribute_loss(&mut tape, &s.attr_logits, &src.attrs)?;
    let (l_aal, l_mdal) = match &t {
        Some(t) => (
            on_tape::aal_loss(&mut tape, &s.attr_logits, &t.attr_logits, spec)?,
            on_tape::mdal_loss(&mut tape, s.pooled, t.pooled, spec)?,
        ),
        None => (tape.constant(Tensor::scalar(T::zero())), tape.constant(Tensor::scalar(T::zero()))),
    };
    let total = on_tape::total_loss(&mut tape, [l_id, l_attr, l_aal, l_mdal], weights)?;
    let components = LossComponents {
        l_id: tape.value(l_id).item(),
        l_attr: tape.value(l_attr).item(),
        l_aal: tape.value(l_aal).item(),
        l_mdal: tape.value(l_mdal).item(),
    };
    let l_all = tape.value(total).item();
    let report = LossReport::new(step, components, l_all);

    model.params_mut().zero_grad();
    tape.backward(total, model.params_mut())?;
    if !l_all.is_finite() {
        let dump = NanDump {
            step,
            l_id: report.l_id,
            l_attr: report.l_attr,
            l_aal: report.l_aal,
            l_mdal: report.l_mdal,
            l_all: report.l_all,
            grad_norms: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.grad.squared_norm().as_f64().sqrt()))
                .collect(),
        };
        return Err(Error::Numeric(format!(
            "non-finite loss; dump: {}",
            serde_json::to_string(&dump)?
        )));
    }
    sgd_step(model.params_mut(), optimizer)?;
    Ok(report)
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub l_id: f64,
    pub l_attr: f64,
    pub l_aal: f64,
    pub l_mdal: f64,
    pub l_all: f64,
}

impl EpochSummary {
    fn from_reports(epoch: usize, lr: f64, reports: &[LossReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        EpochSummary {
            epoch,
            lr,
            steps: reports.len(),
            l_id: mean(|r| r.l_id),
            l_attr: mean(|r| r.l_attr),
            l_aal: mean(|r| r.l_aal),
            l_mdal: mean(|r| r.l_mdal),
            l_all: mean(|r| r.l_all),
        }
    }
}

/// Model, optimizer, and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: MmfaModel<T>,
    pub optimizer: OptimizerState<T>,
    pub epochs_done: usize,
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, num_identities: usize, num_attributes: usize) -> Result<Self> {
        config.validate()?;
        let mut init = rng_for(config.seed, 0, Stream::Init);
        let model = MmfaModel::new(config.model_config(num_identities, num_attributes), &mut init)?;
        let optimizer = OptimizerState::new(model.params(), config.lr, config.momentum, config.weight_decay)?;
        Ok(Trainer {
            config,
            model,
            optimizer,
            epochs_done: 0,
            step: 0,
        })
    }

    fn check_source(&self, source: &SourceSet<T>) -> Result<()> {
        let cfg = self.model.config();
        if source.num_identities() > cfg.num_identities || source.schema().len() != cfg.num_attributes {
            return Err(Error::Config(format!(
                "source set has {} identities and {} attributes; model was built for {} and {}",
                source.num_identities(),
                source.schema().len(),
                cfg.num_identities,
                cfg.num_attributes
            )));
        }
        Ok(())
    }

    /// Runs the next epoch. With `target = None` the loop is purely
    /// supervised and never touches target data.
    pub fn run_epoch(&mut self, source: &SourceSet<T>, target: Option<&TargetSet<T>>) -> Result<(Vec<LossReport>, EpochSummary)> {
        self.check_source(source)?;
        let epoch = self.epochs_done + 1;
        let seed = self.config.seed;
        let lr = lr_at_epoch(epoch, &self.config);
        self.optimizer.lr = lr;
        let bs = self.config.batch_size;
        let aug = self.config.augment.clone();
        let weights = self.config.weights;
        let spec = self.config.kernel.clone();

        let mut s_order = rng_for(seed, epoch, Stream::SourceOrder);
        let mut s_aug = rng_for(seed, epoch, Stream::SourceAugment);
        let mut s_drop = rng_for(seed, epoch, Stream::SourceDropout);
        let mut t_order = rng_for(seed, epoch, Stream::TargetOrder);
        let mut t_aug = rng_for(seed, epoch, Stream::TargetAugment);
        let mut t_drop = rng_for(seed, epoch, Stream::TargetDropout);
        let mut stream = target.map(|t| TargetStream::new(t.len())).transpose()?;

        let batches = source_epoch(source.len(), bs, &mut s_order)?;
        let mut reports = Vec::with_capacity(batches.len());
        for b in &batches {
            let src = source.batch(b, Mode::Train, &mut s_aug, &aug)?;
            let tgt = match (target, stream.as_mut()) {
                (Some(t), Some(st)) => Some(t.batch(&st.next_batch(bs, &mut t_order), Mode::Train, &mut t_aug, &aug)?),
                _ => None,
            };
            self.step += 1;
            let report = train_step(
                StepBatch {
                    source: &src,
                    target: tgt.as_ref(),
                },
                &mut self.model,
                &mut self.optimizer,
                &weights,
                &spec,
                StepRngs {
                    source: &mut s_drop,
                    target: &mut t_drop,
                },
                self.step,
            )?;
            reports.push(report);
        }
        self.epochs_done = epoch;
        let summary = EpochSummary::from_reports(epoch, lr, &reports);
        Ok((reports, summary))
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub trainer: Trainer<T>,
    pub reports: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
}

pub const STEP_LOG: &str = "log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MODEL_DIR: &str = "model";
pub const NAN_DUMP: &str = "nan_dump.json";

struct RunFiles {
    out: PathBuf,
}

impl RunFiles {
    fn create(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(RunFiles { out: out.to_path_buf() })
    }

    fn append<S: Serialize>(&self, name: &str, records: &[S]) -> Result<()> {
        let path = self.out.join(name);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Keeps the first `keep` lines of a log, dropping anything written
    /// after the checkpoint being resumed.
    fn truncate(&self, name: &str, keep: usize) -> Result<()> {
        let path = self.out.join(name);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let kept: String = text.lines().take(keep).map(|l| format!("{l}\n")).collect();
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))
    }

    fn read_epochs(&self) -> Result<Vec<EpochSummary>> {
        read_jsonl(&self.out.join(EPOCH_LOG))
    }

    fn read_reports(&self) -> Result<Vec<LossReport>> {
        read_jsonl(&self.out.join(STEP_LOG))
    }
}

fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn drive<T: Real>(
    mut trainer: Trainer<T>,
    source: &SourceSet<T>,
    target: Option<&TargetSet<T>>,
    files: Option<&RunFiles>,
    mut reports: Vec<LossReport>,
    mut epochs: Vec<EpochSummary>,
) -> Result<TrainOutput<T>> {
    while trainer.epochs_done < trainer.config.epochs {
        let (r, summary) = match trainer.run_epoch(source, target) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => {
                if let Some(f) = files {
                    let p = f.out.join(NAN_DUMP);
                    fs::write(&p, &msg).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::Numeric(msg));
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = files {
            f.append(STEP_LOG, &r)?;
            f.append(EPOCH_LOG, &[summary])?;
            let every = trainer.config.checkpoint_every;
            let last = trainer.epochs_done == trainer.config.epochs;
            if every > 0 && trainer.epochs_done.is_multiple_of(every) || last {
                let dir = f.out.join(CHECKPOINT_DIR).join(format!("epoch_{:03}", trainer.epochs_done));
                Checkpoint::save(&trainer, &dir)?;
            }
            if last {
                Checkpoint::save(&trainer, &f.out.join(MODEL_DIR))?;
            }
        }
        reports.extend(r);
        epochs.push(summary);
    }
    Ok(TrainOutput {
        trainer,
        reports,
        epochs,
    })
}

/// Trains from scratch. With `target = None` this is the supervised-only
/// loop. When `out` is given, logs and checkpoints are written there and
/// any previous logs are replaced.
pub fn train<T: Real>(
    source: &SourceSet<T>,
    target: Option<&TargetSet<T>>,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutput<T>> {
    config.validate()?;
    let trainer = Trainer::new(config.clone(), source.num_identities(), source.schema().len())?;
    let files = out.map(RunFiles::create).transpose()?;
    if let Some(f) = &files {
        f.truncate(STEP_LOG, 0)?;
        f.truncate(EPOCH_LOG, 0)?;
    }
    drive(trainer, source, target, files.as_ref(), Vec::new(), Vec::new())
}

/// Continues the run in `out` from its latest checkpoint.
pub fn resume<T: Real>(source: &SourceSet<T>, target: Option<&TargetSet<T>>, out: &Path) -> Result<TrainOutput<T>> {
    let dir = latest_checkpoint(&out.join(CHECKPOINT_DIR))?
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", out.display())))?;
    let trainer = Checkpoint::load::<T>(&dir)?;
    let files = RunFiles::create(out)?;
    files.truncate(STEP_LOG, trainer.step as usize)?;
    files.truncate(EPOCH_LOG, trainer.epochs_done)?;
    let reports = files.read_reports()?;
    let epochs = files.read_epochs()?;
    drive(trainer, source, target, Some(&files), reports, epochs)
}
