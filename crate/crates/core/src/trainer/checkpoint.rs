//! Checkpoint directories: one tensor file per array plus `index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{MmfaModel, ModelConfig};
use crate::tape::ParamKind;
use crate::tensor::{read_tensor_file, write_tensor_file, Dtype, Real, Tensor};

const FORMAT: u32 = 1;
const INDEX: &str = "index.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    value: String,
    velocity: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnEntry {
    name: String,
    running_mean: String,
    running_var: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    format: u32,
    dtype: Dtype,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    params: Vec<ParamEntry>,
    batch_norm: Vec<BnEntry>,
}

fn read_as<T: Real>(dir: &Path, file: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = read_tensor_file(dir.join(file))?.into_real::<T>();
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!("{file}: shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

fn bn_vector<T: Real>(v: &[T]) -> Result<Tensor<T>> {
    Tensor::new(vec![v.len()], v.to_vec())
}

impl Checkpoint {
    fn read_index(dir: &Path) -> Result<Self> {
        let p = dir.join(INDEX);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }

    /// Writes into a sibling temporary directory, then renames it into place.
    pub fn save<T: Real>(trainer: &Trainer<T>, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?;
        let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        let model = &trainer.model;
        let mut params = Vec::new();
        for (p, v) in model.params().iter().zip(&trainer.optimizer.velocity) {
            let value = format!("param.{}.mmfa", p.name);
            let velocity = format!("velocity.{}.mmfa", p.name);
            write_tensor_file(tmp.join(&value), &p.value)?;
            write_tensor_file(tmp.join(&velocity), v)?;
            params.push(ParamEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
                value,
                velocity,
            });
        }
        let mut batch_norm = Vec::new();
        for (name, bn) in model.bn_states() {
            let running_mean = format!("{name}.running_mean.mmfa");
            let running_var = format!("{name}.running_var.mmfa");
            write_tensor_file(tmp.join(&running_mean), &bn_vector(&bn.running_mean)?)?;
            write_tensor_file(tmp.join(&running_var), &bn_vector(&bn.running_var)?)?;
            batch_norm.push(BnEntry {
                name,
                running_mean,
                running_var,
            });
        }
        let index = Checkpoint {
            format: FORMAT,
            dtype: T::DTYPE,
            epoch: trainer.epochs_done,
            step: trainer.step,
            seed: trainer.config.seed,
            train_config: trainer.config.clone(),
            model_config: model.config().clone(),
            params,
            batch_norm,
        };
        let text = serde_json::to_string_pretty(&index)? + "\n";
        let ip = tmp.join(INDEX);
        fs::write(&ip, text).map_err(|e| Error::io(&ip, e))?;

        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    fn restore_model<T: Real>(&self, dir: &Path) -> Result<MmfaModel<T>> {
        let mut model = MmfaModel::new(self.model_config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for (p, e) in model.params_mut().iter_mut().zip(&self.params) {
            if p.name != e.name || p.kind != e.kind || p.value.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {} does not match stored {}", p.name, e.name)));
            }
            p.value = read_as(dir, &e.value, &e.shape)?;
        }
        let states = model.bn_states_mut();
        if states.len() != self.batch_norm.len() {
            return Err(Error::Checkpoint("batch-norm layer count differs".into()));
        }
        for ((name, bn), e) in states.into_iter().zip(&self.batch_norm) {
            if name != e.name {
                return Err(Error::Checkpoint(format!("batch-norm {name} does not match stored {}", e.name)));
            }
            let d = [bn.running_mean.len()];
            bn.running_mean = read_as::<T>(dir, &e.running_mean, &d)?.into_data();
            bn.running_var = read_as::<T>(dir, &e.running_var, &d)?.into_data();
        }
        Ok(model)
    }

    /// Restores a trainer positioned at the end of the saved epoch.
    pub fn load<T: Real>(dir: &Path) -> Result<Trainer<T>> {
        let ck = Self::read_index(dir)?;
        ck.train_config.validate()?;
        let model = ck.restore_model::<T>(dir)?;
        let mut optimizer = OptimizerState::new(
            model.params(),
            ck.train_config.lr,
            ck.train_config.momentum,
            ck.train_config.weight_decay,
        )?;
        for (v, e) in optimizer.velocity.iter_mut().zip(&ck.params) {
            *v = read_as(dir, &e.velocity, &e.shape)?;
        }
        Ok(Trainer {
            config: ck.train_config,
            model,
            optimizer,
            epochs_done: ck.epoch,
            step: ck.step,
        })
    }
}

/// Loads only the network from a checkpoint directory.
pub fn load_model<T: Real>(dir: impl AsRef<Path>) -> Result<MmfaModel<T>> {
    let dir = dir.as_ref();
    Checkpoint::read_index(dir)?.restore_model(dir)
}

/// The `epoch_NNN` directory with the highest epoch, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(root, e)),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if !entry.path().join(INDEX).exists() {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
