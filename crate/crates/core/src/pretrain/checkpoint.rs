use std::path::Path;

use mirssl_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::encoder::{Model, ModelConfig, Paradigm};
use crate::error::{CoreError, Result};
use crate::formats::{read_file, ByteReader, ByteWriter, CHECKPOINT_MAGIC, VERSION};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    model: ModelConfig,
    train: TrainConfig,
    config_hash: String,
}

/// Everything needed to resume training: student with Adam moments, the
/// teacher, configuration and step. Randomness is derived from (seed, step).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub student: ParamStore<f32>,
    pub teacher: Option<ParamStore<f32>>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, config_hash: &str) -> Self {
        Self {
            model: t.student().config().clone(),
            train: t.config().clone(),
            config_hash: config_hash.to_string(),
            step: t.step(),
            seed: t.seed(),
            student: t.student().params().clone(),
            teacher: t.teacher().cloned(),
        }
    }

    pub fn paradigm(&self) -> Paradigm {
        self.model.paradigm
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.model.clone(), self.student.clone())
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let student = Model::from_parts(self.model, self.student)?;
        Trainer::from_state(self.train, student, self.teacher, self.step, self.seed)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = serde_json::to_vec(&Blob {
            model: self.model.clone(),
            train: self.train.clone(),
            config_hash: self.config_hash.clone(),
        })
        .map_err(|e| CoreError::invalid(e.to_string()))?;
        let mut w = ByteWriter::new(CHECKPOINT_MAGIC);
        w.u32(VERSION);
        w.bytes(&blob);
        w.u8(self.paradigm().code());
        w.u64(self.step);
        w.u64(self.seed);
        w.param_values(&self.student);
        let moments = |first: bool| {
            self.student
                .iter()
                .map(move |p| {
                    let m = if first { &p.first_moment } else { &p.second_moment };
                    (p.name.as_str(), p.value.shape(), m.as_slice())
                })
                .collect::<Vec<_>>()
        };
        w.tensors(moments(true).into_iter());
        w.tensors(moments(false).into_iter());
        match &self.teacher {
            Some(t) => {
                w.u8(1);
                w.param_values(t);
            }
            None => w.u8(0),
        }
        Ok(w.finish())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(buf, CHECKPOINT_MAGIC, origin)?;
        r.version()?;
        let blob: Blob = serde_json::from_slice(r.bytes()?)
            .map_err(|e| r.err(format!("config blob: {e}")))?;
        let paradigm = Paradigm::from_code(r.u8()?).ok_or_else(|| r.err("unknown paradigm tag"))?;
        if paradigm != blob.model.paradigm {
            return Err(r.err("paradigm tag disagrees with the stored configuration"));
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let mut student = r.param_values()?;
        for first in [true, false] {
            let table = r.tensors()?;
            if table.len() != student.len() {
                return Err(r.err("optimizer state does not match the parameter table"));
            }
            for ((name, t), p) in table.into_iter().zip(student.iter_mut()) {
                if name != p.name || t.shape() != p.value.shape() {
                    return Err(r.err(format!("optimizer state for {name} does not match")));
                }
                if first {
                    p.first_moment = t.into_data();
                } else {
                    p.second_moment = t.into_data();
                }
            }
        }
        let teacher = match r.u8()? {
            0 => None,
            1 => Some(r.param_values()?),
            _ => return Err(r.err("bad teacher flag")),
        };
        r.finish()?;
        // validates names and shapes against the configuration
        Model::from_parts(blob.model.clone(), student.clone()).map_err(|e| r.err(e.to_string()))?;
        Ok(Self {
            model: blob.model,
            train: blob.train,
            config_hash: blob.config_hash,
            step,
            seed,
            student,
            teacher,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
