//! Single-file binary checkpoints for a trained run.
//!
//! The payload is a bincode-serialized [`Checkpoint`] behind a small header:
//! a magic string plus a format version, so readers can reject foreign or
//! incompatible files before deserializing anything.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PromptSchedule};
use crate::error::{Error, Result};
use crate::key_learner::{KeyLearner, KeyLossConfig};
use crate::prompter::TaskPrompter;
use crate::trainer::{ClassifierHead, Method, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"INCPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub method: Method,
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub learners: Vec<KeyLearner>,
    pub prompters: Vec<TaskPrompter>,
    pub schedule: PromptSchedule,
    pub key_cfg: KeyLossConfig,
    pub train_cfg: TrainConfig,
    pub class_map: Vec<Vec<usize>>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Self {
            version: FORMAT_VERSION,
            seed: trainer.seed,
            method: trainer.method,
            backbone: trainer.backbone.clone(),
            head: trainer.head.clone(),
            learners: trainer.learners.clone(),
            prompters: trainer.prompters.clone(),
            schedule: trainer.schedule.clone(),
            key_cfg: trainer.key_cfg,
            train_cfg: trainer.cfg.clone(),
            class_map: trainer.class_map.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            method: self.method,
            backbone: self.backbone,
            head: self.head,
            learners: self.learners,
            prompters: self.prompters,
            schedule: self.schedule,
            key_cfg: self.key_cfg,
            cfg: self.train_cfg,
            seed: self.seed,
            class_map: self.class_map,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        bincode::serialize_into(&mut w, self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let ckpt: Checkpoint = bincode::deserialize_from(&mut r)
            .map_err(|e| Error::Checkpoint(format!("deserialize: {e}")))?;
        Ok(ckpt)
    }
}
