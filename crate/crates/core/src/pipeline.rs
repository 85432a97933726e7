//! Stage chaining and content-addressed checkpoint reuse.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataset::Dataset;
use crate::distill::{DistillConfig, DistillLog, DistillState};
use crate::eval::train_stage;
use crate::model::{Model, ModelConfig};
use crate::train::Stage;
use crate::{Error, Result};

const MODEL_CONFIG_KEY: &str = "model_config";

/// Checkpoints keyed by a name plus a digest of everything that produced them.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    pub root: PathBuf,
    /// Ignore existing checkpoints and retrain.
    pub fresh: bool,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), fresh: false }
    }

    pub fn key(name: &str, cfg: &ModelConfig, recipe: &impl Serialize) -> String {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(cfg.hash().as_bytes());
        h.update(serde_json::to_vec(recipe).expect("recipe serializes"));
        format!("{name}-{}", &format!("{:x}", h.finalize())[..16])
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    pub fn load(&self, key: &str, cfg: &ModelConfig) -> Result<Option<Model>> {
        let dir = self.path(key);
        if self.fresh || !dir.join(checkpoint::MANIFEST_FILE).exists() {
            return Ok(None);
        }
        let (params, manifest) = checkpoint::load::<f32>(&dir)?;
        if manifest.config_hash != cfg.hash() {
            return Ok(None);
        }
        Ok(Some(Model::with_params(cfg.clone(), &params)?))
    }

    pub fn save(&self, key: &str, model: &Model, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        save_model(&self.path(key), model, meta)
    }

    /// Load `name` for `(cfg, recipe)` or train it with `train` and save it.
    pub fn get_or_train(
        &self,
        name: &str,
        cfg: &ModelConfig,
        recipe: &impl Serialize,
        train: impl FnOnce() -> Result<Model>,
    ) -> Result<(Model, bool)> {
        let key = Self::key(name, cfg, recipe);
        if let Some(m) = self.load(&key, cfg)? {
            return Ok((m, true));
        }
        let model = train()?;
        let mut meta = BTreeMap::new();
        meta.insert("recipe".into(), serde_json::to_value(recipe)?);
        self.save(&key, &model, meta)?;
        Ok((model, false))
    }
}

/// Memory-augmented bidirectional teacher fine-tuned from a memory model.
pub fn train_teacher(memory_model: &Model, ds: &Dataset, steps: usize, seed: u64) -> Result<Model> {
    let mut teacher = memory_model.clone();
    train_stage(&mut teacher, ds, Stage::Teacher, steps, seed)?;
    Ok(teacher)
}

/// Distill `student` against `teacher`; returns the student and the log.
pub fn distill(student: &Model, teacher: &Model, ds: &Dataset, cfg: &DistillConfig) -> Result<(Model, Vec<DistillLog>)> {
    let mut state = DistillState::new(student.clone(), teacher.clone(), cfg.clone())?;
    let log = state.run(ds, None)?;
    Ok((state.student, log))
}

/// Save a model with its configuration stored alongside the parameters.
pub fn save_model(dir: &Path, model: &Model, mut meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
    meta.insert(MODEL_CONFIG_KEY.into(), serde_json::to_value(&model.cfg)?);
    checkpoint::save(dir, &model.params, &model.cfg.hash(), meta)
}

/// Load a model saved by [`save_model`].
pub fn load_model(dir: &Path) -> Result<Model> {
    let (params, manifest) = checkpoint::load::<f32>(dir)?;
    let cfg: ModelConfig = manifest
        .meta
        .get(MODEL_CONFIG_KEY)
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Checkpoint(format!("{} has no model config", dir.display())))?;
    if manifest.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!("{}: config hash mismatch", dir.display())));
    }
    Model::with_params(cfg, &params)
}

pub fn default_root(base: &Path) -> PathBuf {
    base.join("checkpoints")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saved_models_reload_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { dim: 16, heads: 2, blocks: 1, patch: 4, frame_width: 8, frame_height: 8, time_features: 8, ..ModelConfig::default() };
        let model = Model::new(cfg).unwrap();
        save_model(dir.path(), &model, BTreeMap::new()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.cfg, model.cfg);
        for ((_, a, x), (_, b, y)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!((a, x), (b, y));
        }
    }
}
