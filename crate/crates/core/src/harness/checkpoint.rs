use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::params::{hash_tensor, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub completed_stages: Vec<String>,
    pub blocks: Vec<BlockEntry>,
}

pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub completed_stages: Vec<String>,
    pub store: ParamStore<f32>,
}

const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors";

pub fn save(dir: &Path, cfg: &ExperimentConfig, completed: &[String], store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir.join(TENSORS))?;
    let mut blocks = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let file = format!("{TENSORS}/{name}.bin");
        t.save(&dir.join(&file))?;
        blocks.push(BlockEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            frozen: !t.requires_grad(),
            file,
            sha256: hash_tensor(t),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        completed_stages: completed.to_vec(),
        blocks,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint. A frozen block whose contents no longer match the
/// recorded hash is an invariant breach.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "checkpoint schema {} is not {SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    let mut store = ParamStore::new();
    for b in &manifest.blocks {
        let mut t: Tensor<f32> = Tensor::load(&dir.join(&b.file))?;
        if t.shape() != b.shape.as_slice() {
            return Err(Error::Format(format!("block {} has shape {:?}, manifest says {:?}", b.name, t.shape(), b.shape)));
        }
        let hash = hash_tensor(&t);
        if hash != b.sha256 {
            if b.frozen {
                return Err(Error::InvariantBreach(format!("frozen block {} was modified", b.name)));
            }
            return Err(Error::Format(format!("block {} does not match its recorded hash", b.name)));
        }
        t.set_requires_grad(!b.frozen);
        store.insert(b.name.clone(), t);
    }
    Ok(Checkpoint {
        config: manifest.config,
        completed_stages: manifest.completed_stages,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn mutated_frozen_block_is_a_breach() {
        let cfg = ExperimentConfig::default();
        let mut store: ParamStore<f32> = init_model(&cfg.model_config(), 1);
        store.set_trainable(|n| n.starts_with("asr."));
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &cfg, &["decoders".into()], &store).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.store.frozen_hashes(), store.frozen_hashes());
        assert_eq!(back.completed_stages, vec!["decoders".to_string()]);

        let path = dir.path().join("tensors/encoder.layer1.attn.q.w.bin");
        let mut t: Tensor<f32> = Tensor::load(&path).unwrap();
        t.data_mut()[0] += 1.0;
        t.save(&path).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::InvariantBreach(_))));
    }
}
