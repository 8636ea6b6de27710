use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelError, NetworkSpec, Result, TmnModel};
use crate::data::{AnswerVocab, Vocabulary};
use crate::library::SubTaskCatalog;
use crate::tensor::{read_checkpoint, write_checkpoint, Scalar};

/// Appended to the checkpoint path for the JSON sidecar.
pub const MANIFEST_SUFFIX: &str = ".json";

/// Everything besides the weights needed to rebuild a checkpointed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub spec: NetworkSpec,
    pub catalog: serde_json::Value,
    pub catalog_hash: String,
    pub vocab: Vocabulary,
    pub answers: AnswerVocab,
    pub num_params: usize,
}

fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

fn io(e: impl std::fmt::Display) -> ModelError {
    ModelError::Io(e.to_string())
}

/// Writes the weights to `path` and the manifest next to it.
pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &TmnModel<T>) -> Result<()> {
    let path = path.as_ref();
    let catalog = model.net.library.catalog();
    let manifest = ModelManifest {
        format: "tmn-model-v1".into(),
        spec: model.net.spec.clone(),
        catalog: serde_json::from_str(&catalog.to_json()).map_err(io)?,
        catalog_hash: catalog.hash(),
        vocab: model.net.vocab.clone(),
        answers: model.net.answers.clone(),
        num_params: model.params.num_elements(),
    };
    write_checkpoint(path, &model.params).map_err(io)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(io)?;
    fs::write(manifest_path(path), text).map_err(io)
}

/// Rebuilds the network from the manifest and loads the weights, checking
/// the catalog hash and every parameter name and shape.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(TmnModel<T>, ModelManifest)> {
    let path = path.as_ref();
    let text = fs::read_to_string(manifest_path(path)).map_err(io)?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(io)?;
    let catalog = SubTaskCatalog::from_json(&manifest.catalog.to_string())?;
    if catalog.hash() != manifest.catalog_hash {
        return Err(ModelError::Mismatch(format!(
            "catalog hash {} does not match manifest {}",
            catalog.hash(),
            manifest.catalog_hash
        )));
    }
    let mut model = TmnModel::<T>::new(manifest.spec.clone(), &catalog, 0)?;
    if model.net.vocab != manifest.vocab || model.net.answers != manifest.answers {
        return Err(ModelError::Mismatch("vocabulary differs from the manifest".into()));
    }
    let stored = read_checkpoint::<T>(path).map_err(io)?;
    if stored.len() != model.params.len() {
        return Err(ModelError::Mismatch(format!(
            "checkpoint has {} tensors, model expects {}",
            stored.len(),
            model.params.len()
        )));
    }
    for ((_, a, ta), (_, b, tb)) in model.params.iter().zip(stored.iter()) {
        if a != b || ta.shape() != tb.shape() {
            return Err(ModelError::Mismatch(format!(
                "parameter {a} {:?} does not match checkpoint {b} {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    model.params = stored;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::Strategy;
    use crate::program::Structure;
    use crate::transformer::ModelConfig;

    #[test]
    fn round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        };
        let spec = NetworkSpec::tmn(cfg, Strategy::SemanticGroup, Structure::Tree);
        let model = TmnModel::<f32>::new(spec, &SubTaskCatalog::clevr(), 3).unwrap();
        save_model(&path, &model).unwrap();
        let (back, m) = load_model::<f32>(&path).unwrap();
        assert_eq!(back.net, model.net);
        assert_eq!(m.num_params, model.params.num_elements());
        for ((_, _, a), (_, _, b)) in back.params.iter().zip(model.params.iter()) {
            assert_eq!(a, b);
        }
        let mp = manifest_path(&path);
        let text = fs::read_to_string(&mp).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["catalog_hash"] = "00".into();
        fs::write(&mp, v.to_string()).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(ModelError::Mismatch(_))));
    }
}
