//! Versioned checkpoint container: vocabulary, shapes, flat weights,
//! adapter factors, and the seed lineage, as a single JSON file.

use super::{PolicyError, PolicyParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: PolicyParams,
}

pub fn save(path: &Path, params: &PolicyParams) -> Result<(), PolicyError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        file,
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            params: params.clone(),
        },
    )?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams, PolicyError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(file)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(PolicyError::Config(format!(
            "checkpoint version {} != expected {}",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    ckpt.params.dims.validate()?;
    if ckpt.params.dims.vocab != ckpt.params.vocab.len() {
        return Err(PolicyError::Shape(
            "checkpoint vocabulary does not match model dims".into(),
        ));
    }
    Ok(ckpt.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::ModelDims;
    use crate::policy::vocab::Vocabulary;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let vocab = Vocabulary::new((0..6).map(|i| format!("a{i}")));
        let dims = ModelDims {
            vocab: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_context: 16,
        };
        let mut params = PolicyParams::init(vocab, dims, 9).unwrap();
        params.attach_adapters(2, 4.0, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save(&path, &params).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(params.base, back.base);
        assert_eq!(params.adapters, back.adapters);
        assert_eq!(params.lineage, back.lineage);
        assert_eq!(params.vocab, back.vocab);
    }
}
