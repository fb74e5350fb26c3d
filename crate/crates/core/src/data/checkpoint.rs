//! Checkpoint container: a magic line, the byte length of a JSON manifest,
//! the manifest, then every tensor as little-endian `f64`s.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::MeCrf;

pub const MAGIC: &str = "MECRF-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset from the start of the blob section.
    pub offset: usize,
    /// Number of `f64` values.
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub labels: Vec<String>,
    pub frozen_embeddings: bool,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &MeCrf) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut blob = Vec::with_capacity(model.store.num_scalars() * 8);
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
            offset: blob.len(),
            len: p.value.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: VERSION,
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        labels: model.labels.clone(),
        frozen_embeddings: model.frozen_embeddings,
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(json.len() + blob.len() + 64);
    out.extend_from_slice(format!("{MAGIC}\n{}\n", json.len()).as_bytes());
    out.extend_from_slice(&json);
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<MeCrf> {
    let (magic, rest) = split_line(bytes).ok_or_else(|| Error::Integrity("missing header".into()))?;
    if magic != MAGIC.as_bytes() {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let (len_line, rest) = split_line(rest).ok_or_else(|| Error::Integrity("missing manifest length".into()))?;
    let manifest_len: usize = std::str::from_utf8(len_line)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Integrity("bad manifest length".into()))?;
    if rest.len() < manifest_len + 1 {
        return Err(Error::Integrity("truncated manifest".into()));
    }
    let probe: serde_json::Value = serde_json::from_slice(&rest[..manifest_len])
        .map_err(|e| Error::Integrity(format!("manifest is not valid JSON: {e}")))?;
    let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != VERSION {
        return Err(Error::IncompatibleVersion {
            found,
            expected: VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(probe).map_err(|e| Error::Integrity(format!("bad manifest: {e}")))?;
    let blob = &rest[manifest_len + 1..];
    let mut expected = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let bytes = t.len * 8;
        if t.offset != expected || t.len != t.shape[0] * t.shape[1] {
            return Err(Error::Integrity(format!("tensor `{}` has an inconsistent layout", t.name)));
        }
        let end = t.offset + bytes;
        if end > blob.len() {
            return Err(Error::Integrity(format!("blob truncated inside tensor `{}`", t.name)));
        }
        let data = blob[t.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((t.name.clone(), Tensor::new(t.shape[0], t.shape[1], data)?));
        expected = end;
    }
    if expected != blob.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last tensor",
            blob.len() - expected
        )));
    }
    let vocab = Vocabulary::from_list(manifest.vocab)?;
    MeCrf::from_tensors(manifest.config, vocab, manifest.labels, manifest.frozen_embeddings, tensors)
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub fn save_checkpoint(model: &MeCrf, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MeCrf> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    from_bytes(&std::fs::read(path)?)
}

/// Errors unless `labels` is exactly the model's inventory.
pub fn check_labels(model: &MeCrf, labels: &[String]) -> Result<()> {
    if model.labels.len() != labels.len() {
        return Err(Error::LabelMismatch(format!(
            "model has {} labels, data has {}",
            model.labels.len(),
            labels.len()
        )));
    }
    if model.labels != labels {
        return Err(Error::LabelMismatch(format!(
            "model labels {:?} differ from data labels {:?}",
            model.labels, labels
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    fn model() -> MeCrf {
        let mut cfg = TrainConfig::for_task(Task::Thread);
        cfg.embedding_dim = 3;
        cfg.hidden = 4;
        cfg.encoder_hidden = 2;
        cfg.struct_dim = 2;
        cfg.punct_dim = 2;
        MeCrf::new(cfg, Vocabulary::from_tokens(["x", "y"]), vec!["a".into(), "b".into()], None).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        let id = m.store.ids().nth(3).unwrap();
        m.store.get_mut(id).data_mut()[0] = 0.1 + 0.2;
        let back = from_bytes(&to_bytes(&m)).unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = to_bytes(&model());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
        let needle = b"\"version\": 1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut patched = bytes.clone();
        patched[at + needle.len() - 1] = b'9';
        let err = from_bytes(&patched).unwrap_err();
        assert!(matches!(err, Error::IncompatibleVersion { found: 9, expected: 1 }));
    }

    #[test]
    fn tensor_count_mismatch_is_integrity_error() {
        let m = model();
        let mut tensors: Vec<(String, Tensor)> = m.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        tensors.pop();
        let err = MeCrf::from_tensors(m.config.clone(), m.vocab.clone(), m.labels.clone(), false, tensors).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn label_mismatch_is_explicit() {
        let m = model();
        assert!(check_labels(&m, &["a".into(), "b".into()]).is_ok());
        assert!(matches!(check_labels(&m, &["a".into()]), Err(Error::LabelMismatch(_))));
    }
}
