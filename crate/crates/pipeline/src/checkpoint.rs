//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.json    ModelConfig
//! <dir>/vocab.json     {"tokens": [..]}
//! <dir>/weights.bin    b"EMPW0001", u32 tensor count, then per tensor:
//!                      u32 name length, name, u32 rows, u32 cols, rows*cols f64 (LE)
//! <dir>/meta.json      CheckpointMeta
//! ```

use std::path::{Path, PathBuf};

use empathic_core::model::{CausalityT5, EpochLog, ModelConfig, ParamStore, Tensor, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

const MAGIC: &[u8; 8] = b"EMPW0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub optimizer: String,
    /// `scratch` or `warm:<checkpoint dir>`.
    pub init: String,
    pub epoch_log: Option<EpochLog>,
}

pub fn encode_weights(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.count_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let corrupt = |r: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: r.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_of(take(4)?);
    let mut params = ParamStore::default();
    for _ in 0..count {
        let nlen = u32_of(take(4)?);
        let name = std::str::from_utf8(take(nlen)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rows = u32_of(take(4)?);
        let cols = u32_of(take(4)?);
        let data = take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(&name, Tensor::from_vec(rows, cols, data));
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

pub fn save(dir: &Path, model: &CausalityT5, vocab: &Vocab, meta: &CheckpointMeta) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_json(&dir.join("config.json"), &model.config)?;
    io::write_json(
        &dir.join("vocab.json"),
        &VocabFile {
            tokens: vocab.tokens().to_vec(),
        },
    )?;
    io::atomic_write(&dir.join("weights.bin"), &encode_weights(&model.params))?;
    io::write_json(&dir.join("meta.json"), meta)
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub model: CausalityT5,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
}

/// Loads a checkpoint; a training output directory resolves to the epoch
/// named in its `latest` file.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mut dir = dir.to_path_buf();
    let latest = dir.join("latest");
    if latest.is_file() {
        dir = dir.join(io::read_string(&latest)?.trim());
    }
    for f in ["config.json", "vocab.json", "weights.bin", "meta.json"] {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(Error::MissingArtifact {
                what: "checkpoint file".into(),
                path: p,
            });
        }
    }
    let config: ModelConfig = io::read_json(&dir.join("config.json"))?;
    let vf: VocabFile = io::read_json(&dir.join("vocab.json"))?;
    let vocab = Vocab::from_tokens(vf.tokens);
    let meta: CheckpointMeta = io::read_json(&dir.join("meta.json"))?;
    if vocab.id() != meta.vocab_id || config.vocab_id != meta.vocab_id {
        return Err(Error::Corrupt {
            path: dir.clone(),
            reason: format!("vocab id {} does not match meta {}", vocab.id(), meta.vocab_id),
        });
    }
    let wpath = dir.join("weights.bin");
    let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let params = decode_weights(&bytes, &wpath)?;
    let model = CausalityT5::from_params(config, params)?;
    Ok(Checkpoint {
        dir,
        model,
        vocab,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let mut p = ParamStore::default();
        p.add("a", Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]));
        p.add("b.c", Tensor::from_vec(1, 1, vec![42.0]));
        let bytes = encode_weights(&p);
        let q = decode_weights(&bytes, Path::new("w")).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.value(0), p.value(0));
        assert_eq!(q.name(1), "b.c");
        assert!(decode_weights(&bytes[..bytes.len() - 3], Path::new("w")).is_err());
    }
}
