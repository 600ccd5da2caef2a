//! Binary checkpoint: magic `CAST`, `u32` format version, `u32` header
//! length, a JSON header, then `f32` parameter blobs in declared order,
//! followed by the item codes (`u32`) and text embeddings (`f32`).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CastModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::opq::CodeAssignment;

const MAGIC: &[u8; 4] = b"CAST";
const VERSION: u32 = 1;

/// Free-form training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub valid_ndcg10: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, model: &CastModel, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        config: model.cfg.clone(),
        meta: meta.clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for t in model.params() {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for &c in model.codes() {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    for &v in model.text().data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CastModel, CheckpointMeta)> {
    let buf = fs::read(path)?;
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    if buf.len() < 12 || &buf[..4] != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let body = buf.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut pos = 12 + hlen;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + n).ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    let f32s = |b: &[u8]| -> Vec<f64> {
        b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()
    };

    let cfg = header.config;
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        params.push(Tensor::new(p.shape.clone(), f32s(take(n * 4)?))?);
    }
    let nc = cfg.num_items * cfg.subspaces;
    let codes: Vec<usize> = take(nc * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let text = Tensor::matrix(cfg.num_items, cfg.d_text, f32s(take(cfg.num_items * cfg.d_text * 4)?))?;
    if pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - pos)));
    }

    let assignment = CodeAssignment {
        rows: cfg.num_items,
        subspaces: cfg.subspaces,
        codebook_size: cfg.codebook_size,
        codes,
    };
    let mut model = CastModel::new(cfg, &assignment, text, None, 0)?;
    if model.param_names().len() != params.len()
        || model.param_names().iter().zip(&header.params).any(|(a, b)| *a != b.name)
    {
        return Err(bad("parameter layout does not match the configuration".into()));
    }
    for (dst, src) in model.params_mut().iter_mut().zip(params) {
        if dst.shape() != src.shape() {
            return Err(bad("parameter shape mismatch".into()));
        }
        *dst = src;
    }
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_model};
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let m = tiny_model(tiny_config(), 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cast");
        let meta = CheckpointMeta {
            seed: 9,
            epoch: 3,
            valid_ndcg10: 0.25,
        };
        save_checkpoint(&p, &m, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&p).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.codes(), m.codes());
        for (a, b) in m.params().iter().zip(back.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        // a second save of the loaded model is byte-identical
        let p2 = dir.path().join("m2.cast");
        save_checkpoint(&p2, &back, &meta).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cast");
        std::fs::write(&p, b"CASTxxxx").unwrap();
        assert!(load_checkpoint(&p).is_err());
        let m = tiny_model(tiny_config(), 1);
        save_checkpoint(&p, &m, &CheckpointMeta::default()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }
}
