//! Model checkpoint: magic line, version line, a length-prefixed JSON header
//! (config, vocabulary, feature normalization, tensor table) and raw
//! little-endian `f32` tensor blobs in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::model::{AsrModel, FeatureNorm, ModelConfig};
use crate::asr::vocab::VocabSpec;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const MAGIC: &[u8] = b"GHOSTVEC-ASR\n";
pub const VERSION: &str = "asr-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: VocabSpec,
    norm: FeatureNorm,
    frozen: bool,
    tensors: Vec<(String, usize, usize)>,
}

pub fn save_model<T: Scalar>(model: &AsrModel<T>, path: &Path) -> Result<()> {
    let params = model.params();
    let header = Header {
        config: *model.config(),
        vocab: model.vocab().clone(),
        norm: model.norm().clone(),
        frozen: model.is_frozen(),
        tensors: params.names().iter().zip(params.tensors()).map(|(n, t)| (n.clone(), t.rows(), t.cols())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + params.scalar_count() * 4 + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(VERSION.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in params.tensors() {
        for &x in t.as_slice() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &buf)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<AsrModel<T>> {
    if !path.exists() {
        return Err(Error::DanglingReference(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| Error::format(path, "not an ASR checkpoint"))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(path, "missing version line"))?;
    let found = String::from_utf8_lossy(&rest[..nl]).to_string();
    if found != VERSION {
        return Err(Error::Version { expected: VERSION.into(), found });
    }
    let rest = &rest[nl + 1..];
    if rest.len() < 8 {
        return Err(Error::format(path, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::format(path, e.to_string()))?;
    let mut blob = &rest[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, r, c) in &header.tensors {
        let n = r * c * 4;
        if blob.len() < n {
            return Err(Error::format(path, format!("truncated tensor {name}")));
        }
        let data = blob[..n].chunks_exact(4).map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
        tensors.push(Matrix::from_vec(*r, *c, data)?);
        blob = &blob[n..];
    }
    if !blob.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    // Rebuild the layout deterministically, then swap in the stored tensors.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let template = AsrModel::<T>::new(header.config, header.vocab, header.norm, &mut rng)?;
    let mut stored = template.params().clone();
    if stored.names().len() != header.tensors.len()
        || stored.names().iter().zip(&header.tensors).any(|(a, (b, _, _))| a != b)
    {
        return Err(Error::format(path, "tensor table does not match the model layout"));
    }
    stored
        .replace(tensors)
        .ok_or_else(|| Error::format(path, "tensor shapes do not match the model layout"))?;
    let mut model = template.with_params(stored)?;
    if header.frozen {
        model.freeze();
    }
    Ok(model)
}

