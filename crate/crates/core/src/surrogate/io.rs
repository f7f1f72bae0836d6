//! Model files: magic, length-prefixed JSON header, little-endian parameters,
//! normalization statistics, then a SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Hyper, Layout, Normalization, SurrogateError, SurrogateModel, FORMAT_VERSION, N_FEATURES};

const MAGIC: &[u8; 8] = b"P2PSURR\0";
const N_NORM: usize = 2 * N_FEATURES + 2;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    hyper: Hyper,
    n_params: usize,
    seed: u64,
    /// Informational copy; the binary section is authoritative.
    normalization: Normalization,
}

fn encode(model: &SurrogateModel) -> Vec<u8> {
    let header = Header {
        version: FORMAT_VERSION,
        hyper: model.hyper,
        n_params: model.params.len(),
        seed: model.seed,
        normalization: model.norm,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (model.params.len() + N_NORM) + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let n = &model.norm;
    let norm = n.x_mean.iter().chain(&n.x_std).chain([&n.y_mean, &n.y_std]);
    for v in model.params.iter().chain(norm) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes the model atomically (temporary file, then rename).
pub fn save(model: &SurrogateModel, path: impl AsRef<Path>) -> Result<(), SurrogateError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

fn decode(bytes: &[u8]) -> Result<SurrogateModel, SurrogateError> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(SurrogateError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(SurrogateError::Checksum);
    }
    if &body[..8] != MAGIC {
        return Err(SurrogateError::Corrupt("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let rest = body
        .get(16..)
        .filter(|r| r.len() >= hlen)
        .ok_or_else(|| SurrogateError::Corrupt("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| SurrogateError::Corrupt(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(SurrogateError::Version(header.version));
    }
    header.hyper.validate()?;
    let layout = Layout::new(&header.hyper);
    if layout.total != header.n_params {
        return Err(SurrogateError::Shape(format!(
            "header declares {} parameters, shapes imply {}",
            header.n_params, layout.total
        )));
    }
    let data = &rest[hlen..];
    if data.len() != 8 * (layout.total + N_NORM) {
        return Err(SurrogateError::Corrupt("parameter section has the wrong length".into()));
    }
    let values = read_f64s(data);
    let (params, norm) = values.split_at(layout.total);
    let mut x_mean = [0.0; N_FEATURES];
    let mut x_std = [0.0; N_FEATURES];
    x_mean.copy_from_slice(&norm[..N_FEATURES]);
    x_std.copy_from_slice(&norm[N_FEATURES..2 * N_FEATURES]);
    let normalization = Normalization {
        x_mean,
        x_std,
        y_mean: norm[2 * N_FEATURES],
        y_std: norm[2 * N_FEATURES + 1],
    };
    let mut model = SurrogateModel {
        hyper: header.hyper,
        layout,
        params: params.to_vec(),
        norm: Normalization::default(),
        seed: header.seed,
    };
    model.set_normalization(normalization)?;
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<SurrogateModel, SurrogateError> {
    decode(&fs::read(path)?)
}

/// Loads a model and insists on the given shapes.
pub fn load_with_shape(path: impl AsRef<Path>, expected: &Hyper) -> Result<SurrogateModel, SurrogateError> {
    let model = load(path)?;
    if model.hyper != *expected {
        return Err(SurrogateError::Shape(format!(
            "file holds d_model={} n_layers={} d_ff={} n_heads={}, expected d_model={} n_layers={} d_ff={} n_heads={}",
            model.hyper.d_model,
            model.hyper.n_layers,
            model.hyper.d_ff,
            model.hyper.n_heads,
            expected.d_model,
            expected.n_layers,
            expected.d_ff,
            expected.n_heads
        )));
    }
    Ok(model)
}
