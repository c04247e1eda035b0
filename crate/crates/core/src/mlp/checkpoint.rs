//! Binary model checkpoint, version 1:
//!
//! ```text
//! magic     8 bytes   "CALMLP\0\x01"
//! hdr_len   u32 LE    length of the TOML header that follows
//! header    TOML      format_version, dim, hidden, layout, hyperparameters
//! weights   f64 LE    W1 (column-major, dim * hidden), b1, w2, b2
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpHyperparams, MlpModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CALMLP\0\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dim: usize,
    hidden: usize,
    layout: String,
    hyperparams: MlpHyperparams,
}

pub fn save_model<T: Scalar>(model: &MlpModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        format_version: FORMAT_VERSION,
        dim: model.dim(),
        hidden: model.hidden_size(),
        layout: "w1-column-major,b1,w2,b2;f64-le".into(),
        hyperparams: model.hyperparams().clone(),
    };
    let header = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let n = model.w1.len() + 2 * model.hidden_size() + 1;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * n);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for w in model
        .w1
        .iter()
        .chain(&model.b1)
        .chain(&model.w2)
        .chain(std::iter::once(&model.b2))
    {
        buf.extend_from_slice(&w.f64().to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<MlpModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidData(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a model checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hend = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(&bytes[12..hend]).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = toml::from_str(header).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.format_version)));
    }
    if header.hidden != header.hyperparams.hidden_size {
        return Err(bad("hidden size disagrees with hyperparameters"));
    }
    let mut model = MlpModel::<T>::zeros(header.dim, header.hyperparams)?;
    let n = model.w1.len() + 2 * model.hidden_size() + 1;
    let body = &bytes[hend..];
    if body.len() != 8 * n {
        return Err(bad(&format!("expected {} weight bytes, found {}", 8 * n, body.len())));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    for w in model.w1.iter_mut().chain(model.b1.iter_mut()).chain(model.w2.iter_mut()) {
        *w = values.next().expect("length checked");
    }
    model.b2 = values.next().expect("length checked");
    if !model.is_finite() {
        return Err(bad("non-finite weights"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn checkpoint_roundtrip() {
        let hp = MlpHyperparams {
            hidden_size: 5,
            ..Default::default()
        };
        let m = MlpModel::<f64>::init(17, hp, &mut seed::rng(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlp");
        save_model(&m, &path).unwrap();
        let back: MlpModel<f64> = load_model(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mlp");
        fs::write(&path, b"hello world, not a model").unwrap();
        assert!(load_model::<f64>(&path).is_err());

        let hp = MlpHyperparams {
            hidden_size: 2,
            ..Default::default()
        };
        let m = MlpModel::<f64>::init(3, hp, &mut seed::rng(1)).unwrap();
        save_model(&m, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(load_model::<f64>(&path).is_err());
    }
}
