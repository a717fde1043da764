//! Binary checkpoints: `"SWFT"`, format version (u32 LE), header length
//! (u64 LE), a JSON header with the model config, a tensor table and free
//! metadata, then every parameter as little-endian f32 in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{Swifter, SwifterConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWFT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in scalars.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: SwifterConfig,
    pub tensors: Vec<TensorEntry>,
    pub num_scalars: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn to_bytes(model: &Swifter, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = Header {
        config: model.cfg.clone(),
        tensors,
        num_scalars: offset,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses only the header.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    ensure!(
        bytes.len() >= 16 && &bytes[..4] == MAGIC,
        Error::Format("not a checkpoint (bad magic)".into())
    );
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    ensure!(
        version == VERSION,
        Error::Format(format!("unsupported checkpoint version {version}"))
    );
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    ensure!(
        bytes.len() >= 16 + len,
        Error::Format("truncated checkpoint header".into())
    );
    let header: Header = serde_json::from_slice(&bytes[16..16 + len])?;
    Ok((header, 16 + len))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Swifter, serde_json::Value)> {
    let (header, start) = read_header(bytes)?;
    let payload = &bytes[start..];
    ensure!(
        payload.len() == 4 * header.num_scalars,
        Error::Format(format!(
            "payload holds {} bytes, header declares {} scalars",
            payload.len(),
            header.num_scalars
        ))
    );
    let mut model = Swifter::new(header.config.clone(), 0)?;
    ensure!(
        header.tensors.len() == model.store.len(),
        Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.store.len()
        ))
    );
    for e in &header.tensors {
        let id = model
            .store
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {}", e.name)))?;
        ensure!(
            model.store.get(id).shape() == e.shape.as_slice(),
            Error::Format(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                model.store.get(id).shape()
            ))
        );
        let n: usize = e.shape.iter().product();
        ensure!(
            e.offset + n <= header.num_scalars,
            Error::Format(format!("tensor {} overruns the payload", e.name))
        );
        let data = payload[4 * e.offset..4 * (e.offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        *model.store.get_mut(id) = Tensor::new(&e.shape, data)?;
    }
    Ok((model, header.meta))
}

/// Writes a checkpoint and returns the number of scalars serialized.
pub fn save(model: &Swifter, meta: &serde_json::Value, path: &Path) -> Result<usize> {
    let bytes = to_bytes(model, meta)?;
    let (header, _) = read_header(&bytes)?;
    fs::write(path, bytes)?;
    Ok(header.num_scalars)
}

pub fn load(path: &Path) -> Result<(Swifter, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;

    fn small_model() -> Swifter {
        let mut fusion = FusionConfig::desk(10, 9);
        fusion.hidden = 8;
        fusion.ff_size = 12;
        fusion.heads = 2;
        Swifter::new(
            SwifterConfig {
                backbone: None,
                fusion,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact_at_f32() {
        let m = small_model();
        let meta = serde_json::json!({"note": "x"});
        let bytes = to_bytes(&m, &meta).unwrap();
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta2, meta);
        let mut rounded = m.store.clone();
        rounded.round_to_f32();
        assert_eq!(back.store, rounded);
        assert_eq!(to_bytes(&back, &meta).unwrap(), bytes);
        let (h, start) = read_header(&bytes).unwrap();
        assert_eq!(h.num_scalars, m.count_params().total());
        assert_eq!(bytes.len() - start, 4 * m.count_params().total());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = small_model();
        let bytes = to_bytes(&m, &serde_json::Value::Null).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Format(_))));
        assert!(from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.swft");
        let m = small_model();
        let n = save(&m, &serde_json::Value::Null, &p).unwrap();
        assert_eq!(n, m.store.num_scalars());
        let (back, _) = load(&p).unwrap();
        assert_eq!(back.cfg, m.cfg);
    }
}
