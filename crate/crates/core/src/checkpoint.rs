//! Binary model checkpoints.
//!
//! Layout: `b"RGWM"`, format version (u32 LE), header length (u32 LE), JSON
//! header, then the parameter payload as little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Architecture, Codec};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RGWM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    /// Training config as JSON text, hashed verbatim.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
}

/// A codec together with the run metadata it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub codec: Codec,
    pub config: serde_json::Value,
    pub seed: u64,
}

pub fn config_hash(config: &str) -> String {
    let digest = Sha256::digest(config.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn to_bytes(codec: &Codec, config: &serde_json::Value, seed: u64) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(codec.params().num_values() * 4);
    for p in codec.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let config = config.to_string();
    let header = Header {
        architecture: codec.arch().clone(),
        tensors,
        config_hash: config_hash(&config),
        config,
        seed,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| bad(field, "file truncated"))?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.get(..4) != Some(&MAGIC[..]) {
        return Err(bad("magic", "not a checkpoint file"));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != FORMAT_VERSION {
        return Err(bad("version", format!("unsupported format version {version}")));
    }
    let hlen = read_u32(bytes, 8, "header_length")? as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("header", "file truncated"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad("header", e.to_string()))?;
    if config_hash(&header.config) != header.config_hash {
        return Err(bad("config_hash", "does not match the stored config"));
    }
    header
        .architecture
        .validate()
        .map_err(|e| bad("architecture", e.to_string()))?;
    let payload = &bytes[12 + hlen..];

    let mut params = ParamStore::new();
    let mut expected_offset = 0usize;
    for t in &header.tensors {
        let count: usize = t.shape.iter().product();
        if t.offset != expected_offset {
            return Err(bad(&t.name, format!("offset {} overlaps or leaves a gap", t.offset)));
        }
        let end = t.offset + count * 4;
        let raw = payload
            .get(t.offset..end)
            .ok_or_else(|| bad(&t.name, "tensor extends past the payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(bad("payload", format!("{} trailing bytes", payload.len() - expected_offset)));
    }
    let config = serde_json::from_str(&header.config).map_err(|e| bad("config", e.to_string()))?;
    let codec = Codec::from_params(header.architecture, params)?;
    Ok(Checkpoint {
        codec,
        config,
        seed: header.seed,
    })
}

pub fn save_checkpoint(path: &Path, codec: &Codec, config: &serde_json::Value, seed: u64) -> Result<()> {
    std::fs::write(path, to_bytes(codec, config, seed)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small() -> Codec {
        let arch = Architecture {
            image_size: 8,
            width: 4,
            message_len: 4,
            ..Architecture::default()
        };
        Codec::new(arch, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rgwm");
        save_checkpoint(&path, &c, &json!({"steps": 3}), 42).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.config, json!({"steps": 3}));
        assert_eq!(back.codec.arch(), c.arch());
        for (a, b) in c.params().iter().zip(back.codec.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = to_bytes(&small(), &json!(null), 0).unwrap();
        for cut in [0, 3, 6, 10, 40, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&small(), &json!(null), 0).unwrap();
        bytes[4] = 9;
        match from_bytes(&bytes) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        match from_bytes(&bytes) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut Header)) -> Vec<u8> {
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut h: Header = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        edit(&mut h);
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + hlen..]);
        out
    }

    #[test]
    fn tampered_shape_names_the_parameter() {
        let bytes = to_bytes(&small(), &json!(null), 0).unwrap();
        let tampered = rewrite_header(&bytes, |h| {
            let t = h.tensors.iter_mut().find(|t| t.name == "dec.fc.b").unwrap();
            t.shape = vec![2, 2];
        });
        match from_bytes(&tampered) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "dec.fc.b"),
            other => panic!("{other:?}"),
        }
        let tampered = rewrite_header(&bytes, |h| h.tensors[1].shape = vec![1]);
        match from_bytes(&tampered) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, h_name(&bytes, 2)),
            other => panic!("{other:?}"),
        }
    }

    fn h_name(bytes: &[u8], i: usize) -> String {
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h: Header = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        h.tensors[i].name.clone()
    }

    #[test]
    fn config_hash_is_checked() {
        let bytes = to_bytes(&small(), &json!({"lr": 0.001}), 0).unwrap();
        let tampered = rewrite_header(&bytes, |h| h.config = json!({"lr": 0.01}).to_string());
        match from_bytes(&tampered) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "config_hash"),
            other => panic!("{other:?}"),
        }
    }
}
