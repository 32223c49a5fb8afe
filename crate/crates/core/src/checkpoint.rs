//! Single-file tensor archive.
//!
//! Layout: the magic bytes `SKCK`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the UTF-8 JSON manifest, then every tensor
//! payload as little-endian `f32` values. The manifest lists each tensor's dotted
//! name, shape and byte offset into the payload section, plus free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slicefusion_autograd::Tensor;

use crate::error::{Error, IoContext, Result};
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"SKCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

pub fn encode(archive: &Archive) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(archive.tensors.len());
    for (name, t) in &archive.tensors {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { tensors: entries, meta: archive.meta.clone() };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing archive magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported archive version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if mlen > body.len() {
        return Err(bad("manifest length exceeds file size".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("malformed manifest: {e}")))?;
    let payload = &body[mlen..];
    let mut tensors = BTreeMap::new();
    let mut expected_end = 0;
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > payload.len() {
            return Err(bad(format!("tensor {} runs past the end of the payload", e.name)));
        }
        let data = payload[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        expected_end = expected_end.max(end);
        tensors.insert(e.name, Tensor::new(e.shape, data).map_err(|e| bad(e.to_string()))?);
    }
    if expected_end != payload.len() {
        return Err(bad(format!("payload has {} bytes, manifest covers {expected_end}", payload.len())));
    }
    Ok(Archive { tensors, meta: manifest.meta })
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    atomic_write(path, &encode(archive))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Archive {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tensors = BTreeMap::new();
        for (name, shape) in [("enc0.sk.conv3.w", vec![8, 1, 3, 3]), ("head.b", vec![4]), ("scalar", vec![])] {
            let t = Tensor::from_fn(&shape, |_| rng.random_range(-1.0f32..1.0));
            tensors.insert(name.to_string(), t);
        }
        tensors.insert("special".into(), Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap());
        Archive { tensors, meta: serde_json::json!({"epoch": 3, "seed": 7}) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let a = sample();
        write_archive(&path, &a).unwrap();
        let b = read_archive(&path).unwrap();
        assert_eq!(a.meta, b.meta);
        for (k, t) in &a.tensors {
            let u = &b.tensors[k];
            assert_eq!(t.shape(), u.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        assert!(decode(&bytes[..10]).is_err());
    }
}
