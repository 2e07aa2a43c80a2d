//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "HPN1"
//! version    u32
//! taxonomy   u64 length + UTF-8 canonical taxonomy JSON
//! config     u64 length + UTF-8 model config JSON
//! meta       u64 length + UTF-8 JSON {seed, config_hash, projections}
//! params     u32 count, then per parameter:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank × u64 dims
//!              product(dims) × f64
//! trailer    4 bytes  "END1"
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{config_hash, CheckpointMeta, HpnetModel, ModelConfig};
use crate::error::{HpnetError, Result};
use crate::taxonomy::Taxonomy;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HPN1";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END1";

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

pub fn encode(model: &HpnetModel) -> Result<Vec<u8>> {
    if !model.is_finite() {
        return Err(HpnetError::Checkpoint(
            "refusing to save a model with non-finite parameters".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut buf, model.taxonomy().canonical_json().as_bytes());
    put_bytes(&mut buf, serde_json::to_string(model.config())?.as_bytes());
    put_bytes(&mut buf, serde_json::to_string(&model.meta)?.as_bytes());
    let params = model.parameters();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, _, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(TRAILER);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(HpnetError::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len_prefixed(&mut self) -> Result<&'a str> {
        let n = self.u64()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| HpnetError::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<HpnetModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(HpnetError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(HpnetError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let taxonomy = Taxonomy::parse(r.len_prefixed()?)?;
    let config: ModelConfig = serde_json::from_str(r.len_prefixed()?)?;
    let meta: CheckpointMeta = serde_json::from_str(r.len_prefixed()?)?;
    let actual = config_hash(&taxonomy, &config);
    if actual != meta.config_hash {
        return Err(HpnetError::ConfigHash {
            expected: actual,
            found: meta.config_hash,
        });
    }
    let mut model = HpnetModel::new(config, taxonomy, meta.seed)?;
    model.meta = meta;
    let count = r.u32()? as usize;
    let mut params = model.parameters_mut();
    if count != params.len() {
        return Err(HpnetError::Checkpoint(format!(
            "expected {} parameters, file has {count}",
            params.len()
        )));
    }
    for (name, _, tensor) in params.iter_mut() {
        let n = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(n)?)
            .map_err(|e| HpnetError::Checkpoint(format!("invalid UTF-8: {e}")))?;
        if stored != name {
            return Err(HpnetError::Checkpoint(format!(
                "expected parameter {name}, found {stored}"
            )));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != tensor.shape() {
            return Err(HpnetError::Checkpoint(format!(
                "parameter {name} has shape {dims:?}, model expects {:?}",
                tensor.shape()
            )));
        }
        let raw = r.take(8 * tensor.numel())?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.take(4)? != TRAILER {
        return Err(HpnetError::Checkpoint("missing trailer".into()));
    }
    if r.pos != bytes.len() {
        return Err(HpnetError::Checkpoint(
            "trailing bytes after trailer".into(),
        ));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &HpnetModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| HpnetError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HpnetModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HpnetError::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks it was built for `taxonomy`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<HpnetModel> {
    let model = load_checkpoint(path)?;
    let expected = config_hash(taxonomy, model.config());
    if expected != model.meta.config_hash {
        return Err(HpnetError::ConfigHash {
            expected,
            found: model.meta.config_hash.clone(),
        });
    }
    Ok(model)
}

/// SHA-256 of a checkpoint file's bytes, as lowercase hex.
pub fn checkpoint_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HpnetError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::BackboneConfig;
    use crate::numerics::Tensor;

    const TAX: &str = r#"{"name":"root","children":[
        {"name":"vehicle","children":[{"name":"ambulance"},{"name":"pickup"}]},
        {"name":"animal","children":[{"name":"cat"},{"name":"dog"}]}]}"#;

    fn model() -> HpnetModel {
        let config = ModelConfig {
            backbone: BackboneConfig::tiny(8),
            prototypes_per_class: 2,
            epsilon: 1e-4,
        };
        let mut m = HpnetModel::new(config, Taxonomy::parse(TAX).unwrap(), 3).unwrap();
        // perturb so the round trip is not just re-initialization from the seed
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (_, _, t) in m.parameters_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hpn");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen());
        let a = m.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.logits.data(), lb.logits.data());
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(HpnetError::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = encode(&model()).unwrap();
        bytes[4] = 7;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(&model()).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn other_taxonomy_is_config_hash_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hpn");
        save_checkpoint(&model(), &path).unwrap();
        let other = Taxonomy::parse(
            r#"{"name":"root","children":[{"name":"vehicle","children":[{"name":"ambulance"},{"name":"taxi"}]},
            {"name":"animal","children":[{"name":"cat"},{"name":"dog"}]}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(HpnetError::ConfigHash { .. })
        ));
        load_checkpoint_for(&path, &Taxonomy::parse(TAX).unwrap()).unwrap();
    }
}
