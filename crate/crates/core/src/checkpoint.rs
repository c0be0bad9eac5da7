//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSHP" | version u32 | config_len u32 | config JSON
//! then per tensor, in name order:
//!   name_len u32 | name | rank u32 | dims u64 * rank | values f32 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::supernet::{BackboneConfig, Supernet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSHP";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes `model` to bytes. Weights are stored as `f32`.
pub fn encode(model: &Supernet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&len_u32(config.len())?.to_le_bytes());
    out.extend_from_slice(&config);
    for (name, tensor) in model.params().sorted() {
        out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len_u32(tensor.dims().len())?.to_le_bytes());
        for &d in tensor.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn bad(&self, at: usize, detail: String) -> Error {
        Error::Format {
            offset: at as u64,
            detail,
        }
    }
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Supernet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.bad(0, "bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config_at = r.pos;
    let config: BackboneConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| r.bad(config_at, format!("config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| r.bad(config_at, format!("config: {e}")))?;

    let mut found: BTreeMap<String, (usize, Tensor)> = BTreeMap::new();
    while r.pos < bytes.len() {
        let record_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.bad(record_at + 4, "tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.bad(r.pos - 4, format!("implausible rank {rank} for {name}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = r.u64("dims")?;
            count = usize::try_from(d)
                .ok()
                .and_then(|d| count.checked_mul(d))
                .ok_or_else(|| r.bad(r.pos - 8, format!("dims of {name} overflow")))?;
            dims.push(d as usize);
        }
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| r.bad(r.pos, "tensor too large".into()))?,
            "tensor values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| r.bad(record_at, e.to_string()))?;
        if found.insert(name.clone(), (record_at, tensor)).is_some() {
            return Err(r.bad(record_at, format!("duplicate tensor {name}")));
        }
    }
    // Insert in build order so parameter ids match a freshly built model.
    let mut params = ParamStore::new();
    for spec in config.param_specs() {
        let (_, tensor) = found
            .remove(&spec.name)
            .ok_or_else(|| r.bad(bytes.len(), format!("missing tensor {}", spec.name)))?;
        params.insert(spec.name, tensor)?;
    }
    if let Some((name, (at, _))) = found.into_iter().next() {
        return Err(r.bad(at, format!("unexpected tensor {name}")));
    }
    Supernet::from_params(config, params).map_err(|e| r.bad(bytes.len(), e.to_string()))
}

/// Writes `model` to `path` atomically (temp file then rename).
pub fn save_checkpoint(model: &Supernet, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn load_checkpoint(path: &Path) -> Result<Supernet> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ShapeVector;
    use crate::supernet::MlmBatch;

    fn toy() -> Supernet {
        let config = BackboneConfig {
            num_layers: 2,
            d_model: 8,
            d_attn: 8,
            d_ff: 16,
            heads: 2,
            vocab_size: 10,
            max_seq_len: 4,
            allowed_dims: vec![4, 8],
            init_std: 0.02,
        };
        Supernet::build(config, 11).unwrap()
    }

    #[test]
    fn round_trip_preserves_logits_at_f32() {
        let model = toy();
        let back = decode(&encode(&model).unwrap()).unwrap();
        let mut rounded = model.clone();
        rounded.round_to_storage_precision();
        assert_eq!(back.params(), rounded.params());
        let batch = MlmBatch {
            batch_size: 1,
            seq_len: 4,
            input_ids: vec![2, 4, 7, 3],
            labels: vec![None, Some(5), None, None],
        };
        let shape = ShapeVector::new(vec![4, 8]);
        let a = rounded.mlm_logits(&shape, &batch).unwrap();
        let b = back.mlm_logits(&shape, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&toy()).unwrap(), encode(&toy()).unwrap());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&toy()).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&toy()).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_is_format_error() {
        let bytes = encode(&toy()).unwrap();
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = toy();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert!(!dir.path().join("m.partial").exists());
    }
}
