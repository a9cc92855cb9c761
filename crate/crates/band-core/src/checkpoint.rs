//! Binary model checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "BNDC" | u16 version | u64 store seed | 32-byte config digest
//! | u32 config-JSON len | config JSON
//! | u32 param count
//! | per param: u16 name len | name | u8 ndim | ndim × u32 extents | f32 values
//! ```
//!
//! Values are stored as f32 regardless of the in-memory element type.
//! Non-trainable entries (batch-norm running stats) are included, so a
//! reloaded model evaluates identically.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::ParamStore;
use crate::tensor::Element;

pub const MAGIC: &[u8; 4] = b"BNDC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seed: u64,
    /// Hex SHA-256 of the resolved config JSON.
    pub digest: String,
    pub config_json: String,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::Contract(format!("bad hex digest {s:?}")));
    }
    Ok((0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap())
        .collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let digest = unhex(&self.digest)?;
        if digest.len() != 32 {
            return Err(Error::Contract(format!("digest must be 32 bytes, got {}", digest.len())));
        }
        out.extend_from_slice(&digest);
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let seed = r.u64("seed")?;
        let digest = hex(r.take(32, "config digest")?);
        let json_len = r.u32("config length")? as usize;
        let json_at = r.pos as u64;
        let config_json = String::from_utf8(r.take(json_len, "config JSON")?.to_vec())
            .map_err(|e| Error::Format { offset: json_at, message: format!("config JSON not UTF-8: {e}") })?;
        let n = r.u32("param count")? as usize;
        let mut params = Vec::with_capacity(n);
        for i in 0..n {
            let name_len = r.u16("param name length")? as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(name_len, "param name")?.to_vec())
                .map_err(|e| Error::Format { offset: at, message: format!("param {i} name not UTF-8: {e}") })?;
            let ndim = r.take(1, "param rank")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("param extent")? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4, &format!("values of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, shape, data));
        }
        if r.pos != buf.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes after last parameter", buf.len() - r.pos),
            });
        }
        Ok(Checkpoint { seed, digest, config_json, params })
    }
}

pub fn from_model<E: Element>(model: &Model<E>) -> Result<Checkpoint> {
    Ok(Checkpoint {
        seed: model.store.seed,
        digest: model.cfg.digest(),
        config_json: serde_json::to_string(&model.cfg)?,
        params: model
            .store
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.shape.clone(),
                    p.data.iter().map(|&v| Element::to_f64(v) as f32).collect(),
                )
            })
            .collect(),
    })
}

pub fn save_model<E: Element>(path: &Path, model: &Model<E>) -> Result<()> {
    from_model(model)?.write(path)
}

/// Copy checkpoint values into `store`, requiring the exact same parameter
/// set (names and shapes).
pub fn restore_store<E: Element>(ckpt: &Checkpoint, store: &mut ParamStore<E>) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::StaleCache(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, shape, data) in &ckpt.params {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::StaleCache(format!("checkpoint parameter {name} absent from model")))?;
        let p = store.get_mut(idx);
        if &p.shape != shape {
            return Err(Error::StaleCache(format!(
                "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                p.shape
            )));
        }
        p.data = data.iter().map(|&v| E::from_f64(v as f64)).collect();
    }
    Ok(())
}

/// Rebuild the full model recorded in a checkpoint file.
pub fn load_model<E: Element>(path: &Path) -> Result<Model<E>> {
    let ckpt = Checkpoint::read(path)?;
    let cfg: ModelConfig = serde_json::from_str(&ckpt.config_json)?;
    let recomputed = cfg.digest();
    if recomputed != ckpt.digest {
        return Err(Error::StaleCache(format!(
            "checkpoint digest {} does not match its embedded config ({recomputed})",
            ckpt.digest
        )));
    }
    let mut model = Model::build(cfg, ckpt.seed)?;
    restore_store(&ckpt, &mut model.store)?;
    Ok(model)
}

/// Load a checkpoint that must match an already-resolved config exactly.
pub fn load_model_expecting<E: Element>(path: &Path, cfg: &ModelConfig) -> Result<Model<E>> {
    let want = cfg.digest();
    let ckpt = Checkpoint::read(path)?;
    if ckpt.digest != want {
        return Err(Error::StaleCache(format!(
            "checkpoint was produced under config digest {}, active config is {want}",
            ckpt.digest
        )));
    }
    load_model(path)
}

/// Hex SHA-256 over the (name, shape, f32 values) of every parameter whose
/// name starts with `prefix` — the cache key for frozen-trunk embeddings.
pub fn params_digest<E: Element>(store: &ParamStore<E>, prefix: &str) -> String {
    let mut h = Sha256::new();
    for p in store.iter().filter(|p| p.name.starts_with(prefix)) {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        for &e in &p.shape {
            h.update((e as u64).to_le_bytes());
        }
        for v in &p.data {
            h.update(((Element::to_f64(*v)) as f32).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelKind, ModelConfig};

    #[test]
    fn round_trip_preserves_values_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bndc");
        let model: Model<f32> = Model::build(ModelConfig::tiny(ModelKind::Band), 77).unwrap();
        save_model(&path, &model).unwrap();
        let back: Model<f32> = load_model(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.store.seed, 77);
        assert_eq!(back.store.len(), model.store.len());
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data, "param {}", a.name);
        }
    }

    #[test]
    fn digest_mismatch_is_a_stale_cache_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bndc");
        let model: Model<f32> = Model::build(ModelConfig::tiny(ModelKind::Band), 1).unwrap();
        save_model(&path, &model).unwrap();
        let other = ModelConfig::tiny(ModelKind::BandLstm);
        let err = load_model_expecting::<f32>(&path, &other).unwrap_err();
        assert!(matches!(err, Error::StaleCache(_)), "{err:?}");
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bndc");
        let model: Model<f32> = Model::build(ModelConfig::tiny(ModelKind::Cnn3d), 1).unwrap();
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = Checkpoint::read(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err:?}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bndc");
        std::fs::write(&path, b"XXXX rest").unwrap();
        let err = Checkpoint::read(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn trunk_digest_tracks_trunk_only() {
        let mut model: Model<f32> = Model::build(ModelConfig::tiny(ModelKind::Band), 5).unwrap();
        let d0 = params_digest(&model.store, "embedder.");
        // Perturb a head weight: trunk digest unchanged.
        let idx = model.store.index_of("head.classifier.fc1.w").unwrap();
        model.store.get_mut(idx).data[0] += 1.0;
        assert_eq!(params_digest(&model.store, "embedder."), d0);
        // Perturb a trunk weight: digest changes.
        let idx = model.store.index_of("embedder.conv1.w").unwrap();
        model.store.get_mut(idx).data[0] += 1.0;
        assert_ne!(params_digest(&model.store, "embedder."), d0);
    }

    #[test]
    fn f64_model_round_trips_through_f32_storage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bndc");
        let model: Model<f64> = Model::build(ModelConfig::tiny(ModelKind::Band), 9).unwrap();
        save_model(&path, &model).unwrap();
        let back: Model<f64> = load_model(&path).unwrap();
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(1.0));
            }
        }
    }
}
