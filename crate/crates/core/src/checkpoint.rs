//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"USEGANCK"
//! version  u32
//! meta     u32 length + JSON {model, adam_g, adam_d}
//! digest   [u8; 32]   SHA-256 of the model config JSON
//! steps    u64 generator optimizer step, u64 discriminator optimizer step
//! tensors  u32 count, then per tensor: u32 name length, name,
//!          u32 rank, u64 dims…, f64 values
//! checksum [u8; 32]   SHA-256 of every preceding byte
//! ```
//!
//! Values are stored as f64 so a save/load round trip is bit-exact and a
//! resumed run continues exactly where it stopped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, OptState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::GanState;

pub const MAGIC: &[u8; 8] = b"USEGANCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    adam_g: AdamConfig,
    adam_d: AdamConfig,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("unexpected end of data at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensor(&mut self) -> std::result::Result<(String, Tensor), String> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| format!("tensor {name}: shape overflows"))?;
        let raw = self.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        Ok((name, t))
    }
}

fn named<'a>(store: &'a ParamStore, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + 'a {
    let prefix = prefix.to_string();
    store.params().iter().map(move |p| (format!("{prefix}/{}", p.name), p.value.clone()))
}

fn moments(opt: &OptState, prefix: &str) -> Vec<(String, Tensor)> {
    opt.moments
        .iter()
        .flat_map(|m| {
            [(format!("{prefix}.m/{}", m.name), m.m.clone()), (format!("{prefix}.v/{}", m.name), m.v.clone())]
        })
        .collect()
}

pub fn to_bytes(state: &GanState) -> Vec<u8> {
    let meta = Meta { model: state.config().clone(), adam_g: state.opt_g.config, adam_d: state.opt_d.config };
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(&serde_json::to_vec(&meta).expect("meta serializes"));
    w.0.extend_from_slice(&meta.model.digest());
    w.u64(state.opt_g.step);
    w.u64(state.opt_d.step);
    let tensors: Vec<(String, Tensor)> = named(state.generator.params(), "G")
        .chain(named(state.discriminator.params(), "D"))
        .chain(moments(&state.opt_g, "optG"))
        .chain(moments(&state.opt_d, "optD"))
        .collect();
    w.u32(tensors.len() as u32);
    for (name, t) in &tensors {
        w.tensor(name, t);
    }
    let checksum = Sha256::digest(&w.0);
    w.0.extend_from_slice(&checksum);
    w.0
}

/// Decodes a checkpoint; `origin` only labels errors.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<GanState> {
    let fail = |reason: String| Error::Checkpoint { path: origin.to_path_buf(), reason };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("not a checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(fail("file is truncated".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32().map_err(&fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version} (this build reads {VERSION})")));
    }
    if Sha256::digest(body).as_slice() != checksum {
        return Err(fail("checksum mismatch: file is truncated or corrupt".into()));
    }
    let meta: Meta =
        serde_json::from_slice(r.bytes().map_err(&fail)?).map_err(|e| fail(format!("bad metadata: {e}")))?;
    let digest = r.take(32).map_err(&fail)?;
    if digest != meta.model.digest() {
        return Err(fail("config digest does not match embedded config".into()));
    }
    let step_g = r.u64().map_err(&fail)?;
    let step_d = r.u64().map_err(&fail)?;
    let count = r.u32().map_err(&fail)? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor().map_err(&fail)?;
        tensors.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(fail(format!("{} trailing bytes after tensors", body.len() - r.pos)));
    }

    let mut state = GanState::new(&meta.model, meta.adam_g, meta.adam_d).map_err(|e| fail(e.to_string()))?;
    let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
        let t = tensors.remove(&name).ok_or_else(|| fail(format!("missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(fail(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), like.shape())));
        }
        Ok(t)
    };
    for (prefix, store) in [("G", state.generator.params_mut()), ("D", state.discriminator.params_mut())] {
        for p in store.params_mut() {
            p.value = take(format!("{prefix}/{}", p.name), &p.value)?;
        }
    }
    for (prefix, opt, step) in [("optG", &mut state.opt_g, step_g), ("optD", &mut state.opt_d, step_d)] {
        opt.step = step;
        for m in &mut opt.moments {
            m.m = take(format!("{prefix}.m/{}", m.name), &m.m)?;
            m.v = take(format!("{prefix}.v/{}", m.name), &m.v)?;
        }
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(fail(format!("unexpected tensor {extra}")));
    }
    Ok(state)
}

/// Writes via a temporary file and rename, so a crash never leaves a partial checkpoint.
pub fn save(state: &GanState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GanState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Loads and rejects checkpoints whose model config differs from `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<GanState> {
    let state = load(path)?;
    let found = state.config();
    if found.variant != expected.variant {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!(
                "checkpoint holds a {} model but the configuration asks for {}",
                found.variant, expected.variant
            ),
        });
    }
    if found != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("model configuration differs from the checkpoint's ({found:?})"),
        });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::rng::Rng;
    use crate::train::train_step;

    fn trained(variant: Variant) -> GanState {
        let cfg =
            ModelConfig { variant, latent_dim: 6, width: 4, image_side: 16, num_heads: 2, ..ModelConfig::default() };
        let mut s = GanState::new(&cfg, AdamConfig::default(), AdamConfig::default()).unwrap();
        let real = Tensor::uniform(vec![4, 3, 16, 16], -1.0, 1.0, &mut Rng::seed(0));
        train_step(&mut s, &real, &mut Rng::seed(1)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = trained(Variant::UseCmhsaGan);
        let bytes = to_bytes(&s);
        let mut back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(back.opt_g, s.opt_g);
        let z = s.generator.sample_latents(3, &mut Rng::seed(4));
        assert_eq!(s.generator.generate(&z).unwrap(), back.generator.generate(&z).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = to_bytes(&trained(Variant::Dcgan));
        for cut in [0, 5, 12, 100, bytes.len() / 2, bytes.len() - 1] {
            let e = from_bytes(&bytes[..cut], Path::new("ck")).unwrap_err();
            assert!(matches!(e, Error::Checkpoint { .. }), "{cut}: {e}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        let e = from_bytes(&flipped, Path::new("ck")).unwrap_err();
        assert!(e.to_string().contains("checksum"), "{e}");
        let mut version = bytes;
        version[8] = 9;
        assert!(from_bytes(&version, Path::new("ck")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn cross_variant_load_names_both_variants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let s = trained(Variant::UseGan);
        save(&s, &path).unwrap();
        let mut want = s.config().clone();
        assert!(load_matching(&path, &want).is_ok());
        want.variant = Variant::CmhsaGan;
        let msg = load_matching(&path, &want).unwrap_err().to_string();
        assert!(msg.contains("USE-GAN") && msg.contains("CMHSA-GAN"), "{msg}");
    }
}
