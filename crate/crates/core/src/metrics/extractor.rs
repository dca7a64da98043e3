//! Feature/classifier backbones for FID and IS.
//!
//! `toy-cnn` is a small convolutional classifier trained with a fixed seed on
//! the dataset's labels; its pooled features feed FID and its softmax feeds
//! IS. `external` reads activations computed elsewhere.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{epoch_batches, ImageSet};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx};
use crate::optim::{AdamConfig, OptState};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

pub const TOY_ID: &str = "toy-cnn";
pub const EXTERNAL_ID: &str = "external";
pub const AVAILABLE: [&str; 2] = [TOY_ID, EXTERNAL_ID];
pub const TOY_FEATURE_DIM: usize = 32;
const CHUNK: usize = 64;

/// Features (`N×D`) and optional class probabilities (`N×K`).
#[derive(Clone, Debug, PartialEq)]
pub struct Extracted {
    pub features: DMatrix<f64>,
    pub probs: Option<DMatrix<f64>>,
}

pub trait FeatureExtractor {
    fn id(&self) -> &str;
    /// Identity of the weights, recorded in every report.
    fn digest(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn extract(&self, images: &Tensor) -> Result<Extracted>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ToyExtractor {
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
    num_classes: usize,
    digest: String,
}

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    name: String,
    shape: Vec<usize>,
    bits: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct SavedToy {
    id: String,
    num_classes: usize,
    params: Vec<SavedTensor>,
}

impl ToyExtractor {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, "toy-extractor-init", 0);
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, "toy.conv1", 3, 16, 4, 2, 1, true, &mut rng);
        let conv2 = Conv2d::new(&mut store, "toy.conv2", 16, TOY_FEATURE_DIM, 4, 2, 1, true, &mut rng);
        let head = Conv2d::new(&mut store, "toy.head", TOY_FEATURE_DIM, num_classes, 1, 1, 0, true, &mut rng);
        let mut t = Self { store, conv1, conv2, head, num_classes, digest: String::new() };
        t.refresh_digest();
        t
    }

    fn refresh_digest(&mut self) {
        let mut h = Sha256::new();
        h.update(TOY_ID.as_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for p in self.store.params() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        self.digest = hex::encode(h.finalize());
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Returns (pooled features `[N, D]`, logits `[N, K]`).
    fn forward(&self, tape: &mut Tape, x: Var, ctx: &Ctx) -> Result<(Var, Var)> {
        let n = tape.value(x).shape()[0];
        let h = self.conv1.forward(tape, &self.store, x, ctx)?;
        let h = tape.leaky_relu(h, 0.2)?;
        let h = self.conv2.forward(tape, &self.store, h, ctx)?;
        let h = tape.leaky_relu(h, 0.2)?;
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.head.forward(tape, &self.store, pooled, ctx)?;
        Ok((tape.reshape(pooled, vec![n, TOY_FEATURE_DIM])?, tape.reshape(logits, vec![n, self.num_classes])?))
    }

    /// Trains a fresh extractor on `data`'s labels with cross-entropy.
    pub fn train(data: &ImageSet, num_classes: usize, cfg: &ToyConfig) -> Result<Self> {
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut model = Self::new(num_classes, cfg.seed);
        let adam = AdamConfig { lr: cfg.lr, beta1: 0.9, ..AdamConfig::default() };
        let mut opt = OptState::new(&model.store, adam);
        let bs = cfg.batch_size.min(data.len());
        let mut rng = Rng::seed(cfg.seed);
        for epoch in 0..cfg.epochs as u64 {
            for idx in epoch_batches(data.len(), bs, cfg.seed, epoch, true) {
                let batch = data.batch(&idx)?;
                let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let mut tape = Tape::new();
                let x = tape.constant(batch.images);
                let (_, logits) = model.forward(&mut tape, x, &Ctx::train(&mut rng))?;
                let loss = tape.cross_entropy(logits, &labels)?;
                let grads = tape.backward(loss)?;
                model.store.zero_grad();
                model.store.accumulate(&tape, &grads);
                opt.step(&mut model.store)?;
            }
        }
        model.refresh_digest();
        Ok(model)
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &ImageSet) -> Result<f64> {
        let probs = self.extract(&data.all()?)?.probs.expect("toy extractor yields probabilities");
        let hits = probs.row_iter().zip(&data.labels).filter(|(row, &l)| row.transpose().argmax().0 == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let saved = SavedToy {
            id: TOY_ID.into(),
            num_classes: self.num_classes,
            params: self
                .store
                .params()
                .iter()
                .map(|p| SavedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    bits: p.value.data().iter().map(|v| v.to_bits()).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&saved).expect("extractor serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let saved: SavedToy =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("bad extractor file: {e}")))?;
        if saved.id != TOY_ID {
            return Err(Error::format(path, format!("extractor id {:?} is not {TOY_ID}", saved.id)));
        }
        let mut model = Self::new(saved.num_classes, 0);
        let values = saved
            .params
            .into_iter()
            .map(|t| {
                let data = t.bits.into_iter().map(f64::from_bits).collect();
                Ok((t.name, Tensor::new(t.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        model.store.load_values(&values).map_err(|e| Error::format(path, e.to_string()))?;
        model.refresh_digest();
        Ok(model)
    }
}

impl FeatureExtractor for ToyExtractor {
    fn id(&self) -> &str {
        TOY_ID
    }

    fn digest(&self) -> &str {
        &self.digest
    }

    fn feature_dim(&self) -> usize {
        TOY_FEATURE_DIM
    }

    fn extract(&self, images: &Tensor) -> Result<Extracted> {
        let (n, c, h, w) = images.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "toy extractor",
                format!("needs [N, 3, H, W] with H, W divisible by 4, got {:?}", images.shape()),
            ));
        }
        let mut features = DMatrix::zeros(n, TOY_FEATURE_DIM);
        let mut probs = DMatrix::zeros(n, self.num_classes);
        let mut rng = Rng::seed(0);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::new();
            let x = tape.constant(images.slice_batch(start, end)?);
            let (f, logits) = self.forward(&mut tape, x, &Ctx::eval(&mut rng))?;
            for (r, i) in (start..end).enumerate() {
                let fr = &tape.value(f).data()[r * TOY_FEATURE_DIM..(r + 1) * TOY_FEATURE_DIM];
                features.row_mut(i).copy_from_slice(fr);
                let mut row = tape.value(logits).data()[r * self.num_classes..(r + 1) * self.num_classes].to_vec();
                softmax_in_place(&mut row);
                probs.row_mut(i).copy_from_slice(&row);
            }
        }
        Ok(Extracted { features, probs: Some(probs) })
    }
}

pub const ACTIVATION_MAGIC: &[u8; 8] = b"USEGANAC";
pub const ACTIVATION_VERSION: u32 = 1;

/// Writes rows as little-endian f32 after a header carrying the producing
/// extractor's digest (64 hex characters).
pub fn write_activations(path: &Path, rows: &DMatrix<f64>, digest: &str) -> Result<()> {
    let digest = hex::decode(digest)
        .ok()
        .filter(|d| d.len() == 32)
        .ok_or_else(|| Error::InvalidArgument(format!("extractor digest {digest:?} is not 64 hex characters")))?;
    let mut out = Vec::with_capacity(56 + rows.len() * 4);
    out.extend_from_slice(ACTIVATION_MAGIC);
    out.extend_from_slice(&ACTIVATION_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&(rows.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    for row in rows.row_iter() {
        for &v in row.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an activation file; returns the rows and the extractor digest.
pub fn read_activations(path: &Path) -> Result<(DMatrix<f64>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: String| Error::format(path, why);
    if bytes.len() < 56 || &bytes[..8] != ACTIVATION_MAGIC {
        return Err(bad("not an activation file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != ACTIVATION_VERSION {
        return Err(bad(format!("unsupported activation file version {version}")));
    }
    let dims = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let digest = hex::encode(&bytes[24..56]);
    let body = &bytes[56..];
    let expected = dims.checked_mul(count).and_then(|v| v.checked_mul(4));
    if dims == 0 || expected != Some(body.len()) {
        return Err(bad(format!(
            "header promises {count} rows of {dims} values but the body has {} bytes",
            body.len()
        )));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite activation".into()));
    }
    Ok((DMatrix::from_row_slice(count, dims, &values), digest))
}

/// Precomputed activations for a real and a fake set, plus optional class
/// probabilities of the fake set for IS.
#[derive(Clone, Debug)]
pub struct ExternalActivations {
    pub real: DMatrix<f64>,
    pub fake: Extracted,
    pub digest: String,
}

impl ExternalActivations {
    pub fn load(real: &Path, fake: &Path, fake_probs: Option<&Path>) -> Result<Self> {
        let (real_rows, digest) = read_activations(real)?;
        let (fake_rows, fake_digest) = read_activations(fake)?;
        let mismatch = |p: &Path, d: &str| {
            Error::InvalidArgument(format!(
                "{} was produced by extractor {d}, but {} by {digest}",
                p.display(),
                real.display()
            ))
        };
        if fake_digest != digest {
            return Err(mismatch(fake, &fake_digest));
        }
        if real_rows.ncols() != fake_rows.ncols() {
            return Err(Error::shape(
                "external activations",
                format!("real has {} dims, fake has {}", real_rows.ncols(), fake_rows.ncols()),
            ));
        }
        let probs = match fake_probs {
            Some(p) => {
                let (rows, d) = read_activations(p)?;
                if d != digest {
                    return Err(mismatch(p, &d));
                }
                if rows.nrows() != fake_rows.nrows() {
                    return Err(Error::shape(
                        "external activations",
                        format!("{} probability rows for {} fake rows", rows.nrows(), fake_rows.nrows()),
                    ));
                }
                Some(rows)
            }
            None => None,
        };
        Ok(Self { real: real_rows, fake: Extracted { features: fake_rows, probs }, digest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_outputs_are_distributions() {
        let t = ToyExtractor::new(5, 0);
        let x = Tensor::uniform(vec![70, 3, 8, 8], -1.0, 1.0, &mut Rng::seed(1));
        let e = t.extract(&x).unwrap();
        assert_eq!(e.features.shape(), (70, TOY_FEATURE_DIM));
        let p = e.probs.unwrap();
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(t.extract(&Tensor::zeros(vec![1, 3, 6, 6])).is_err());
    }

    #[test]
    fn save_load_preserves_digest_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        let t = ToyExtractor::new(3, 7);
        t.save(&path).unwrap();
        let back = ToyExtractor::load(&path).unwrap();
        assert_eq!(back.digest(), t.digest());
        let x = Tensor::uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut Rng::seed(2));
        assert_eq!(back.extract(&x).unwrap(), t.extract(&x).unwrap());
        assert_ne!(ToyExtractor::new(3, 8).digest(), t.digest());
    }

    #[test]
    fn activation_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 0.25, 0.0, 8.0]);
        let digest = "ab".repeat(32);
        let path = dir.path().join("a.act");
        write_activations(&path, &rows, &digest).unwrap();
        let (back, d) = read_activations(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(d, digest);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(read_activations(&path).is_err());
        assert!(write_activations(&path, &rows, "xyz").is_err());
    }
}
