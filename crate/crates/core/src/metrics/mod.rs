//! FID and Inception Score over a pluggable extractor.

pub mod extractor;
pub mod inception;
pub mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Generator;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use extractor::{ExternalActivations, Extracted, FeatureExtractor, ToyConfig, ToyExtractor};
pub use inception::{inception_score, DEFAULT_SPLITS};
pub use stats::{frechet_distance, sqrtm_psd, GaussianStats};

pub const MIN_EVAL_SAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor: String,
    pub extractor_digest: String,
    pub fid: f64,
    /// Absent when the extractor provides no class probabilities.
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    pub n_real: usize,
    pub n_fake: usize,
    pub is_splits: usize,
    /// FID between two random halves of the real set, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_floor: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Builds a report from extracted real and fake activations.
pub fn compare(
    extractor: &str,
    digest: &str,
    real: &nalgebra::DMatrix<f64>,
    fake: &Extracted,
    splits: usize,
) -> Result<MetricReport> {
    let fid = frechet_distance(&GaussianStats::from_features(real)?, &GaussianStats::from_features(&fake.features)?)?;
    let is = fake.probs.as_ref().map(|p| inception_score(p, splits)).transpose()?;
    Ok(MetricReport {
        extractor: extractor.to_string(),
        extractor_digest: digest.to_string(),
        fid,
        is_mean: is.map(|s| s.0),
        is_std: is.map(|s| s.1),
        n_real: real.nrows(),
        n_fake: fake.features.nrows(),
        is_splits: splits,
        noise_floor: None,
    })
}

/// Latents used for evaluation under `seed`.
pub fn eval_latents(latent_dim: usize, n: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![n, latent_dim], 1.0, &mut Rng::derive(seed, "eval-latents", 0))
}

/// Generates `n` images in evaluation mode, in fixed-size chunks.
pub fn generate_images(g: &mut Generator, z: &Tensor) -> Result<Tensor> {
    let n = z.shape()[0];
    let parts = (0..n)
        .step_by(MIN_EVAL_SAMPLES)
        .map(|s| g.generate(&z.slice_batch(s, (s + MIN_EVAL_SAMPLES).min(n))?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts)
}

/// FID/IS of `n_samples` generated images against `real`.
pub fn evaluate(
    g: &mut Generator,
    real: &Tensor,
    extractor: &dyn FeatureExtractor,
    n_samples: usize,
    seed: u64,
    splits: usize,
) -> Result<MetricReport> {
    if n_samples < MIN_EVAL_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "evaluation needs at least {MIN_EVAL_SAMPLES} samples, got {n_samples}"
        )));
    }
    let (_, c, h, w) = real.dims4()?;
    let cfg = g.config();
    if c != cfg.image_channels || h != cfg.image_side || w != cfg.image_side {
        return Err(Error::shape(
            "evaluate",
            format!(
                "real images {:?} do not match generator output [*, {}, {s}, {s}]",
                real.shape(),
                cfg.image_channels,
                s = cfg.image_side
            ),
        ));
    }
    let z = eval_latents(cfg.latent_dim, n_samples, seed);
    let fakes = generate_images(g, &z)?;
    let real_feats = extractor.extract(real)?.features;
    let fake = extractor.extract(&fakes)?;
    compare(extractor.id(), extractor.digest(), &real_feats, &fake, splits)
}

/// FID between two disjoint halves of `real`, shuffled by `seed`: the
/// dataset's noise floor under `extractor`.
pub fn real_noise_floor(real: &Tensor, extractor: &dyn FeatureExtractor, seed: u64) -> Result<f64> {
    let n = real.shape()[0];
    if n < 4 {
        return Err(Error::InvalidArgument(format!("noise floor needs at least 4 images, got {n}")));
    }
    let feats = extractor.extract(real)?.features;
    let order = crate::data::epoch_order(n, seed, 0);
    let half = n / 2;
    let pick = |idx: &[usize]| nalgebra::DMatrix::from_fn(idx.len(), feats.ncols(), |r, c| feats[(idx[r], c)]);
    let a = GaussianStats::from_features(&pick(&order[..half]))?;
    let b = GaussianStats::from_features(&pick(&order[half..2 * half]))?;
    frechet_distance(&a, &b)
}

/// Per-pixel standard deviation across the batch, averaged over pixels.
/// Near zero when every latent yields the same image (mode collapse).
pub fn batch_diversity(images: &Tensor) -> Result<f64> {
    let (n, c, h, w) = images.dims4()?;
    if n < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two images".into()));
    }
    let len = c * h * w;
    let data = images.data();
    let total: f64 = (0..len)
        .map(|p| {
            let mean = (0..n).map(|i| data[i * len + p]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (data[i * len + p] - mean).powi(2)).sum::<f64>() / n as f64;
            var.sqrt()
        })
        .sum();
    Ok(total / len as f64)
}
