//! End-to-end commands: train (with resume), sample, evaluate and the
//! four-variant ablation. Every output lands under the run's output
//! directory; inputs are never modified.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{resolve_output, EvalConfig, RunConfig};
use crate::data::image::{image_grid, write_png};
use crate::data::synthetic::NUM_CLASSES;
use crate::data::{ImageSet, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::extractor::{ExternalActivations, EXTERNAL_ID, TOY_ID};
use crate::metrics::{compare, evaluate, real_noise_floor, FeatureExtractor, MetricReport, ToyConfig, ToyExtractor};
use crate::model::Variant;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{fit, GanState, StepLosses};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "losses.tsv";
pub const LOSS_HEADER: &str = "step\tL_D\tL_G";
pub const CONFIG_FILE: &str = "config.toml";
pub const SAMPLE_DIR: &str = "samples";
pub const EXTRACTOR_DIR: &str = "extractors";
/// Gutter between tiles of a sample grid, in pixels.
pub const GRID_PAD: usize = 2;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Fixed latents for sample grids.
pub fn sample_latents(latent_dim: usize, n: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![n, latent_dim], 1.0, &mut Rng::derive(seed, "sample-latents", 0))
}

/// Loads one split of the dataset at `side`, optionally keeping the first `cap` items.
pub fn load_split(dir: &Path, split: Split, side: usize, cap: Option<usize>) -> Result<ImageSet> {
    let mut manifest = Manifest::read(dir)?;
    if let Some(cap) = cap {
        let mut kept = 0;
        manifest.entries.retain(|e| {
            let keep = e.split != split || kept < cap;
            kept += usize::from(e.split == split);
            keep
        });
    }
    ImageSet::load(dir, &manifest, split, side)
}

pub struct TrainOutcome {
    pub state: GanState,
    pub dir: PathBuf,
    pub last: Option<StepLosses>,
}

fn render_grid(state: &mut GanState, z: &Tensor, path: &Path) -> Result<()> {
    let images = state.generator.generate(z)?;
    write_png(path, &image_grid(&images, GRID_PAD)?)
}

/// Keeps the header and the first `steps` lines of a loss log.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.lines().take(1 + steps as usize).map(|l| format!("{l}\n")).collect();
    if kept.lines().count() != 1 + steps as usize {
        return Err(Error::format(path, format!("loss log has fewer than {steps} steps to resume from")));
    }
    write_file(path, kept)
}

/// Trains to `cfg.train.steps`, writing the loss log, sample grids and
/// checkpoints. With `resume`, continues from the run's checkpoint.
pub fn train(cfg: &RunConfig, resume: bool, mut progress: impl FnMut(&StepLosses)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    let ck_path = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join(LOSS_FILE);
    let data = load_split(&cfg.data.dir, cfg.data.split, cfg.model.image_side, None)?;
    if data.len() < cfg.train.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} exceeds the {} images of the {} split",
            cfg.train.batch_size,
            data.len(),
            cfg.data.split
        )));
    }
    create_dir(&dir.join(SAMPLE_DIR))?;
    let mut state = if resume {
        let state = checkpoint::load_matching(&ck_path, &cfg.model)?;
        truncate_log(&log_path, state.step())?;
        state
    } else {
        write_file(&log_path, format!("{LOSS_HEADER}\n"))?;
        GanState::new(&cfg.model, cfg.train.adam_g, cfg.train.adam_d)?
    };
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;

    let file = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let t = &cfg.train;
    let z = sample_latents(cfg.model.latent_dim, t.sample_count.max(1), cfg.model.seed);
    let mut last = None;
    fit(&mut state, &data, t.batch_size, cfg.model.seed, t.steps, |state, l| {
        writeln!(log, "{}\t{}\t{}", l.step, l.d.total, l.g.total).map_err(|e| Error::io(&log_path, e))?;
        if t.sample_every > 0 && l.step % t.sample_every == 0 {
            render_grid(state, &z, &dir.join(SAMPLE_DIR).join(format!("step_{:06}.png", l.step)))?;
        }
        if l.step == t.steps || (t.checkpoint_every > 0 && l.step % t.checkpoint_every == 0) {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoint::save(state, &ck_path)?;
        }
        progress(l);
        last = Some(*l);
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome { state, dir, last })
}

/// Writes an `n`-image grid from fixed latents; returns the file path.
pub fn sample(checkpoint_path: &Path, n: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut state = checkpoint::load(checkpoint_path)?;
    let out = resolve_output(out);
    create_dir(&out)?;
    let path = out.join(format!("samples_seed{seed}_n{n}.png"));
    let z = sample_latents(state.config().latent_dim, n, seed);
    render_grid(&mut state, &z, &path)?;
    Ok(path)
}

/// Trains (or reuses a cached) toy extractor on the train split of `data_dir`.
pub fn toy_extractor(data_dir: &Path, side: usize, cfg: &ToyConfig, cache: &Path) -> Result<ToyExtractor> {
    let manifest = Manifest::read(data_dir)?;
    let mut h = Sha256::new();
    h.update(manifest.digest().as_bytes());
    h.update((side as u64).to_le_bytes());
    h.update(serde_json::to_vec(cfg).expect("toy config serializes"));
    let key = &hex::encode(h.finalize())[..16];
    let path = cache.join(format!("{TOY_ID}-{key}.json"));
    if path.exists() {
        return ToyExtractor::load(&path);
    }
    let train = ImageSet::load(data_dir, &manifest, Split::Train, side)?;
    let classes = train.labels.iter().max().map_or(NUM_CLASSES, |&m| (m + 1).max(NUM_CLASSES));
    let model = ToyExtractor::train(&train, classes, cfg)?;
    create_dir(cache)?;
    model.save(&path)?;
    Ok(model)
}

/// Evaluates a checkpoint against the train split of `data_dir`.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    data_dir: &Path,
    extractor: &str,
    eval: &EvalConfig,
    seed: u64,
    out: &Path,
) -> Result<MetricReport> {
    if extractor != TOY_ID {
        return Err(unknown_extractor(extractor));
    }
    let mut state = checkpoint::load(checkpoint_path)?;
    let side = state.config().image_side;
    let out = resolve_output(out);
    let ex = toy_extractor(data_dir, side, &eval.toy, &out.join(EXTRACTOR_DIR))?;
    let real = load_split(data_dir, Split::Train, side, eval.n_real)?.all()?;
    let mut report = evaluate(&mut state.generator, &real, &ex, eval.n_samples, seed, eval.splits)?;
    report.noise_floor = Some(real_noise_floor(&real, &ex, seed)?);
    create_dir(&out)?;
    write_file(&out.join(format!("report_seed{seed}.json")), report.to_json())?;
    Ok(report)
}

pub fn unknown_extractor(id: &str) -> Error {
    Error::InvalidArgument(format!("unknown extractor {id:?}; available extractors: {TOY_ID}, {EXTERNAL_ID}"))
}

/// FID (and IS when probabilities are given) from precomputed activations.
pub fn evaluate_external(real: &Path, fake: &Path, probs: Option<&Path>, splits: usize) -> Result<MetricReport> {
    let ext = ExternalActivations::load(real, fake, probs)?;
    compare(EXTERNAL_ID, &ext.digest, &ext.real, &ext.fake, splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub fids: Vec<f64>,
    pub is_means: Vec<f64>,
    pub median_fid: f64,
    pub median_is: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub extractor: String,
    pub extractor_digest: String,
}

/// Reference scores quoted for context; never compared against.
pub const REFERENCE_NOTE: &str =
    "Published full-scale reference (Inception-v3 backbone, real anime faces): USE-CMHSA-GAN FID 53.74, IS 2.85. \
Toy-extractor scores above are comparable only with each other.";

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "Ablation: {} steps, seeds [{seeds}], extractor {}", self.steps, self.extractor);
        let _ = writeln!(s, "{:<15} {:>12} {:>12}  FID per seed", "variant", "median FID", "median IS");
        for r in &self.rows {
            let per = r.fids.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "{:<15} {:>12.3} {:>12.3}  {per}", r.variant.name(), r.median_fid, r.median_is);
        }
        let _ = writeln!(s, "\n* {REFERENCE_NOTE}");
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tmedian_fid\tmedian_is\tfids\tis_means\tsteps\tseeds\n");
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        for r in &self.rows {
            let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{seeds}",
                r.variant.name(),
                r.median_fid,
                r.median_is,
                join(&r.fids),
                join(&r.is_means),
                self.steps
            );
        }
        s
    }
}

/// Output directory of one ablation run.
pub fn ablation_run_config(cfg: &RunConfig, variant: Variant, seed: u64) -> RunConfig {
    let mut run = cfg.clone();
    run.model.variant = variant;
    run.model.seed = seed;
    run.out_dir = cfg.out_dir.join("ablation").join(variant.slug()).join(format!("seed{seed}"));
    run
}

/// Trains and evaluates all four variants over every seed, sequentially.
pub fn ablate(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    let out = cfg.output_dir();
    let ex = toy_extractor(&cfg.data.dir, cfg.model.image_side, &cfg.eval.toy, &out.join(EXTRACTOR_DIR))?;
    let real = load_split(&cfg.data.dir, Split::Train, cfg.model.image_side, cfg.eval.n_real)?.all()?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let (mut fids, mut is_means) = (Vec::new(), Vec::new());
        for &seed in &cfg.ablation.seeds {
            progress(&format!("{variant} seed {seed}: training {} steps", cfg.train.steps));
            let run = ablation_run_config(cfg, variant, seed);
            let mut outcome = train(&run, false, |_| {})?;
            let report = evaluate(&mut outcome.state.generator, &real, &ex, cfg.eval.n_samples, seed, cfg.eval.splits)?;
            write_file(&outcome.dir.join(format!("report_seed{seed}.json")), report.to_json())?;
            progress(&format!("{variant} seed {seed}: FID {:.3}", report.fid));
            fids.push(report.fid);
            is_means.push(report.is_mean.unwrap_or(f64::NAN));
        }
        rows.push(AblationRow { variant, median_fid: median(&fids), median_is: median(&is_means), fids, is_means });
    }
    let report = AblationReport {
        rows,
        seeds: cfg.ablation.seeds.clone(),
        steps: cfg.train.steps,
        extractor: ex.id().to_string(),
        extractor_digest: ex.digest().to_string(),
    };
    create_dir(&out)?;
    write_file(&out.join("ablation.txt"), report.to_text())?;
    write_file(&out.join("ablation.tsv"), report.to_tsv())?;
    write_file(&out.join("ablation.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

/// Parses a loss log into `(step, L_D, L_G)` rows.
pub fn read_losses(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(Error::format(path, format!("missing header {LOSS_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("line {}: expected step, L_D, L_G", i + 2));
            let mut f = line.split('\t');
            let step = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let d = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let g = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            Ok((step, d, g))
        })
        .collect()
}

/// Opens `path` for writing, creating parent directories.
pub fn create_file(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn report_rows_follow_variant_order() {
        let rows = Variant::ALL
            .iter()
            .map(|&variant| AblationRow {
                variant,
                fids: vec![1.0],
                is_means: vec![1.5],
                median_fid: 1.0,
                median_is: 1.5,
            })
            .collect();
        let r = AblationReport {
            rows,
            seeds: vec![0],
            steps: 1,
            extractor: TOY_ID.into(),
            extractor_digest: String::new(),
        };
        let text = r.to_text();
        let pos: Vec<usize> = Variant::ALL.iter().map(|v| text.find(&format!("\n{:<15}", v.name())).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(text.contains("53.74") && text.contains("2.85"));
        assert_eq!(r.to_tsv().lines().count(), 5);
    }
}
