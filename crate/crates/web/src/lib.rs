//! Browser bindings: synthetic faces, CMHSA attention maps over them, and
//! the Fréchet distance between two 2-D Gaussians.

use nalgebra::{DMatrix, DVector};
use usegan_core::attention::{AttentionConfig, CmhsaBlock};
use usegan_core::data::image::preprocess;
use usegan_core::data::synthetic::FaceParams;
use usegan_core::metrics::{frechet_distance, GaussianStats};
use usegan_core::nn::Ctx;
use usegan_core::{Mode, ParamStore, Result, Rng, Tape};
use wasm_bindgen::prelude::*;

fn js(e: usegan_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels of face `index` from dataset seed `seed`, `side×side`.
#[wasm_bindgen]
pub fn render_face(seed: u64, index: u64, side: usize) -> Vec<u8> {
    let img = FaceParams::sample(seed, index).render(side.max(1));
    (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .flat_map(|(x, y)| {
            let [r, g, b] = img.get(x, y);
            [r, g, b, 255]
        })
        .collect()
}

fn attention_row(seed: u64, index: u64, side: usize, heads: usize, gain: f64, query: usize) -> Result<Vec<f64>> {
    let x = preprocess(&FaceParams::sample(seed, index).render(side), side).reshape(vec![1, 3, side, side])?;
    let mut store = ParamStore::new();
    let block =
        CmhsaBlock::new(&mut store, "demo", AttentionConfig::new(3, heads, 0.0)?, &mut Rng::seed(seed ^ 0x5eed));
    for p in store.params_mut() {
        p.value = p.value.map(|v| v * gain);
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut rng = Rng::seed(0);
    let mut ctx = Ctx { mode: Mode::Eval, rng: &mut rng, trainable: false };
    let trace = block.trace(&mut tape, &store, xv, &mut ctx)?;
    // alpha: [1, heads, L, L]; average the query's row over heads.
    let l = side * side;
    let alpha = tape.value(trace.alpha).data();
    Ok((0..l).map(|j| (0..heads).map(|h| alpha[(h * l + query) * l + j]).sum::<f64>() / heads as f64).collect())
}

/// Attention weights from pixel (`qx`, `qy`) to every pixel of a face, for a
/// randomly initialized CMHSA block with `heads` ∈ {1, 3} and weights scaled by `gain`.
#[wasm_bindgen]
pub fn attention_map(
    seed: u64,
    index: u64,
    side: usize,
    heads: usize,
    gain: f64,
    qx: usize,
    qy: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    if qx >= side || qy >= side {
        return Err(JsError::new("query pixel lies outside the image"));
    }
    attention_row(seed, index, side, heads, gain, qy * side + qx).map_err(js)
}

/// FID between N(m1, diag(v1) with correlation r1) and N(m2, …) in two dimensions.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn frechet_2d(
    m1x: f64,
    m1y: f64,
    v1x: f64,
    v1y: f64,
    r1: f64,
    m2x: f64,
    m2y: f64,
    v2x: f64,
    v2y: f64,
    r2: f64,
) -> std::result::Result<f64, JsError> {
    let stats = |mx: f64, my: f64, vx: f64, vy: f64, r: f64| {
        let c = r * (vx * vy).sqrt();
        GaussianStats::new(DVector::from_vec(vec![mx, my]), DMatrix::from_row_slice(2, 2, &[vx, c, c, vy]))
    };
    let a = stats(m1x, m1y, v1x, v1y, r1).map_err(js)?;
    let b = stats(m2x, m2y, v2x, v2y, r2).map_err(js)?;
    frechet_distance(&a, &b).map_err(js)
}
