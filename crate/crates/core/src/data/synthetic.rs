//! Procedural cartoon faces: background, hair, face ellipse and two eyes.
//! The class label is the hair-color bucket, assigned round-robin.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::{write_png, RgbImage};
use super::manifest::{split_dataset, Entry, Manifest, Split, MIN_SPLIT_ITEMS};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NUM_CLASSES: usize = 8;
pub const SYNTHETIC_SIDE: usize = 64;
pub const IMAGE_DIR: &str = "images";

/// Base hair colors, one per class.
pub const HAIR_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [30, 30, 35],
    [235, 210, 120],
    [200, 50, 40],
    [60, 90, 200],
    [240, 130, 190],
    [70, 160, 80],
    [150, 90, 200],
    [230, 230, 235],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Per-image drawing parameters, in a 64×64 coordinate frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub label: usize,
    pub background: [u8; 3],
    pub hair_color: [u8; 3],
    pub skin: [u8; 3],
    pub eye_color: [u8; 3],
    pub hair: Ellipse,
    pub face: Ellipse,
    pub eyes: [(f64, f64); 2],
    pub eye_radius: f64,
}

fn jitter(rng: &mut Rng, base: [u8; 3], amount: f64) -> [u8; 3] {
    base.map(|c| (c as f64 + rng.uniform_range(-amount, amount)).round().clamp(0.0, 255.0) as u8)
}

impl FaceParams {
    pub fn sample(seed: u64, index: u64) -> Self {
        let mut rng = Rng::derive(seed, "synthetic-face", index);
        let label = (index % NUM_CLASSES as u64) as usize;
        let background = [0; 3].map(|_| rng.uniform_range(90.0, 250.0).round() as u8);
        let hair_color = jitter(&mut rng, HAIR_PALETTE[label], 18.0);
        let skin = jitter(&mut rng, [250, 220, 195], 12.0);
        let eye_color = [0; 3].map(|_| rng.uniform_range(0.0, 200.0).round() as u8);
        let face = Ellipse {
            cx: 32.0 + rng.uniform_range(-3.0, 3.0),
            cy: 36.0 + rng.uniform_range(-2.0, 3.0),
            rx: rng.uniform_range(13.0, 17.0),
            ry: rng.uniform_range(15.0, 19.0),
        };
        let hair = Ellipse {
            cx: face.cx,
            cy: face.cy - rng.uniform_range(4.0, 8.0),
            rx: face.rx + rng.uniform_range(3.0, 7.0),
            ry: face.ry + rng.uniform_range(2.0, 5.0),
        };
        let spread = face.rx * rng.uniform_range(0.3, 0.45);
        let ey = face.cy - face.ry * rng.uniform_range(0.0, 0.25);
        Self {
            label,
            background,
            hair_color,
            skin,
            eye_color,
            hair,
            face,
            eyes: [(face.cx - spread, ey), (face.cx + spread, ey)],
            eye_radius: rng.uniform_range(2.0, 3.5),
        }
    }

    /// Rasterizes at `side×side`, sampling each pixel center.
    pub fn render(&self, side: usize) -> RgbImage {
        let scale = SYNTHETIC_SIDE as f64 / side as f64;
        let mut img = RgbImage::filled(side, side, self.background);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = ((x as f64 + 0.5) * scale, (y as f64 + 0.5) * scale);
                let in_eye = self
                    .eyes
                    .iter()
                    .any(|&(ex, ey)| (px - ex).powi(2) + (py - ey).powi(2) <= self.eye_radius * self.eye_radius);
                let color = if in_eye {
                    self.eye_color
                } else if self.face.contains(px, py) {
                    self.skin
                } else if self.hair.contains(px, py) {
                    self.hair_color
                } else {
                    continue;
                };
                img.put(x, y, color);
            }
        }
        img
    }
}

pub fn image_id(index: usize) -> String {
    format!("face_{index:06}")
}

/// Renders `n` faces into `out/images/` and writes a split manifest.
///
/// With fewer than ten images there is nothing to split, so every entry is
/// tagged `train`.
pub fn generate_synthetic_dataset(out: &Path, n: usize, seed: u64) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset size must be at least 1".into()));
    }
    let images = out.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = Manifest::default();
    for i in 0..n {
        let params = FaceParams::sample(seed, i as u64);
        let id = image_id(i);
        let rel = format!("{IMAGE_DIR}/{id}.png");
        write_png(&out.join(&rel), &params.render(SYNTHETIC_SIDE))?;
        manifest.entries.push(Entry { id, path: rel, label: params.label, split: Split::Train });
    }
    if n >= MIN_SPLIT_ITEMS {
        manifest = split_dataset(manifest, seed)?;
    }
    manifest.write(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(FaceParams::sample(3, 17), FaceParams::sample(3, 17));
        assert_ne!(FaceParams::sample(3, 17), FaceParams::sample(4, 17));
        let a = FaceParams::sample(3, 2).render(64);
        assert_eq!(a, FaceParams::sample(3, 2).render(64));
    }

    #[test]
    fn eyes_inside_face() {
        for i in 0..2000 {
            let p = FaceParams::sample(11, i);
            for &(x, y) in &p.eyes {
                assert!(p.face.contains(x, y), "image {i}: eye ({x}, {y}) outside {:?}", p.face);
            }
        }
    }

    #[test]
    fn labels_are_round_robin_balanced() {
        let mut counts = [0usize; NUM_CLASSES];
        for i in 0..1000 {
            counts[FaceParams::sample(0, i).label] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }

    #[test]
    fn rendered_face_has_expected_colors() {
        let p = FaceParams::sample(1, 0);
        let img = p.render(64);
        let (ex, ey) = p.eyes[0];
        assert_eq!(img.get(ex as usize, ey as usize), p.eye_color);
        assert_eq!(img.get(0, 63), p.background);
        let below_eyes = (p.face.cx as usize, (p.face.cy + p.face.ry * 0.6) as usize);
        assert_eq!(img.get(below_eyes.0, below_eyes.1), p.skin);
    }
}
