//! PNG decoding/encoding, bilinear resizing and `[−1, 1]` normalization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, pixels: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

fn decode_reader<R: std::io::BufRead + std::io::Seek>(r: R, path: &Path) -> Result<RgbImage> {
    let bad = |e: png::DecodingError| Error::format(path, format!("undecodable PNG: {e}"));
    let mut decoder = png::Decoder::new(r);
    decoder.set_transformations(Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::format(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    // Rows may be padded to `line_size`; walk them explicitly.
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
    };
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        let row = &data[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            // grayscale is replicated, alpha is dropped
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            img.put(x, y, rgb);
        }
    }
    Ok(img)
}

pub fn decode_png(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_reader(BufReader::new(file), path)
}

pub fn decode_png_bytes(bytes: &[u8]) -> Result<RgbImage> {
    decode_reader(Cursor::new(bytes), Path::new("<memory>"))
}

pub fn encode_png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(ColorType::Rgb);
        enc.set_depth(BitDepth::Eight);
        let mut w = enc.write_header().expect("writing to memory");
        w.write_image_data(&img.pixels).expect("buffer matches header");
    }
    out
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_png_bytes(img)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Bilinear resize of one `h×w` plane (half-pixel centers, edge clamped).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resizes to `side×side` and maps `[0, 255]` to `[−1, 1]`; returns `[3, side, side]`.
pub fn preprocess(img: &RgbImage, side: usize) -> Tensor {
    let plane_len = img.width * img.height;
    let mut data = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        let plane: Vec<f64> = (0..plane_len).map(|i| img.pixels[i * 3 + c] as f64 / 255.0).collect();
        let resized = if img.width == side && img.height == side {
            plane
        } else {
            resize_bilinear(&plane, img.height, img.width, side, side)
        };
        data.extend(resized.into_iter().map(|v| v * 2.0 - 1.0));
    }
    Tensor::new(vec![3, side, side], data).expect("shape matches data")
}

pub fn load_and_preprocess(path: &Path, side: usize) -> Result<Tensor> {
    Ok(preprocess(&decode_png(path)?, side))
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Converts `[3, H, W]` (or `[1, H, W]`) values in `[−1, 1]` back to pixels.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 3 || s[0] == 1) {
        return Err(Error::shape("tensor_to_image", format!("expected [3|1, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = |ch: usize| to_byte(t.data()[(ch.min(c - 1) * h + y) * w + x]);
            img.put(x, y, [v(0), v(1), v(2)]);
        }
    }
    Ok(img)
}

/// Tiles `[N, C, H, W]` into a grid of `ceil(√N)` columns with `pad` pixel gutters.
pub fn image_grid(batch: &Tensor, pad: usize) -> Result<RgbImage> {
    let (n, c, h, w) = batch.dims4()?;
    let cols = grid_columns(n);
    let rows = n.div_ceil(cols);
    let mut out = RgbImage::filled(cols * (w + pad) + pad, rows * (h + pad) + pad, [0, 0, 0]);
    for i in 0..n {
        let tile = tensor_to_image(&batch.slice_batch(i, i + 1)?.reshape(vec![c, h, w])?)?;
        let (ox, oy) = (pad + (i % cols) * (w + pad), pad + (i / cols) * (h + pad));
        for y in 0..h {
            for x in 0..w {
                out.put(ox + x, oy + y, tile.get(x, y));
            }
        }
    }
    Ok(out)
}

pub fn grid_columns(n: usize) -> usize {
    let mut cols = (n as f64).sqrt() as usize;
    while cols * cols < n {
        cols += 1;
    }
    cols.max(1)
}
