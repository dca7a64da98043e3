//! Loss-curve rendering to PNG, without a plotting dependency.

use std::path::Path;

use crate::data::image::{write_png, RgbImage};
use crate::error::{Error, Result};

pub const D_COLOR: [u8; 3] = [200, 40, 40];
pub const G_COLOR: [u8; 3] = [40, 80, 200];
const AXIS: [u8; 3] = [60, 60, 60];
const GRID: [u8; 3] = [225, 225, 225];
const MARGIN: usize = 24;

/// Moving average over a trailing window of `w` points.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), rgb: [u8; 3]) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.put(x as usize, y as usize, rgb);
        }
    }
}

/// Plots L_D (red) and L_G (blue) against step, smoothed over `window` steps.
pub fn loss_plot(rows: &[(u64, f64, f64)], width: usize, height: usize, window: usize) -> Result<RgbImage> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("loss log has no steps to plot".into()));
    }
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::InvalidArgument(format!("plot must exceed {0}x{0} pixels", 2 * MARGIN)));
    }
    let d = smooth(&rows.iter().map(|r| r.1).collect::<Vec<_>>(), window);
    let g = smooth(&rows.iter().map(|r| r.2).collect::<Vec<_>>(), window);
    let (lo, hi) = d.iter().chain(&g).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("loss log contains non-finite values".into()));
    }
    let (lo, hi) = (lo.min(0.0), if hi > lo { hi } else { lo + 1.0 });
    let (s0, s1) = (rows[0].0 as f64, rows[rows.len() - 1].0 as f64);
    let (pw, ph) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let px = |s: u64| MARGIN as f64 + if s1 > s0 { (s as f64 - s0) / (s1 - s0) * pw } else { 0.0 };
    let py = |v: f64| MARGIN as f64 + (1.0 - (v - lo) / (hi - lo)) * ph;

    let mut img = RgbImage::filled(width, height, [255, 255, 255]);
    for k in 1..4 {
        let y = MARGIN as f64 + ph * k as f64 / 4.0;
        line(&mut img, (MARGIN as f64, y), (MARGIN as f64 + pw, y), GRID);
    }
    let (left, bottom) = (MARGIN as f64, MARGIN as f64 + ph);
    line(&mut img, (left, MARGIN as f64), (left, bottom), AXIS);
    line(&mut img, (left, bottom), (left + pw, bottom), AXIS);
    for (series, color) in [(&d, D_COLOR), (&g, G_COLOR)] {
        for (i, w) in series.windows(2).enumerate() {
            line(&mut img, (px(rows[i].0), py(w[0])), (px(rows[i + 1].0), py(w[1])), color);
        }
        if series.len() == 1 {
            line(&mut img, (px(rows[0].0), py(series[0])), (px(rows[0].0) + 1.0, py(series[0])), color);
        }
    }
    Ok(img)
}

pub fn write_loss_plot(rows: &[(u64, f64, f64)], path: &Path, window: usize) -> Result<()> {
    write_png(path, &loss_plot(rows, 640, 360, window)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smooth(&[2.0, 4.0], 1), vec![2.0, 4.0]);
    }

    #[test]
    fn both_series_are_drawn() {
        let rows: Vec<_> = (1..=50).map(|s| (s, 1.4 - s as f64 * 0.01, 0.7 + s as f64 * 0.01)).collect();
        let img = loss_plot(&rows, 200, 120, 5).unwrap();
        let count = |c| img.pixels.chunks(3).filter(|p| *p == c).count();
        assert!(count(&D_COLOR[..]) > 50 && count(&G_COLOR[..]) > 50);
    }

    #[test]
    fn empty_log_is_rejected() {
        assert!(loss_plot(&[], 200, 120, 1).is_err());
    }
}
