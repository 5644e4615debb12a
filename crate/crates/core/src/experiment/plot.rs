//! Minimal raster plots (no text rendering): axes, light gridlines and one
//! polyline per series.

use image::{Rgb, RgbImage};

use crate::cgan::LossHistory;

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: i64 = 30;

pub const D_COLOR: [u8; 3] = [200, 40, 40];
pub const G_COLOR: [u8; 3] = [40, 80, 200];

/// Discriminator (red) and generator (blue) loss against step, both on a
/// shared y axis starting at zero.
pub fn loss_curve(history: &LossHistory) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, y0, x1, y1) = (MARGIN, H as i64 - MARGIN, W as i64 - MARGIN, MARGIN);
    let ymax = history
        .records
        .iter()
        .flat_map(|r| [r.d_loss, r.g_loss])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    for k in 1..5 {
        let y = y0 + (y1 - y0) * k / 5;
        line(&mut img, (x0, y), (x1, y), [225, 225, 225]);
    }
    line(&mut img, (x0, y0), (x1, y0), [0, 0, 0]);
    line(&mut img, (x0, y0), (x0, y1), [0, 0, 0]);

    let n = history.records.len();
    let to_px = |i: usize, v: f64| {
        let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let fy = (v / ymax).clamp(0.0, 1.0);
        (
            x0 + (fx * (x1 - x0) as f64).round() as i64,
            y0 + (fy * (y1 - y0) as f64).round() as i64,
        )
    };
    for (pick, color) in [(0usize, D_COLOR), (1, G_COLOR)] {
        let pts: Vec<(i64, i64)> = history
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| to_px(i, if pick == 0 { r.d_loss } else { r.g_loss }))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        if let [p] = pts[..] {
            line(&mut img, p, p, color);
        }
    }
    img
}

/// Place images left to right with a `gap`-pixel white border.
pub fn hstack(imgs: &[&RgbImage], gap: u32) -> RgbImage {
    let w: u32 = imgs.iter().map(|i| i.width()).sum::<u32>() + gap * (imgs.len() as u32 + 1);
    let h = imgs.iter().map(|i| i.height()).max().unwrap_or(0) + 2 * gap;
    let mut out = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mut x = gap;
    for img in imgs {
        image::imageops::replace(&mut out, *img, x as i64, gap as i64);
        x += img.width() + gap;
    }
    out
}

/// Bresenham line, clipped to the image.
fn line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (xe, ye): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((xe - x).abs(), -(ye - y).abs());
    let (sx, sy) = (if x < xe { 1 } else { -1 }, if y < ye { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if (0..img.width() as i64).contains(&x) && (0..img.height() as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
        if x == xe && y == ye {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgan::LossRecord;

    #[test]
    fn curve_draws_both_series() {
        let h = LossHistory {
            records: (0..10)
                .map(|i| LossRecord {
                    step: i,
                    d_loss: 1.4 - 0.05 * i as f64,
                    g_loss: 0.7 + 0.1 * i as f64,
                })
                .collect(),
        };
        let img = loss_curve(&h);
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|p| p.0 == D_COLOR));
        assert!(img.pixels().any(|p| p.0 == G_COLOR));
        assert_eq!(loss_curve(&h), img);
    }

    #[test]
    fn empty_history_still_renders_axes() {
        let img = loss_curve(&LossHistory::default());
        assert_eq!(img.get_pixel(MARGIN as u32, (H as i64 - MARGIN) as u32).0, [0, 0, 0]);
    }

    #[test]
    fn hstack_places_images_side_by_side() {
        let a = RgbImage::from_pixel(2, 2, Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(3, 1, Rgb([4, 5, 6]));
        let s = hstack(&[&a, &b], 1);
        assert_eq!(s.dimensions(), (8, 4));
        assert_eq!(s.get_pixel(1, 1).0, [1, 2, 3]);
        assert_eq!(s.get_pixel(4, 1).0, [4, 5, 6]);
        assert_eq!(s.get_pixel(4, 2).0, [255, 255, 255]);
    }
}
