//! Conversions between 8-bit RGB images and the [-1, 1] float tensors the
//! networks consume.

use image::{imageops::FilterType, Rgb, RgbImage};
use ndarray::{Array3, Array4, ArrayView3, Axis};

/// Bilinear (triangle-filter) resize.
pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    image::imageops::resize(img, width, height, FilterType::Triangle)
}

/// HWC u8 -> CHW f64 scaled to [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut t = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[[c, y as usize, x as usize]] = 2.0 * p[c] as f64 / 255.0 - 1.0;
        }
    }
    t
}

/// CHW f64 in [-1, 1] -> u8 RGB, rounding and clamping.
pub fn tensor_to_image(t: ArrayView3<f64>) -> RgbImage {
    let (_, h, w) = t.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = (t[[c, y as usize, x as usize]] + 1.0) * 0.5 * 255.0;
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Stack images into an `(N, 3, H, W)` batch.
pub fn batch_from_images<'a>(imgs: impl IntoIterator<Item = &'a RgbImage>) -> Array4<f64> {
    let views: Vec<Array3<f64>> = imgs.into_iter().map(image_to_tensor).collect();
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::stack(Axis(0), &refs).expect("images in a batch share dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact_for_u8() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([(x * 50) as u8, (y * 60) as u8, ((x + y) * 17) as u8]));
        let back = tensor_to_image(image_to_tensor(&img).view());
        assert_eq!(img, back);
    }

    #[test]
    fn endpoints_map_to_unit_range() {
        let img = RgbImage::from_fn(1, 2, |_, y| if y == 0 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let t = image_to_tensor(&img);
        assert_eq!(t[[0, 0, 0]], -1.0);
        assert_eq!(t[[2, 1, 0]], 1.0);
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = RgbImage::from_pixel(96, 96, Rgb([10, 200, 30]));
        let r = resize_bilinear(&img, 64, 64);
        assert_eq!(r.dimensions(), (64, 64));
        assert!(r.pixels().all(|p| *p == Rgb([10, 200, 30])));
    }
}
