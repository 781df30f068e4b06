//! Grayscale base image with the truth contour in green and the predicted
//! contour in red, PNG-encoded.

use std::path::Path;

use image::{Rgb, RgbImage};
use strokeforge::geometry::LesionMask;
use strokeforge::tensor::NdArray;

use crate::error::{CliError, CliResult};

pub const TRUTH_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const PREDICTION_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
/// Where both contours meet.
pub const SHARED_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

/// Foreground pixels with a 4-neighbour in the background or on the image
/// edge.
pub fn contour(mask: &LesionMask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
        }
    }
    out
}

/// `base` is `[H,W]`, linearly mapped from its own range onto 0..=255; a
/// constant base renders black.
pub fn render_overlay(base: &NdArray, truth: &LesionMask, pred: &LesionMask) -> CliResult<RgbImage> {
    let shape = base.shape();
    let (h, w) = match shape {
        [h, w] => (*h, *w),
        _ => return Err(CliError::validation(format!("overlay base must be [H,W], got {shape:?}"))),
    };
    for (name, m) in [("truth", truth), ("prediction", pred)] {
        if (m.height(), m.width()) != (h, w) {
            return Err(CliError::validation(format!(
                "{name} mask is {}x{}, base image is {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    let lo = base.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = base.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (t, p) = (contour(truth), contour(pred));
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = (((base.data()[i] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
            let px = match (t[i], p[i]) {
                (true, true) => SHARED_COLOR,
                (true, false) => TRUTH_COLOR,
                (false, true) => PREDICTION_COLOR,
                (false, false) => Rgb([g, g, g]),
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

pub fn emit_overlay(path: &Path, base: &NdArray, truth: &LesionMask, pred: &LesionMask) -> CliResult<()> {
    render_overlay(base, truth, pred)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(n: usize, r: f64) -> LesionMask {
        let c = (n as f64 - 1.0) / 2.0;
        let v = (0..n * n)
            .map(|i| ((i / n) as f64 - c).hypot((i % n) as f64 - c) <= r)
            .collect();
        LesionMask::new(n, n, v).unwrap()
    }

    fn ramp(h: usize, w: usize) -> NdArray {
        NdArray::from_vec(&[h, w], (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn empty_masks_give_pure_grayscale() {
        let empty = LesionMask::new(6, 9, vec![false; 54]).unwrap();
        let img = render_overlay(&ramp(6, 9), &empty, &empty).unwrap();
        assert!(img.pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
        assert_eq!(img.get_pixel(0, 0)[0], 0);
        assert_eq!(img.get_pixel(8, 5)[0], 255);
    }

    #[test]
    fn truth_boundary_carries_truth_color() {
        let truth = disk(11, 3.0);
        let empty = LesionMask::new(11, 11, vec![false; 121]).unwrap();
        let img = render_overlay(&ramp(11, 11), &truth, &empty).unwrap();
        // Row 5 crosses the disk from x = 2 to x = 8.
        assert_eq!(*img.get_pixel(2, 5), TRUTH_COLOR);
        assert_eq!(*img.get_pixel(8, 5), TRUTH_COLOR);
        let inside = img.get_pixel(5, 5);
        assert_eq!(inside[0], inside[1]);
        let both = render_overlay(&ramp(11, 11), &truth, &truth).unwrap();
        assert_eq!(*both.get_pixel(2, 5), SHARED_COLOR);
        let pred = render_overlay(&ramp(11, 11), &empty, &truth).unwrap();
        assert_eq!(*pred.get_pixel(2, 5), PREDICTION_COLOR);
    }

    #[test]
    fn contour_of_full_mask_is_its_frame() {
        let full = LesionMask::new(4, 5, vec![true; 20]).unwrap();
        let c = contour(&full);
        assert_eq!(c.iter().filter(|&&b| b).count(), 4 * 5 - 2 * 3);
    }

    #[test]
    fn png_decodes_to_input_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        let m = LesionMask::new(13, 17, (0..13 * 17).map(|i| i % 5 == 0).collect()).unwrap();
        emit_overlay(&path, &ramp(13, 17), &m, &m).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (17, 13));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let m = disk(5, 1.0);
        assert!(render_overlay(&ramp(5, 6), &m, &m).is_err());
    }
}
