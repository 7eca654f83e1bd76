//! KITTI-style 16-bit PNG disparity maps: `disparity = raw / 256`, raw 0
//! marks an invalid pixel.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::DisparityMap;

/// Loads a 16-bit single-channel PNG disparity map.
pub fn load_kitti_png(path: &Path) -> Result<DisparityMap> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, None, format!("png decode failed: {e}")))?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::format(
            path,
            None,
            format!(
                "expected 16-bit single-channel PNG, got {:?}",
                img.color()
            ),
        ));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for (u, v, pixel) in buf.enumerate_pixels() {
        let raw = pixel[0];
        if raw != 0 {
            values[(v as usize, u as usize)] = raw as f64 / 256.0;
            valid[(v as usize, u as usize)] = true;
        }
    }
    DisparityMap::new(values, valid)
}

/// Writes a disparity map as 16-bit PNG. Valid disparities are quantized to
/// `round(d * 256)` (so the round-trip error is at most 1/512 px for values
/// that do not quantize to the invalid marker 0); invalid pixels become 0.
pub fn write_kitti_png(path: &Path, map: &DisparityMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (u, v, pixel) in buf.enumerate_pixels_mut() {
        let (v, u) = (v as usize, u as usize);
        let raw = if map.valid()[(v, u)] {
            (map.values()[(v, u)] * 256.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        *pixel = Luma([raw]);
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, None, format!("png encode failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("stereowarp-png-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn raw_256_is_one_pixel() {
        let path = temp_path("one.png");
        let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(2, 1);
        buf.put_pixel(0, 0, Luma([256]));
        buf.put_pixel(1, 0, Luma([0]));
        buf.save_with_format(&path, image::ImageFormat::Png).unwrap();
        let map = load_kitti_png(&path).unwrap();
        assert_eq!(map.values()[(0, 0)], 1.0);
        assert!(map.valid()[(0, 0)]);
        assert!(!map.valid()[(0, 1)]);
    }

    #[test]
    fn synthetic_grid_roundtrips_within_quantization() {
        let values = arr2(&[
            [0.5, 1.0, 63.75, 17.3],
            [128.004, 3.1415, 0.25, 44.9],
        ]);
        let map = DisparityMap::from_values(values.clone()).unwrap();
        let path = temp_path("grid.png");
        write_kitti_png(&path, &map).unwrap();
        let back = load_kitti_png(&path).unwrap();
        for v in 0..2 {
            for u in 0..4 {
                assert!(back.valid()[(v, u)]);
                let err = (back.values()[(v, u)] - values[(v, u)]).abs();
                assert!(err <= 1.0 / 512.0, "error {err} at ({u}, {v})");
            }
        }
    }

    #[test]
    fn invalid_pixels_roundtrip_as_invalid() {
        let values = arr2(&[[2.0, 0.0]]);
        let valid = arr2(&[[true, false]]);
        let map = DisparityMap::new(values, valid).unwrap();
        let path = temp_path("inv.png");
        write_kitti_png(&path, &map).unwrap();
        let back = load_kitti_png(&path).unwrap();
        assert!(back.valid()[(0, 0)]);
        assert!(!back.valid()[(0, 1)]);
    }

    #[test]
    fn eight_bit_png_is_rejected() {
        let path = temp_path("8bit.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(2, 2);
        buf.save_with_format(&path, image::ImageFormat::Png).unwrap();
        assert!(matches!(
            load_kitti_png(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rgb_png_is_rejected() {
        let path = temp_path("rgb.png");
        let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> = ImageBuffer::new(2, 2);
        buf.save_with_format(&path, image::ImageFormat::Png).unwrap();
        assert!(matches!(
            load_kitti_png(&path),
            Err(Error::Format { .. })
        ));
    }
}
