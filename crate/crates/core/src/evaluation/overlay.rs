use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::data::Plane;
use crate::error::{Error, Result};

pub const GGO_RGB: [u8; 3] = [0, 255, 0];
pub const CONSOLIDATION_RGB: [u8; 3] = [255, 0, 0];
pub const LUNG_RGB: [u8; 3] = [0, 0, 255];

/// Grayscale slice in [0, 1] with labels blended at 50% (1 green, 2 red)
/// and an optional opaque lung contour.
pub fn overlay_rgb(gray: &Plane<f64>, labels: &Plane<u8>, lung: Option<&Plane<u8>>) -> Result<RgbImage> {
    if !gray.same_size(labels) || lung.is_some_and(|l| !gray.same_size(l)) {
        return Err(Error::Shape(format!(
            "overlay inputs do not match a {}×{} slice",
            gray.height, gray.width
        )));
    }
    let (h, w) = (gray.height, gray.width);
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let g = (gray.data[i].clamp(0.0, 1.0) * 255.0).round();
        let color = match labels.data[i] {
            1 => Some(GGO_RGB),
            2 => Some(CONSOLIDATION_RGB),
            _ => None,
        };
        *px = match color {
            Some(c) => Rgb(c.map(|v| (0.5 * g + 0.5 * f64::from(v)).round() as u8)),
            None => Rgb([g as u8; 3]),
        };
    }
    if let Some(lung) = lung {
        let inside = |r: isize, c: isize| {
            r >= 0 && c >= 0 && r < h as isize && c < w as isize && lung.get(r as usize, c as usize) > 0
        };
        for r in 0..h as isize {
            for c in 0..w as isize {
                let edge = inside(r, c)
                    && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .any(|(dr, dc)| !inside(r + dr, c + dc));
                if edge {
                    img.put_pixel(c as u32, r as u32, Rgb(LUNG_RGB));
                }
            }
        }
    }
    Ok(img)
}

pub fn save_overlay(path: &Path, gray: &Plane<f64>, labels: &Plane<u8>, lung: Option<&Plane<u8>>) -> Result<()> {
    overlay_rgb(gray, labels, lung)?
        .save(path)
        .map_err(|e| Error::data(path, e.to_string()))
}

/// Raw label values as an 8-bit PNG.
pub fn save_label_map(path: &Path, labels: &Plane<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(labels.width as u32, labels.height as u32, labels.data.clone()).ok_or_else(|| {
            Error::Shape(format!(
                "{} labels for a {}×{} map",
                labels.data.len(),
                labels.height,
                labels.width
            ))
        })?;
    buf.save(path).map_err(|e| Error::data(path, e.to_string()))
}
