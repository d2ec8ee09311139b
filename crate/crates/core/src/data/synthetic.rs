//! Procedural CT-like slices: dark lung discs inside a brighter body, with
//! infection blobs inside the lungs.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layout, Plane, SliceSample};
use crate::config::Task;
use crate::error::{Error, Result};

struct Disc {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Disc {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 - self.cy) / self.ry;
        let dx = (c as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// `n` slices of side `size`. Multiclass slices carry both GGO (1) and
/// consolidation (2) blobs; binary slices a single infection label.
pub fn synthetic_slices(n: usize, size: usize, task: Task, seed: u64) -> Vec<SliceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    (0..n)
        .map(|i| {
            let lungs = [
                Disc {
                    cy: s * rng.random_range(0.45..0.55),
                    cx: s * 0.3,
                    ry: s * 0.3,
                    rx: s * rng.random_range(0.14..0.19),
                },
                Disc {
                    cy: s * rng.random_range(0.45..0.55),
                    cx: s * 0.7,
                    ry: s * 0.3,
                    rx: s * rng.random_range(0.14..0.19),
                },
            ];
            let blobs: Vec<(Disc, u8)> = (0..rng.random_range(1..=3))
                .map(|k| {
                    let lung = &lungs[rng.random_range(0..2)];
                    let r = s * rng.random_range(0.05..0.09);
                    let disc = Disc {
                        cy: lung.cy + rng.random_range(-0.5..0.5) * lung.ry,
                        cx: lung.cx + rng.random_range(-0.4..0.4) * lung.rx,
                        ry: r,
                        rx: r * rng.random_range(0.8..1.25),
                    };
                    let label = match task {
                        Task::Binary => 1,
                        Task::Multiclass => 1 + (k % 2) as u8,
                    };
                    (disc, label)
                })
                .collect();
            let body = Disc {
                cy: s * 0.5,
                cx: s * 0.5,
                ry: s * 0.46,
                rx: s * 0.48,
            };
            let mut image = Vec::with_capacity(size * size);
            let mut lung = Vec::with_capacity(size * size);
            let mut infection = Vec::with_capacity(size * size);
            for r in 0..size {
                for c in 0..size {
                    let in_lung = lungs.iter().any(|d| d.contains(r, c));
                    let label = if in_lung {
                        blobs
                            .iter()
                            .filter(|(d, _)| d.contains(r, c))
                            .map(|(_, l)| *l)
                            .max()
                            .unwrap_or(0)
                    } else {
                        0
                    };
                    let base = match (body.contains(r, c), in_lung, label) {
                        (_, true, 2) => 0.85,
                        (_, true, 1) => 0.55,
                        (_, true, _) => 0.1,
                        (true, false, _) => 0.45,
                        (false, false, _) => 0.0,
                    };
                    image.push(base + rng.random_range(-0.03..0.03));
                    lung.push(in_lung as u8);
                    infection.push(label);
                }
            }
            SliceSample {
                image: Plane {
                    height: size,
                    width: size,
                    data: image,
                },
                infection_mask: Some(Plane {
                    height: size,
                    width: size,
                    data: infection,
                }),
                lung_mask: Some(Plane {
                    height: size,
                    width: size,
                    data: lung,
                }),
                source_id: format!("slice{i:03}"),
                scan_id: format!("scan{}", i / 4),
                subset: None,
            }
        })
        .collect()
}

pub fn write_label_png(path: &Path, mask: &Plane<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, mask.data.clone()).expect("plane size");
    buf.save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// 16-bit PNG of intensities scaled by 1000 and clamped to the u16 range.
pub fn write_intensity_png(path: &Path, image: &Plane<f64>) -> Result<()> {
    let data: Vec<u16> = image
        .data
        .iter()
        .map(|v| (v * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, data).expect("plane size");
    buf.save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Write samples in the on-disk layout, with a manifest of scan ids.
pub fn write_corpus(root: &Path, samples: &[SliceSample], layout: &Layout) -> Result<()> {
    let dirs = [&layout.images, &layout.infection_masks, &layout.lung_masks];
    for d in dirs {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut manifest = String::from("stem,scan_id,subset\n");
    for s in samples {
        let name = format!("{}.png", s.source_id);
        write_intensity_png(&root.join(&layout.images).join(&name), &s.image)?;
        if let Some(m) = &s.infection_mask {
            write_label_png(&root.join(&layout.infection_masks).join(&name), m)?;
        }
        if let Some(m) = &s.lung_mask {
            write_label_png(&root.join(&layout.lung_masks).join(&name), m)?;
        }
        manifest.push_str(&format!(
            "{},{},{}\n",
            s.source_id,
            s.scan_id,
            s.subset.as_deref().unwrap_or("")
        ));
    }
    let path = root.join(&layout.manifest);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
