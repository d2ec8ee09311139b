use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::nifti::read_nifti;
use super::{Plane, SliceSample};
use crate::error::{Error, Result};

/// Directory names inside a dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layout {
    pub images: String,
    pub infection_masks: String,
    pub lung_masks: String,
    /// Optional index CSV with columns `stem,scan_id[,subset]`.
    pub manifest: String,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            images: "images".into(),
            infection_masks: "infection_masks".into(),
            lung_masks: "lung_masks".into(),
            manifest: "manifest.csv".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Png,
    Nifti,
}

fn classify(path: &Path) -> Option<(String, Format)> {
    let name = path.file_name()?.to_str()?;
    let lower = name.to_ascii_lowercase();
    for (suffix, format) in [
        (".nii.gz", Format::Nifti),
        (".nii", Format::Nifti),
        (".png", Format::Png),
    ] {
        if lower.ends_with(suffix) && lower.len() > suffix.len() {
            return Some((name[..name.len() - suffix.len()].to_string(), format));
        }
    }
    None
}

fn scan_dir(dir: &Path) -> Result<BTreeMap<String, (PathBuf, Format)>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let Some((stem, format)) = classify(&path) else {
            continue;
        };
        if let Some((other, _)) = out.insert(stem.clone(), (path.clone(), format)) {
            return Err(Error::data(
                path,
                format!("stem `{stem}` also provided by {}", other.display()),
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    stem: String,
    scan_id: String,
    #[serde(default)]
    subset: Option<String>,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let mut row: ManifestRow = row.map_err(|e| Error::data(path, e.to_string()))?;
        if row.subset.as_deref().is_some_and(str::is_empty) {
            row.subset = None;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_png(path: &Path) -> Result<Plane<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::data(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            img.into_luma16().into_raw().into_iter().map(f64::from).collect()
        }
        other => other.into_luma8().into_raw().into_iter().map(f64::from).collect(),
    };
    Plane::new(h, w, data)
}

/// Integer labels; masks saved as {0, 255} become {0, 1}.
fn to_labels(plane: Plane<f64>, path: &Path) -> Result<Plane<u8>> {
    if let Some(v) = plane.data.iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v > 255.0) {
        return Err(Error::data(path, format!("mask value {v} is not a label in 0..=255")));
    }
    let saturated = plane.data.iter().all(|&v| v == 0.0 || v == 255.0);
    let data = plane
        .data
        .iter()
        .map(|&v| if saturated && v == 255.0 { 1 } else { v as u8 })
        .collect();
    Plane::new(plane.height, plane.width, data)
}

enum Loaded {
    Slice(Plane<f64>),
    Volume(Vec<Plane<f64>>),
}

fn read_any(path: &Path, format: Format) -> Result<Loaded> {
    Ok(match format {
        Format::Png => Loaded::Slice(read_png(path)?),
        Format::Nifti => {
            let v = read_nifti(path)?;
            Loaded::Volume((0..v.nz).map(|z| v.slice(z)).collect())
        }
    })
}

/// Read one PNG slice or every axial slice of a NIfTI volume as
/// `(source_id, image)` pairs. NIfTI slices are named `{stem}_z{z:04}`.
pub fn read_image(path: &Path) -> Result<Vec<(String, Plane<f64>)>> {
    let (stem, format) = classify(path).ok_or_else(|| Error::data(path, "not a .png, .nii or .nii.gz file"))?;
    Ok(match read_any(path, format)? {
        Loaded::Slice(p) => vec![(stem, p)],
        Loaded::Volume(v) => v
            .into_iter()
            .enumerate()
            .map(|(z, p)| (format!("{stem}_z{z:04}"), p))
            .collect(),
    })
}

fn read_mask(
    entry: Option<&(PathBuf, Format)>,
    image_format: Format,
    expected: usize,
) -> Result<Option<Vec<Plane<u8>>>> {
    let Some((path, format)) = entry else { return Ok(None) };
    if *format != image_format {
        return Err(Error::data(
            path,
            "mask format differs from its image (PNG and NIfTI cannot be mixed)",
        ));
    }
    let planes = match read_any(path, *format)? {
        Loaded::Slice(p) => vec![p],
        Loaded::Volume(v) => v,
    };
    if planes.len() != expected {
        return Err(Error::data(
            path,
            format!("mask has {} slices, image has {expected}", planes.len()),
        ));
    }
    planes
        .into_iter()
        .map(|p| to_labels(p, path))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// One sample per PNG image, or per axial slice of a NIfTI volume. Masks
/// are matched to images by file stem; missing masks stay absent.
pub fn load_dataset(root: &Path, layout: &Layout) -> Result<Vec<SliceSample>> {
    if !root.is_dir() {
        return Err(Error::data(root, "dataset root does not exist or is not a directory"));
    }
    let images = scan_dir(&root.join(&layout.images))?;
    let infection = scan_dir(&root.join(&layout.infection_masks))?;
    let lung = scan_dir(&root.join(&layout.lung_masks))?;

    let orphans: Vec<String> = infection
        .iter()
        .chain(lung.iter())
        .filter(|(stem, _)| !images.contains_key(*stem))
        .map(|(_, (path, _))| path.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::data(
            root,
            format!("masks without a matching image: {}", orphans.join(", ")),
        ));
    }

    let manifest_path = root.join(&layout.manifest);
    let selection: Vec<(String, String, Option<String>)> = if manifest_path.is_file() {
        let rows = read_manifest(&manifest_path)?;
        let missing: Vec<&str> = rows
            .iter()
            .filter(|r| !images.contains_key(&r.stem))
            .map(|r| r.stem.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::data(
                &manifest_path,
                format!("stems without an image: {}", missing.join(", ")),
            ));
        }
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.stem.as_str()) {
                return Err(Error::data(&manifest_path, format!("stem `{}` listed twice", r.stem)));
            }
        }
        rows.into_iter().map(|r| (r.stem, r.scan_id, r.subset)).collect()
    } else {
        images.keys().map(|s| (s.clone(), s.clone(), None)).collect()
    };

    let mut samples = Vec::new();
    for (stem, scan_id, subset) in selection {
        let (path, format) = &images[&stem];
        let (planes, volumetric) = match read_any(path, *format)? {
            Loaded::Slice(p) => (vec![p], false),
            Loaded::Volume(v) => (v, true),
        };
        let inf = read_mask(infection.get(&stem), *format, planes.len())?;
        let lng = read_mask(lung.get(&stem), *format, planes.len())?;
        for (z, image) in planes.into_iter().enumerate() {
            let sample = SliceSample {
                image,
                infection_mask: inf.as_ref().map(|m| m[z].clone()),
                lung_mask: lng.as_ref().map(|m| m[z].clone()),
                source_id: if volumetric {
                    format!("{stem}_z{z:04}")
                } else {
                    stem.clone()
                },
                scan_id: scan_id.clone(),
                subset: subset.clone(),
            };
            for (what, mask) in [("infection", &sample.infection_mask), ("lung", &sample.lung_mask)] {
                if mask.as_ref().is_some_and(|m| !m.same_size(&sample.image)) {
                    return Err(Error::data(
                        path,
                        format!("{what} mask of `{}` does not match the image size", sample.source_id),
                    ));
                }
            }
            samples.push(sample);
        }
    }
    Ok(samples)
}
