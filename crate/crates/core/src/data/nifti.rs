//! Minimal single-file NIfTI-1 reader (`.nii` and `.nii.gz`).

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::Plane;
use crate::error::{Error, Result};

/// A 3-D volume in file order: x fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<f64>,
}

impl Volume {
    /// Axial slice `z` as a `ny × nx` plane (rows follow y).
    pub fn slice(&self, z: usize) -> Plane<f64> {
        let n = self.nx * self.ny;
        Plane {
            height: self.ny,
            width: self.nx,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    let bad = |msg: String| Error::data(path, msg);
    if bytes.len() < 352 {
        return Err(bad(format!("{} bytes is too short for a NIfTI-1 header", bytes.len())));
    }
    let little = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(bad("sizeof_hdr is not 348; not a NIfTI-1 file".into())),
    };
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let rank = i16_at(40);
    if !(2..=7).contains(&rank) {
        return Err(bad(format!("unsupported rank {rank}")));
    }
    let dim = |i: usize| {
        if i as i16 <= rank {
            i16_at(40 + 2 * i).max(1) as usize
        } else {
            1
        }
    };
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    if (4..=rank as usize).any(|i| dim(i) > 1) {
        return Err(bad(
            "volumes with more than three non-singleton dimensions are not supported".into(),
        ));
    }
    let datatype = i16_at(70);
    let vox_offset = f32_at(108).max(352.0) as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let count = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(bad(format!("unsupported NIfTI datatype {other}"))),
    };
    let body = bytes.get(vox_offset..vox_offset + count * width).ok_or_else(|| {
        bad(format!(
            "voxel data truncated: need {} bytes after offset {vox_offset}",
            count * width
        ))
    })?;
    let mut data = Vec::with_capacity(count);
    for c in body.chunks_exact(width) {
        let v = match (datatype, little) {
            (2, _) => c[0] as f64,
            (256, _) => c[0] as i8 as f64,
            (4, true) => i16::from_le_bytes([c[0], c[1]]) as f64,
            (4, false) => i16::from_be_bytes([c[0], c[1]]) as f64,
            (512, true) => u16::from_le_bytes([c[0], c[1]]) as f64,
            (512, false) => u16::from_be_bytes([c[0], c[1]]) as f64,
            (8, true) => i32::from_le_bytes(c.try_into().unwrap()) as f64,
            (8, false) => i32::from_be_bytes(c.try_into().unwrap()) as f64,
            (768, true) => u32::from_le_bytes(c.try_into().unwrap()) as f64,
            (768, false) => u32::from_be_bytes(c.try_into().unwrap()) as f64,
            (16, true) => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            (16, false) => f32::from_be_bytes(c.try_into().unwrap()) as f64,
            (64, true) => f64::from_le_bytes(c.try_into().unwrap()),
            (64, false) => f64::from_be_bytes(c.try_into().unwrap()),
            _ => unreachable!("datatype checked above"),
        };
        data.push(v);
    }
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(Volume { nx, ny, nz, data })
}
