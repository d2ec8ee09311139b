use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Keyed, Plane, SliceSample};
use crate::config::Task;
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub image_size: usize,
    pub input_channels: usize,
    /// Fixed `[low, high]` intensity window instead of per-slice min–max.
    pub hu_window: Option<[f64; 2]>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            input_channels: 3,
            hu_window: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Intensity {
    MinMax,
    Window { low: f64, high: f64 },
}

impl PreprocessConfig {
    pub fn intensity(&self) -> Intensity {
        match self.hu_window {
            Some([low, high]) => Intensity::Window { low, high },
            None => Intensity::MinMax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.input_channels == 0 {
            return Err(Error::Config("image_size and input_channels must be positive".into()));
        }
        if let Some([lo, hi]) = self.hu_window {
            if !(lo < hi) {
                return Err(Error::Config(format!("hu_window [{lo}, {hi}] must have low < high")));
            }
        }
        Ok(())
    }
}

/// A model-ready sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `C×S×S` in [0, 1].
    pub input: Tensor,
    /// `S·S` labels, binarized for the binary task.
    pub infection: Option<Vec<u8>>,
    /// `S·S` labels in {0, 1}.
    pub lung: Option<Vec<u8>>,
    pub source_id: String,
    pub scan_id: String,
    /// Set when the slice had a single intensity and was mapped to zeros.
    pub constant_image: bool,
}

impl Prepared {
    pub fn size(&self) -> usize {
        self.input.dim(1)
    }
}

impl Keyed for Prepared {
    fn source_id(&self) -> &str {
        &self.source_id
    }
    fn scan_id(&self) -> &str {
        &self.scan_id
    }
}

/// Half-pixel-centre source coordinate of output index `o`.
fn source_coord(o: usize, in_len: usize, out_len: usize) -> f64 {
    ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64)
}

pub fn bilinear_resize(p: &Plane<f64>, height: usize, width: usize) -> Plane<f64> {
    if p.height == height && p.width == width {
        return p.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = source_coord(o, inp, out);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(inp - 1), s - i0 as f64)
            })
            .collect()
    };
    let rows = taps(height, p.height);
    let cols = taps(width, p.width);
    let mut data = Vec::with_capacity(height * width);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = p.get(r0, c0) * (1.0 - fc) + p.get(r0, c1) * fc;
            let bottom = p.get(r1, c0) * (1.0 - fc) + p.get(r1, c1) * fc;
            data.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Plane { height, width, data }
}

pub fn nearest_resize<T: Copy>(p: &Plane<T>, height: usize, width: usize) -> Plane<T> {
    let index =
        |o: usize, inp: usize, out: usize| (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1);
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let sr = index(r, p.height, height);
        for c in 0..width {
            data.push(p.get(sr, index(c, p.width, width)));
        }
    }
    Plane { height, width, data }
}

/// Resize, rescale to [0, 1], replicate channels and resample masks.
pub fn preprocess(sample: &SliceSample, config: &PreprocessConfig, task: Task) -> Result<Prepared> {
    sample.validate(task)?;
    let s = config.image_size;
    let mut plane = bilinear_resize(&sample.image, s, s);
    let mut constant_image = false;
    match config.intensity() {
        Intensity::MinMax => {
            let (lo, hi) = plane
                .data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::Validation(format!(
                    "{}: non-finite intensities",
                    sample.source_id
                )));
            }
            if hi > lo {
                plane.data.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
            } else {
                constant_image = true;
                plane.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Intensity::Window { low, high } => {
            plane
                .data
                .iter_mut()
                .for_each(|v| *v = (v.clamp(low, high) - low) / (high - low));
        }
    }
    let mut input = Vec::with_capacity(config.input_channels * s * s);
    for _ in 0..config.input_channels {
        input.extend_from_slice(&plane.data);
    }
    let binarize = |m: &Plane<u8>| {
        nearest_resize(m, s, s)
            .data
            .into_iter()
            .map(|v| (v > 0) as u8)
            .collect::<Vec<u8>>()
    };
    let infection = sample.infection_mask.as_ref().map(|m| match task {
        Task::Binary => binarize(m),
        Task::Multiclass => nearest_resize(m, s, s).data,
    });
    Ok(Prepared {
        input: Tensor::new(&[config.input_channels, s, s], input)?,
        infection,
        lung: sample.lung_mask.as_ref().map(binarize),
        source_id: sample.source_id.clone(),
        scan_id: sample.scan_id.clone(),
        constant_image,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate_p: f64,
    pub max_rotation_deg: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_p: 0.1,
            max_rotation_deg: 35.0,
            hflip_p: 0.2,
            vflip_p: 0.2,
        }
    }
}

/// Geometric transform applied identically to an image and its masks:
/// rotation about the centre, then horizontal flip, then vertical flip.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub rotation_deg: Option<f64>,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentPlan {
    /// Always consumes four draws so streams stay aligned across samples.
    pub fn sample<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> Self {
        let rotate = rng.random::<f64>() < config.rotate_p;
        let angle = rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg);
        let hflip = rng.random::<f64>() < config.hflip_p;
        let vflip = rng.random::<f64>() < config.vflip_p;
        Self {
            rotation_deg: rotate.then_some(angle),
            hflip,
            vflip,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg.is_none() && !self.hflip && !self.vflip
    }

    fn apply_plane<T: Copy + Default>(
        &self,
        data: &[T],
        s: usize,
        rotate: impl Fn(&[T], usize, f64) -> Vec<T>,
    ) -> Vec<T> {
        let mut out = match self.rotation_deg {
            Some(theta) => rotate(data, s, theta),
            None => data.to_vec(),
        };
        if self.hflip {
            out.chunks_exact_mut(s).for_each(<[T]>::reverse);
        }
        if self.vflip {
            let rows: Vec<Vec<T>> = out.chunks_exact(s).rev().map(<[T]>::to_vec).collect();
            out = rows.concat();
        }
        out
    }

    pub fn apply(&self, sample: &Prepared) -> Prepared {
        if self.is_identity() {
            return sample.clone();
        }
        let s = sample.size();
        let channels = sample.input.dim(0);
        let mut input = Vec::with_capacity(sample.input.numel());
        for c in 0..channels {
            let plane = &sample.input.data()[c * s * s..(c + 1) * s * s];
            input.extend(self.apply_plane(plane, s, rotate_bilinear));
        }
        let mask = |m: &Vec<u8>| self.apply_plane(m, s, rotate_nearest);
        Prepared {
            input: Tensor::new(sample.input.shape(), input).expect("same size"),
            infection: sample.infection.as_ref().map(mask),
            lung: sample.lung.as_ref().map(mask),
            ..sample.clone()
        }
    }
}

/// For output pixel `(row, col)`, the source coordinate under a rotation by
/// `theta` degrees about the image centre.
fn rotation_source(s: usize, theta: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (sin, cos) = theta.to_radians().sin_cos();
    let c = (s as f64 - 1.0) / 2.0;
    move |row, col| {
        let (dx, dy) = (col as f64 - c, row as f64 - c);
        (cos * dy - sin * dx + c, sin * dy + cos * dx + c)
    }
}

fn rotate_bilinear(data: &[f64], s: usize, theta: f64) -> Vec<f64> {
    let src = rotation_source(s, theta);
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= s as isize || c >= s as isize {
            0.0
        } else {
            data[r as usize * s + c as usize]
        }
    };
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            let (sr, sc) = src(row, col);
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1) * fc;
            let bottom = at(r0 + 1, c0) * (1.0 - fc) + at(r0 + 1, c0 + 1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

fn rotate_nearest<T: Copy + Default>(data: &[T], s: usize, theta: f64) -> Vec<T> {
    let src = rotation_source(s, theta);
    let mut out = Vec::with_capacity(s * s);
    for row in 0..s {
        for col in 0..s {
            let (sr, sc) = src(row, col);
            let (r, c) = (sr.round(), sc.round());
            let inside = r >= 0.0 && c >= 0.0 && r < s as f64 && c < s as f64;
            out.push(if inside {
                data[r as usize * s + c as usize]
            } else {
                T::default()
            });
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(sample: &Prepared, config: &AugmentConfig, rng: &mut R) -> Prepared {
    AugmentPlan::sample(config, rng).apply(sample)
}
