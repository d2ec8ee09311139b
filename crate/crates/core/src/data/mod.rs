//! Slice/mask corpora: loading, preprocessing, augmentation, splits and
//! batching.

mod io;
mod nifti;
pub mod synthetic;
mod transform;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Task;
use crate::engine::Tensor;
use crate::error::{Error, Result};

pub use io::{load_dataset, read_image, Layout};
pub use nifti::{read_nifti, Volume};
pub use transform::{
    augment, nearest_resize, preprocess, AugmentConfig, AugmentPlan, Intensity, Prepared, PreprocessConfig,
};

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}×{width} plane with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn same_size<U>(&self, other: &Plane<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Plane<u8> {
    pub fn labels(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }
}

/// One CT slice with whatever masks exist on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    /// Raw intensities.
    pub image: Plane<f64>,
    /// 0 background; binary 1 infection; multiclass 1 GGO, 2 consolidation.
    pub infection_mask: Option<Plane<u8>>,
    pub lung_mask: Option<Plane<u8>>,
    pub source_id: String,
    pub scan_id: String,
    /// Subset named by the index manifest, if any.
    pub subset: Option<String>,
}

impl SliceSample {
    pub fn validate(&self, task: Task) -> Result<()> {
        for (what, mask) in [("infection", &self.infection_mask), ("lung", &self.lung_mask)] {
            if let Some(m) = mask {
                if !m.same_size(&self.image) {
                    return Err(Error::Validation(format!(
                        "{}: {what} mask {}×{} does not match image {}×{}",
                        self.source_id, m.height, m.width, self.image.height, self.image.width
                    )));
                }
            }
        }
        if let (Task::Multiclass, Some(m)) = (task, &self.infection_mask) {
            if let Some(bad) = m.labels().into_iter().find(|&v| v > 2) {
                return Err(Error::Validation(format!(
                    "{}: multiclass label {bad} outside {{0,1,2}}",
                    self.source_id
                )));
            }
        }
        Ok(())
    }
}

/// Anything that can be assigned to a split side.
pub trait Keyed {
    fn source_id(&self) -> &str;
    fn scan_id(&self) -> &str;
}

impl Keyed for SliceSample {
    fn source_id(&self) -> &str {
        &self.source_id
    }
    fn scan_id(&self) -> &str {
        &self.scan_id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Slice,
    Scan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub granularity: Granularity,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
            granularity: Granularity::Slice,
        }
    }
}

/// Index sets of a seeded partition. The train side gets
/// `floor(units · train_fraction)` units, where a unit is a slice or a scan.
pub fn split_indices<T: Keyed>(samples: &[T], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot split an empty sample list".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {} must lie in (0, 1)",
            spec.train_fraction
        )));
    }
    let units: Vec<String> = match spec.granularity {
        Granularity::Slice => samples.iter().map(|s| s.source_id().to_string()).collect(),
        Granularity::Scan => {
            let set: BTreeSet<&str> = samples.iter().map(Keyed::scan_id).collect();
            set.into_iter().map(str::to_string).collect()
        }
    };
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (units.len() as f64 * spec.train_fraction).floor() as usize;
    if n_train == 0 || n_train == units.len() {
        return Err(Error::Validation(format!(
            "train_fraction {} leaves an empty side for {} {}s",
            spec.train_fraction,
            units.len(),
            match spec.granularity {
                Granularity::Slice => "slice",
                Granularity::Scan => "scan",
            }
        )));
    }
    let train_units: BTreeSet<&str> = order[..n_train].iter().map(|&i| units[i].as_str()).collect();
    let key = |s: &T| match spec.granularity {
        Granularity::Slice => s.source_id().to_string(),
        Granularity::Scan => s.scan_id().to_string(),
    };
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| train_units.contains(key(&samples[i]).as_str()));
    Ok((train, test))
}

/// Split samples into `(train, test)` keeping the original order on each side.
pub fn split<T: Keyed + Clone>(samples: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = split_indices(samples, spec)?;
    Ok((
        train.iter().map(|&i| samples[i].clone()).collect(),
        test.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

/// The manifest's own `train`/`test` assignment, when every sample has one.
pub fn predefined_split(samples: &[SliceSample]) -> Option<Result<(Vec<SliceSample>, Vec<SliceSample>)>> {
    if samples.is_empty() || samples.iter().any(|s| s.subset.is_none()) {
        return None;
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        match s.subset.as_deref() {
            Some("train") => train.push(s.clone()),
            Some("test") => test.push(s.clone()),
            other => {
                return Some(Err(Error::Validation(format!(
                    "{}: manifest subset {other:?} is neither `train` nor `test`",
                    s.source_id
                ))))
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Some(Err(Error::Validation(
            "manifest subsets leave an empty train or test side".into(),
        )));
    }
    Some(Ok((train, test)))
}

/// A stacked mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N×C×S×S`.
    pub images: Tensor,
    /// `N·S·S` labels.
    pub infection: Vec<u8>,
    /// Present only when every sample in the batch has a lung mask.
    pub lung: Option<Vec<u8>>,
    pub source_ids: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: &[&Prepared]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
        let images = Tensor::stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let mut infection = Vec::with_capacity(samples.len() * first.infection.as_ref().map_or(0, Vec::len));
        for s in samples {
            let m = s
                .infection
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{}: no infection mask for training", s.source_id)))?;
            infection.extend_from_slice(m);
        }
        let lung = if samples.iter().all(|s| s.lung.is_some()) {
            Some(
                samples
                    .iter()
                    .flat_map(|s| s.lung.clone().unwrap_or_default())
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            images,
            infection,
            lung,
            source_ids: samples.iter().map(|s| s.source_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    /// Short SHA-256 over the image bytes, for diagnostics.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Decorrelates small integer seeds before they are combined with indices.
pub fn mix_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample augmentation stream: `mix(seed) ⊕ index`, one stream per epoch.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed) ^ index as u64);
    rng.set_stream(epoch as u64);
    rng
}

/// Seeded shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed.wrapping_add(1)));
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Lazily built batches of one epoch: seeded order, then per-sample
/// augmentation.
pub struct EpochBatches<'a> {
    samples: &'a [Prepared],
    order: Vec<usize>,
    batch_size: usize,
    augment: Option<AugmentConfig>,
    seed: u64,
    epoch: usize,
    cursor: usize,
}

impl<'a> EpochBatches<'a> {
    pub fn new(
        samples: &'a [Prepared],
        batch_size: usize,
        augment: Option<AugmentConfig>,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Self {
            order: epoch_order(samples.len(), seed, epoch),
            samples,
            batch_size: batch_size.max(1),
            augment,
            seed,
            epoch,
            cursor: 0,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picked: Vec<Prepared> = self.order[self.cursor..end]
            .iter()
            .map(|&i| match &self.augment {
                Some(cfg) => augment(&self.samples[i], cfg, &mut sample_rng(self.seed, self.epoch, i)),
                None => self.samples[i].clone(),
            })
            .collect();
        self.cursor = end;
        Some(Batch::from_samples(&picked.iter().collect::<Vec<_>>()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Id(String, String);

    impl Keyed for Id {
        fn source_id(&self) -> &str {
            &self.0
        }
        fn scan_id(&self) -> &str {
            &self.1
        }
    }

    fn ids(n: usize, per_scan: usize) -> Vec<Id> {
        (0..n)
            .map(|i| Id(format!("s{i:04}"), format!("scan{}", i / per_scan)))
            .collect()
    }

    #[test]
    fn split_floor_rule() {
        let (train, test) = split_indices(&ids(829, 1), &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (580, 249));
    }

    #[test]
    fn split_rejects_empty_side() {
        let spec = SplitSpec {
            train_fraction: 0.1,
            ..Default::default()
        };
        assert!(split_indices(&ids(5, 1), &spec).is_err());
        assert!(split_indices::<Id>(&[], &SplitSpec::default()).is_err());
    }

    #[test]
    fn mix_seed_separates_neighbours() {
        assert_ne!(mix_seed(0) ^ 1, mix_seed(1));
        assert_ne!(mix_seed(0), mix_seed(1));
    }
}
