//! Benchmark dataset ingestion, expert-label fusion, resizing and splits.

pub mod io;
mod loaders;
mod materialize;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply, GeoTransform};
use crate::error::{Error, Result};
use crate::net::REDUCTION;
use crate::tensor::{ensure_same_shape, Scalar, Shape, Tensor};
use crate::train::SampleSource;

pub use loaders::{
    load_diaretdb1, load_diaretdb1_with, load_dir, load_eophtha, load_eophtha_with, load_heimed, load_heimed_with,
    LoadOptions,
};
pub use materialize::{materialize_expansion, read_expansion_manifest, MaterializedSet, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    EOphtha,
    DiaretDb1,
    HeiMed,
    Synthetic,
    /// A plain `images/` + `masks/` directory, e.g. a materialized expansion.
    Dir,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::EOphtha => "eophtha",
            DatasetKind::DiaretDb1 => "diaretdb1",
            DatasetKind::HeiMed => "heimed",
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Dir => "dir",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eophtha" => Ok(DatasetKind::EOphtha),
            "diaretdb1" => Ok(DatasetKind::DiaretDb1),
            "heimed" => Ok(DatasetKind::HeiMed),
            "synthetic" => Ok(DatasetKind::Synthetic),
            "dir" => Ok(DatasetKind::Dir),
            other => Err(format!("unknown dataset `{other}` (expected eophtha, diaretdb1, heimed or dir)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub source: DatasetKind,
    /// `(1, 3, h, w)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, 1, h, w)`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
    /// `(h, w)` of the file on disk.
    pub original_dims: (usize, usize),
}

impl FundusSample {
    pub fn new(id: impl Into<String>, source: DatasetKind, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.n() != 1 || s.c() != 3 {
            return Err(Error::Dataset(format!("{id}: image must be (1,3,h,w), got {s}")));
        }
        ensure_same_shape("FundusSample::new", s.with_channels(1), mask.shape())
            .map_err(|e| Error::Dataset(format!("{id}: {e}")))?;
        if !is_binary(&mask) {
            return Err(Error::Dataset(format!("{id}: mask is not binary")));
        }
        Ok(FundusSample { id, source, image, mask, original_dims: (s.h(), s.w()) })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h(), s.w())
    }

    pub fn positive_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.0).count()
    }
}

pub fn is_binary<T: Scalar>(t: &Tensor<T>) -> bool {
    t.data().iter().all(|&v| v == T::zero() || v == T::one())
}

impl<T: Scalar> SampleSource<T> for [FundusSample] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = &self[index];
        Ok((s.image.cast(), s.mask.cast()))
    }
}

impl<T: Scalar> SampleSource<T> for Vec<FundusSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        SampleSource::<T>::sample(self.as_slice(), index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadStatus {
    Loaded,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadEntry {
    pub file: PathBuf,
    pub status: LoadStatus,
    pub reason: String,
}

/// Per-file outcome of a dataset scan.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub entries: Vec<LoadEntry>,
}

impl LoadReport {
    pub(crate) fn loaded(&mut self, file: PathBuf, reason: impl Into<String>) {
        self.entries.push(LoadEntry { file, status: LoadStatus::Loaded, reason: reason.into() });
    }

    pub(crate) fn skipped(&mut self, file: PathBuf, reason: impl Into<String>) {
        self.entries.push(LoadEntry { file, status: LoadStatus::Skipped, reason: reason.into() });
    }

    pub fn loaded_count(&self) -> usize {
        self.entries.iter().filter(|e| e.status == LoadStatus::Loaded).count()
    }

    pub fn skipped_count(&self) -> usize {
        self.entries.iter().filter(|e| e.status == LoadStatus::Skipped).count()
    }

    /// `file<TAB>status<TAB>reason`, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("file\tstatus\treason\n");
        for e in &self.entries {
            let status = match e.status {
                LoadStatus::Loaded => "loaded",
                LoadStatus::Skipped => "skipped",
            };
            s.push_str(&format!("{}\t{status}\t{}\n", e.file.display(), e.reason));
        }
        s
    }
}

/// Per-pixel rule: positive iff the mean of the maps is `>= threshold`.
///
/// Maps are grayscale `(n, 1, h, w)` in `[0, 1]`, one per expert, and must
/// be congruent.
pub fn fuse_expert_labels<T: Scalar>(maps: &[Tensor<T>], threshold: f64) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no expert maps to fuse".into()))?;
    for m in &maps[1..] {
        ensure_same_shape("fuse_expert_labels", first.shape(), m.shape())?;
    }
    let k = maps.len() as f64;
    let out = (0..first.len())
        .map(|i| {
            let sum: f64 = maps.iter().map(|m| m.data()[i].to_f64_lossless()).sum();
            if sum / k >= threshold { T::one() } else { T::zero() }
        })
        .collect();
    Tensor::from_vec(first.shape(), out)
}

/// Bilinear image / nearest mask resize to `dims`, which must both be
/// divisible by 16.
pub fn resize_to_input(sample: &FundusSample, dims: (usize, usize)) -> Result<FundusSample> {
    let (h, w) = dims;
    if h == 0 || w == 0 || h % REDUCTION != 0 || w % REDUCTION != 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {h}x{w} must have both sides divisible by {REDUCTION}"
        )));
    }
    if sample.dims() == dims {
        return Ok(sample.clone());
    }
    let (image, mask) = apply(&sample.image, &sample.mask, GeoTransform::Resize { h, w })?;
    Ok(FundusSample { image, mask, ..sample.clone() })
}

/// Partition of sample ids into train and test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Test images held out from E-ophtha by default; the other 60 train.
pub const EOPHTHA_TEST_COUNT: usize = 22;

impl SplitPlan {
    /// Shuffles the sorted ids with Fisher-Yates and holds out the first
    /// `test_count` for testing.
    pub fn random(ids: &[String], test_count: usize, seed: u64) -> Result<SplitPlan> {
        if test_count > ids.len() {
            return Err(Error::InvalidArgument(format!("cannot hold out {test_count} of {} samples", ids.len())));
        }
        let mut sorted = ids.to_vec();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Dataset("sample ids are not unique".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sorted.shuffle(&mut rng);
        let mut train = sorted.split_off(test_count);
        let mut test = sorted;
        train.sort();
        test.sort();
        Ok(SplitPlan { train, test, seed })
    }
}

/// Splits `samples` according to `plan`, which must name every sample
/// exactly once.
pub fn split(samples: Vec<FundusSample>, plan: &SplitPlan) -> Result<(Vec<FundusSample>, Vec<FundusSample>)> {
    use std::collections::HashMap;
    let mut side: HashMap<&str, bool> = HashMap::new();
    for id in &plan.train {
        side.insert(id, true);
    }
    for id in &plan.test {
        if side.insert(id, false).is_some() {
            return Err(Error::Dataset(format!("split plan lists `{id}` in both train and test")));
        }
    }
    if side.len() != samples.len() {
        return Err(Error::Dataset(format!(
            "split plan names {} ids but {} samples were loaded",
            side.len(),
            samples.len()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        match side.get(s.id.as_str()) {
            Some(true) => train.push(s),
            Some(false) => test.push(s),
            None => return Err(Error::Dataset(format!("sample `{}` is not in the split plan", s.id))),
        }
    }
    Ok((train, test))
}

/// Stacks samples into an `(n, 3, h, w)` image batch and `(n, 1, h, w)` mask batch.
pub fn batch<T: Scalar>(samples: &[FundusSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let masks: Vec<Tensor<T>> = samples.iter().map(|s| s.mask.cast()).collect();
    Ok((Tensor::stack(&images.iter().collect::<Vec<_>>())?, Tensor::stack(&masks.iter().collect::<Vec<_>>())?))
}

pub(crate) fn empty_mask(shape: Shape) -> Tensor<f32> {
    Tensor::zeros(shape.with_channels(1))
}
