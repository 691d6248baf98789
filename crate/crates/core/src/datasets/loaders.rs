use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use walkdir::WalkDir;

use super::io::{is_image_file, read_gray, read_mask, read_rgb};
use super::{empty_mask, fuse_expert_labels, resize_to_input, DatasetKind, FundusSample, LoadReport};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Mean-confidence cutoff for DiaretDB1 expert fusion.
    pub fusion_threshold: f64,
    /// Resize every sample to `(h, w)` right after decoding.
    pub resize: Option<(usize, usize)>,
    /// DiaretDB1 expert directories under `ddb1_groundtruth/`. `None` takes
    /// all subdirectories, of which there must be four.
    pub expert_dirs: Option<Vec<String>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { fusion_threshold: 0.5, resize: None, expert_dirs: None }
    }
}

/// Image files under `dir`, sorted by path.
fn image_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image_file(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("{what}: directory {} not found", path.display())))
    }
}

enum Job {
    Pair { id: String, image: PathBuf, mask: Option<PathBuf> },
    Experts { id: String, image: PathBuf, maps: Vec<PathBuf> },
}

impl Job {
    fn image(&self) -> &Path {
        match self {
            Job::Pair { image, .. } | Job::Experts { image, .. } => image,
        }
    }
}

fn run_jobs(
    jobs: Vec<Job>,
    kind: DatasetKind,
    opts: &LoadOptions,
    report: &mut LoadReport,
) -> Result<Vec<FundusSample>> {
    let results: Vec<std::result::Result<FundusSample, String>> = jobs
        .par_iter()
        .map(|job| {
            let s = load_job(job, kind, opts).map_err(|e| e.to_string())?;
            match opts.resize {
                Some(dims) => resize_to_input(&s, dims).map_err(|e| e.to_string()),
                None => Ok(s),
            }
        })
        .collect();
    let mut samples = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(s) => {
                report.loaded(job.image().to_path_buf(), if s.positive_pixels() > 0 { "lesioned" } else { "healthy" });
                samples.push(s);
            }
            Err(e) => report.skipped(job.image().to_path_buf(), e),
        }
    }
    Ok(samples)
}

fn load_job(job: &Job, kind: DatasetKind, opts: &LoadOptions) -> Result<FundusSample> {
    match job {
        Job::Pair { id, image, mask } => {
            let img = read_rgb(image)?;
            let m = match mask {
                Some(p) => read_mask(p)?,
                None => empty_mask(img.shape()),
            };
            FundusSample::new(id.clone(), kind, img, m)
        }
        Job::Experts { id, image, maps } => {
            let img = read_rgb(image)?;
            let maps = maps.iter().map(|p| read_gray(p)).collect::<Result<Vec<_>>>()?;
            let fused = fuse_expert_labels(&maps, opts.fusion_threshold)?;
            FundusSample::new(id.clone(), kind, img, fused)
        }
    }
}

pub fn load_eophtha(root: &Path) -> Result<(Vec<FundusSample>, LoadReport)> {
    load_eophtha_with(root, &LoadOptions::default())
}

/// E-ophtha-EX: lesioned images under `EX/`, annotations
/// `Annotation_EX/**/<stem>_EX.png`, healthy images under `healthy/`.
pub fn load_eophtha_with(root: &Path, opts: &LoadOptions) -> Result<(Vec<FundusSample>, LoadReport)> {
    let ex = root.join("EX");
    let healthy = root.join("healthy");
    if !ex.is_dir() && !healthy.is_dir() {
        return Err(Error::Dataset(format!("E-ophtha: neither EX/ nor healthy/ found under {}", root.display())));
    }
    let annotations: BTreeMap<String, PathBuf> = image_files(&root.join("Annotation_EX"))
        .into_iter()
        .filter_map(|p| stem(&p).strip_suffix("_EX").map(|s| (s.to_string(), p.clone())))
        .collect();
    let mut report = LoadReport::default();
    let mut jobs = Vec::new();
    for image in image_files(&ex) {
        let id = stem(&image);
        match annotations.get(&id) {
            Some(mask) => jobs.push(Job::Pair { id, image, mask: Some(mask.clone()) }),
            None => report.skipped(image, format!("no Annotation_EX/**/{id}_EX.png and not under healthy/")),
        }
    }
    for image in image_files(&healthy) {
        jobs.push(Job::Pair { id: stem(&image), image, mask: None });
    }
    let samples = run_jobs(jobs, DatasetKind::EOphtha, opts, &mut report)?;
    Ok((samples, report))
}

pub fn load_diaretdb1(root: &Path) -> Result<(Vec<FundusSample>, LoadReport)> {
    load_diaretdb1_with(root, &LoadOptions::default())
}

fn find_dir(root: &Path, name: &str) -> Option<PathBuf> {
    WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .find(|e| e.file_type().is_dir() && e.file_name() == name)
        .map(|e| e.into_path())
}

/// DiaretDB1: images in `ddb1_fundusimages/`, one grayscale confidence map
/// per expert in each subdirectory of `ddb1_groundtruth/`, fused by mean.
pub fn load_diaretdb1_with(root: &Path, opts: &LoadOptions) -> Result<(Vec<FundusSample>, LoadReport)> {
    let images = find_dir(root, "ddb1_fundusimages")
        .ok_or_else(|| Error::Dataset(format!("DiaretDB1: no ddb1_fundusimages/ under {}", root.display())))?;
    let gt = find_dir(root, "ddb1_groundtruth")
        .ok_or_else(|| Error::Dataset(format!("DiaretDB1: no ddb1_groundtruth/ under {}", root.display())))?;
    let experts: Vec<PathBuf> = match &opts.expert_dirs {
        Some(names) => names.iter().map(|n| gt.join(n)).collect(),
        None => {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&gt)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.path())
                .collect();
            dirs.sort();
            if dirs.len() != 4 {
                return Err(Error::Dataset(format!(
                    "DiaretDB1: expected 4 expert directories in {}, found {}",
                    gt.display(),
                    dirs.len()
                )));
            }
            dirs
        }
    };
    for d in &experts {
        require_dir(d, "DiaretDB1 expert")?;
    }
    let expert_maps: Vec<BTreeMap<String, PathBuf>> =
        experts.iter().map(|d| image_files(d).into_iter().map(|p| (stem(&p), p)).collect()).collect();
    let mut report = LoadReport::default();
    let mut jobs = Vec::new();
    for image in image_files(&images) {
        let id = stem(&image);
        let maps: Option<Vec<PathBuf>> = expert_maps.iter().map(|m| m.get(&id).cloned()).collect();
        match maps {
            Some(maps) => jobs.push(Job::Experts { id, image, maps }),
            None => report.skipped(image, format!("missing expert map {id}.png in at least one expert directory")),
        }
    }
    let samples = run_jobs(jobs, DatasetKind::DiaretDb1, opts, &mut report)?;
    Ok((samples, report))
}

pub fn load_heimed(root: &Path) -> Result<(Vec<FundusSample>, LoadReport)> {
    load_heimed_with(root, &LoadOptions::default())
}

/// HEI-MED: `<stem>.jpg` with its single-expert annotation `<stem>.GT.png`
/// in the same directory.
pub fn load_heimed_with(root: &Path, opts: &LoadOptions) -> Result<(Vec<FundusSample>, LoadReport)> {
    require_dir(root, "HEI-MED")?;
    let mut report = LoadReport::default();
    let mut jobs = Vec::new();
    for image in image_files(root) {
        let name = image.file_name().unwrap_or_default().to_string_lossy().to_ascii_lowercase();
        if name.ends_with(".gt.png") {
            continue;
        }
        if !(name.ends_with(".jpg") || name.ends_with(".jpeg")) {
            report.skipped(image, "not a JPEG fundus image");
            continue;
        }
        let id = stem(&image);
        let gt = image.with_file_name(format!("{id}.GT.png"));
        if gt.is_file() {
            jobs.push(Job::Pair { id, image, mask: Some(gt) });
        } else {
            report.skipped(image, format!("no companion {id}.GT.png"));
        }
    }
    let samples = run_jobs(jobs, DatasetKind::HeiMed, opts, &mut report)?;
    Ok((samples, report))
}

/// `images/<stem>.*` with masks `masks/<stem>.png`; the layout written by
/// [`super::materialize_expansion`].
pub fn load_dir(root: &Path, opts: &LoadOptions) -> Result<(Vec<FundusSample>, LoadReport)> {
    let images = root.join("images");
    let masks = root.join("masks");
    require_dir(&images, "dataset")?;
    require_dir(&masks, "dataset")?;
    let mask_files: BTreeMap<String, PathBuf> = image_files(&masks).into_iter().map(|p| (stem(&p), p)).collect();
    let mut report = LoadReport::default();
    let mut jobs = Vec::new();
    for image in image_files(&images) {
        let id = stem(&image);
        match mask_files.get(&id) {
            Some(m) => jobs.push(Job::Pair { id, image, mask: Some(m.clone()) }),
            None => report.skipped(image, format!("no masks/{id}.png")),
        }
    }
    let samples = run_jobs(jobs, DatasetKind::Dir, opts, &mut report)?;
    Ok((samples, report))
}
