//! Synthetic fundus-like images with bright blob "exudates", and writers
//! for miniature copies of each benchmark's directory layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{write_gray, write_mask, write_rgb};
use super::{DatasetKind, FundusSample};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub blobs: (usize, usize),
    /// Blob radius range in pixels.
    pub radius: (f64, f64),
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { blobs: (1, 4), radius: (2.5, 6.0), noise: 0.04 }
    }
}

const BACKGROUND: [f64; 3] = [0.62, 0.27, 0.12];
const EXUDATE: [f64; 3] = [0.96, 0.86, 0.35];

/// One synthetic frame. `lesioned == false` gives a blob-free image with an
/// all-background mask.
pub fn blob_sample(id: &str, h: usize, w: usize, seed: u64, lesioned: bool, spec: &BlobSpec) -> FundusSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let fov = 0.48 * h.min(w) as f64;
    let count = if lesioned { rng.random_range(spec.blobs.0..=spec.blobs.1) } else { 0 };
    let blobs: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            let r = rng.random_range(spec.radius.0..=spec.radius.1);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(0.0..(fov - r).max(0.0));
            (cy + d * a.sin(), cx + d * a.cos(), r)
        })
        .collect();
    let mut mask = Tensor::zeros(Shape::new(1, 1, h, w));
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside_fov = (py - cy).hypot(px - cx) <= fov;
            let lesion = blobs.iter().any(|&(by, bx, r)| (py - by).hypot(px - bx) <= r);
            if lesion {
                mask.set([0, 0, y, x], 1.0);
            }
            let shade = 1.0 - 0.35 * ((py - cy).hypot(px - cx) / fov).min(1.0);
            for c in 0..3 {
                let base = if lesion {
                    EXUDATE[c]
                } else if inside_fov {
                    BACKGROUND[c] * shade
                } else {
                    0.02
                };
                let v = base + rng.random_range(-spec.noise..=spec.noise);
                image.set([0, c, y, x], v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    FundusSample::new(id, DatasetKind::Synthetic, image, mask).expect("consistent synthetic sample")
}

/// `count` lesioned frames with ids `synth0000`, `synth0001`, ...
pub fn blob_dataset(count: usize, h: usize, w: usize, seed: u64) -> Vec<FundusSample> {
    let spec = BlobSpec::default();
    (0..count)
        .map(|i| blob_sample(&format!("synth{i:04}"), h, w, mix(seed, i as u64), true, &spec))
        .collect()
}

fn mix(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i).rotate_left(17) ^ i
}

/// E-ophtha-EX layout: `EX/E<nnn>/<id>.jpg` with
/// `Annotation_EX/E<nnn>/<id>_EX.png`, and `healthy/H<nnn>/<id>.jpg`.
pub fn write_eophtha_fixture(root: &Path, lesioned: usize, healthy: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    let spec = BlobSpec::default();
    for i in 0..lesioned {
        let id = format!("C{i:04}");
        let s = blob_sample(&id, h, w, mix(seed, i as u64), true, &spec);
        let patient = format!("E{:03}", i / 4);
        write_rgb(&root.join("EX").join(&patient).join(format!("{id}.jpg")), &s.image, 0)?;
        write_mask(&root.join("Annotation_EX").join(&patient).join(format!("{id}_EX.png")), &s.mask, 0)?;
    }
    for i in 0..healthy {
        let id = format!("H{i:04}");
        let s = blob_sample(&id, h, w, mix(seed ^ 0xABCD, i as u64), false, &spec);
        write_rgb(&root.join("healthy").join(format!("H{:03}", i / 4)).join(format!("{id}.jpg")), &s.image, 0)?;
    }
    Ok(())
}

/// DiaretDB1 layout: `resources/images/ddb1_fundusimages/image<nnn>.png` and
/// four expert directories under `resources/images/ddb1_groundtruth/`.
/// Each expert marks every blob independently with probability 0.75, at a
/// confidence level from {0.5, 0.75, 1.0}.
pub fn write_diaretdb1_fixture(root: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    let base = root.join("resources").join("images");
    let spec = BlobSpec::default();
    for i in 0..count {
        let id = format!("image{:03}", i + 1);
        let s = blob_sample(&id, h, w, mix(seed, i as u64), true, &spec);
        write_rgb(&base.join("ddb1_fundusimages").join(format!("{id}.png")), &s.image, 0)?;
        let components = components(&s.mask, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5EED, i as u64));
        for e in 0..4 {
            let mut map = Tensor::<f32>::zeros(Shape::new(1, 1, h, w));
            for comp in &components {
                if rng.random_bool(0.75) {
                    let level = [0.5f32, 0.75, 1.0][rng.random_range(0..3)];
                    for &p in comp {
                        map.data_mut()[p] = level;
                    }
                }
            }
            write_gray(&base.join("ddb1_groundtruth").join(format!("expert{}", e + 1)).join(format!("{id}.png")), &map, 0)?;
        }
    }
    Ok(())
}

/// 4-connected components of a binary mask, as lists of flat offsets.
fn components(mask: &Tensor<f32>, h: usize, w: usize) -> Vec<Vec<usize>> {
    let m = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if m[start] == 0.0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if m[q] > 0.0 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// HEI-MED layout: `DMED/<id>.jpg` with `DMED/<id>.GT.png`. Every third
/// image is blob-free.
pub fn write_heimed_fixture(root: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    let spec = BlobSpec::default();
    for i in 0..count {
        let id = format!("2005{i:04}_PP");
        let s = blob_sample(&id, h, w, mix(seed, i as u64), i % 3 != 2, &spec);
        let dir = root.join("DMED");
        write_rgb(&dir.join(format!("{id}.jpg")), &s.image, 0)?;
        write_mask(&dir.join(format!("{id}.GT.png")), &s.mask, 0)?;
    }
    Ok(())
}

/// Plain `images/<id>.png` + `masks/<id>.png`; every fourth image is
/// blob-free.
pub fn write_dir_fixture(root: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    let spec = BlobSpec::default();
    for i in 0..count {
        let id = format!("synth{i:04}");
        let s = blob_sample(&id, h, w, mix(seed, i as u64), i % 4 != 3, &spec);
        write_rgb(&root.join("images").join(format!("{id}.png")), &s.image, 0)?;
        write_mask(&root.join("masks").join(format!("{id}.png")), &s.mask, 0)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn healthy_frames_have_empty_masks() {
        let s = blob_sample("h", 32, 40, 1, false, &BlobSpec::default());
        assert_eq!(s.positive_pixels(), 0);
        let s = blob_sample("l", 32, 40, 1, true, &BlobSpec::default());
        assert!(s.positive_pixels() > 0);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_is_seeded() {
        assert_eq!(blob_dataset(3, 16, 16, 5), blob_dataset(3, 16, 16, 5));
        assert_ne!(blob_dataset(3, 16, 16, 5), blob_dataset(3, 16, 16, 6));
    }

    #[test]
    fn components_split_disjoint_blobs() {
        let mask = Tensor::from_fn(Shape::new(1, 1, 4, 5), |[_, _, y, x]| ((x == 0) || (x == 3 && y < 2)) as u8 as f32);
        let c = components(&mask, 4, 5);
        assert_eq!(c.len(), 2);
        assert_eq!(c.iter().map(Vec::len).sum::<usize>(), 6);
    }
}
