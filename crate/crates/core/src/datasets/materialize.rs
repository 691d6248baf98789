use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::io::{read_mask, read_rgb, write_mask, write_rgb};
use super::FundusSample;
use crate::augment::{apply_chain, plan_expansion, AugmentSpec, ExpansionRecord, TransformChain};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::train::SampleSource;

pub const MANIFEST_FILE: &str = "manifest.tsv";

fn file_id(id: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(4);
    format!("{id:0width$}")
}

/// Expands `samples` per `spec` and writes `images/NNNN.png`,
/// `masks/NNNN.png` and `manifest.tsv` under `out_dir`.
///
/// Pairs are generated one at a time, so memory stays at the source set
/// plus a few frames regardless of `target_count`.
pub fn materialize_expansion(
    samples: &[FundusSample],
    spec: &AugmentSpec,
    out_dir: &Path,
) -> Result<Vec<ExpansionRecord>> {
    let dims: Vec<_> = samples.iter().map(FundusSample::dims).collect();
    let plan = plan_expansion(&dims, spec)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let total = plan.len();
    plan.par_iter().try_for_each(|r| -> Result<()> {
        let s = &samples[r.source];
        let (image, mask) = apply_chain(&s.image, &s.mask, &r.chain)?;
        let name = format!("{}.png", file_id(r.id, total));
        write_rgb(&out_dir.join("images").join(&name), &image, 0)?;
        write_mask(&out_dir.join("masks").join(&name), &mask, 0)
    })?;
    let mut manifest = String::from("id\tsource_id\tchain\n");
    for r in &plan {
        writeln!(manifest, "{}\t{}\t{}", file_id(r.id, total), samples[r.source].id, r.chain).expect("string write");
    }
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest)?;
    Ok(plan)
}

/// Rows of a `manifest.tsv`: `(id, source_id, chain)`.
pub fn read_expansion_manifest(path: &Path) -> Result<Vec<(String, String, TransformChain)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Dataset(format!("{} line {}: expected 3 columns", path.display(), i + 1)));
        }
        let chain = cols[2]
            .parse()
            .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rows.push((cols[0].to_string(), cols[1].to_string(), chain));
    }
    Ok(rows)
}

/// A materialized expansion read lazily from disk, one pair per access.
#[derive(Clone, Debug)]
pub struct MaterializedSet {
    dir: PathBuf,
    ids: Vec<String>,
}

impl MaterializedSet {
    pub fn open(dir: &Path) -> Result<MaterializedSet> {
        let rows = read_expansion_manifest(&dir.join(MANIFEST_FILE))?;
        if rows.is_empty() {
            return Err(Error::Dataset(format!("{} lists no pairs", dir.join(MANIFEST_FILE).display())));
        }
        Ok(MaterializedSet { dir: dir.to_path_buf(), ids: rows.into_iter().map(|r| r.0).collect() })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn read(&self, index: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let name = format!("{}.png", self.ids[index]);
        let image = read_rgb(&self.dir.join("images").join(&name))?;
        let mask = read_mask(&self.dir.join("masks").join(&name))?;
        Ok((image, mask))
    }
}

impl<T: Scalar> SampleSource<T> for MaterializedSet {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x, y) = self.read(index)?;
        Ok((x.cast(), y.cast()))
    }
}
