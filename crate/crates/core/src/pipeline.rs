//! The commands behind the CLI: augment, train, segment, evaluate,
//! summary, synth and the full augment-train-evaluate pipeline.
//!
//! Every command takes a [`RunRequest`] and returns the text to show plus
//! the [`RunManifest`] it wrote. The CLI only parses flags into a request.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::augment::{apply, AugmentSpec, GeoTransform, AUGMENT_KEYS};
use crate::config::KvConfig;
use crate::datasets::io::{is_image_file, read_mask, read_rgb, render_overlay, write_mask, write_rgb};
use crate::datasets::synth::{write_diaretdb1_fixture, write_dir_fixture, write_eophtha_fixture, write_heimed_fixture};
use crate::datasets::{
    load_diaretdb1_with, load_dir, load_eophtha_with, load_heimed_with, materialize_expansion, split, DatasetKind,
    FundusSample, LoadOptions, LoadReport, MaterializedSet, SplitPlan, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::manifest::{Command, RunManifest, RunRequest, Seeds, TOOL_VERSION};
use crate::metrics::{aggregate_report, image_evals_tsv, reports_table, reports_tsv, Averaging, ImageEval, Report};
use crate::net::{load_weights, peek_dtype, save_weights, Model, NetworkConfig, Plan, CONFIG_KEYS};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::{train, SampleSource, TrainConfig, TRAIN_KEYS};

/// Calls a generic command in the given precision.
macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Keys read by the commands themselves.
pub const RUN_KEYS: &[&str] = &[
    "precision",
    "split.test_count",
    "eval.min_area",
    "eval.averaging",
    "fusion_threshold",
    "synth.count",
    "synth.healthy",
];

/// Every key a config file may contain.
pub fn known_keys() -> Vec<&'static str> {
    CONFIG_KEYS.iter().chain(TRAIN_KEYS).chain(AUGMENT_KEYS).chain(RUN_KEYS).copied().collect()
}

/// A config with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub seeds: Seeds,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub precision: DType,
    /// `None` holds out the E-ophtha proportion, 22 of 82.
    pub test_count: Option<usize>,
    pub min_area: usize,
    pub averaging: Averaging,
    pub fusion_threshold: f64,
    pub synth_count: usize,
    pub synth_healthy: usize,
}

impl RunSettings {
    pub fn resolve(kv: &KvConfig, seed: u64) -> Result<RunSettings> {
        kv.check_known(&known_keys())?;
        let seeds = Seeds::from_run_seed(seed);
        let network = NetworkConfig::from_kv(kv)?;
        let mut train = TrainConfig::from_kv(kv)?;
        train.seed = seeds.train;
        let augment = AugmentSpec::from_kv(kv, seeds.augment)?;
        let fusion_threshold = kv.parsed_or("fusion_threshold", 0.5)?;
        if !(0.0..=1.0).contains(&fusion_threshold) {
            return Err(kv.invalid_value("fusion_threshold", format!("must lie in [0, 1], got {fusion_threshold}")));
        }
        Ok(RunSettings {
            seed,
            seeds,
            network,
            train,
            augment,
            precision: kv.parsed_or("precision", DType::F32)?,
            test_count: kv.parsed("split.test_count")?,
            min_area: kv.parsed_or("eval.min_area", 1)?,
            averaging: kv.parsed_or("eval.averaging", Averaging::Micro)?,
            fusion_threshold,
            synth_count: kv.parsed_or("synth.count", 8)?,
            synth_healthy: kv.parsed_or("synth.healthy", 2)?,
        })
    }

    /// Resolved values under their config keys.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.network.to_kv();
        kv.merge(&self.train.to_kv());
        kv.merge(&self.augment.to_kv());
        kv.set("seed", self.seed);
        kv.set("precision", self.precision);
        if let Some(n) = self.test_count {
            kv.set("split.test_count", n);
        }
        kv.set("eval.min_area", self.min_area);
        kv.set("eval.averaging", self.averaging);
        kv.set("fusion_threshold", self.fusion_threshold);
        kv.set("synth.count", self.synth_count);
        kv.set("synth.healthy", self.synth_healthy);
        kv
    }

    fn load_options(&self, resize: Option<(usize, usize)>) -> LoadOptions {
        LoadOptions { fusion_threshold: self.fusion_threshold, resize, expert_dirs: None }
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.network.input_h, self.network.input_w)
    }
}

/// Held-out count for `n` samples: the E-ophtha ratio 22/82, rounded, with
/// at least one sample on each side.
pub fn default_test_count(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * 22.0 / 82.0).round() as usize).clamp(1, n - 1)
}

/// Result of one command.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    /// Human-readable summary for the terminal.
    pub text: String,
    pub report: Option<Report>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn need<'a>(value: &'a Option<PathBuf>, command: Command, what: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Error::InvalidArgument(format!("`{command}` needs {what}")))
}

fn need_kind(req: &RunRequest) -> Result<DatasetKind> {
    req.dataset.ok_or_else(|| Error::InvalidArgument(format!("`{}` needs a dataset kind", req.command)))
}

/// Runs `req` and writes its manifest into the output directory.
pub fn execute(req: &RunRequest) -> Result<Outcome> {
    let started_unix = now_unix();
    let settings = RunSettings::resolve(&req.config, req.seed)?;
    let mut req = req.clone();
    let (text, report) = match req.command {
        Command::Summary => (summary_text(&settings.network)?, None),
        Command::Synth => (synth(&req, &settings)?, None),
        Command::Augment => (augment(&req, &settings)?, None),
        Command::Train => (dispatch!(settings.precision, train_command(&req, &settings))?, None),
        Command::Segment => {
            let dtype = peek_dtype(need(&req.weights, req.command, "a weights file")?)?;
            (dispatch!(dtype, segment(&req, &settings))?, None)
        }
        Command::Evaluate => {
            let report = evaluate_command(&req, &settings)?;
            (reports_table(std::slice::from_ref(&report)), Some(report))
        }
        Command::Pipeline => {
            let (report, plan) = dispatch!(settings.precision, pipeline(&req, &settings))?;
            req.split = Some(plan);
            (reports_table(std::slice::from_ref(&report)), Some(report))
        }
    };
    let manifest = RunManifest {
        request: req,
        tool_version: TOOL_VERSION.to_string(),
        seeds: settings.seeds,
        resolved: settings.to_kv(),
        started_unix,
        finished_unix: now_unix(),
    };
    if let Some(out) = &manifest.request.out {
        manifest.write_to(out)?;
    }
    Ok(Outcome { manifest, text, report })
}

/// Re-runs the command recorded in `manifest`, writing to `out` (or the
/// recorded output directory). The recorded split is reused.
pub fn replay(manifest: &RunManifest, out: Option<&Path>) -> Result<Outcome> {
    let mut req = manifest.request.clone();
    if let Some(out) = out {
        req.out = Some(out.to_path_buf());
    }
    execute(&req)
}

/// Parameter count, layer table and shape chain of `config`.
pub fn summary_text(config: &NetworkConfig) -> Result<String> {
    let plan = Plan::new(config)?;
    let mut s = format!(
        "network: input {}x{}x{}, encoder {:?}, decoder {:?}, upsample {}\nparameters: {}\n\n",
        config.input_h,
        config.input_w,
        config.input_c,
        config.encoder_channels,
        config.decoder_channels,
        config.upsample_mode,
        plan.param_count()
    );
    s.push_str(&format!("{:<20} {:<16} {:>8} {:>12}\n", "layer", "kernel", "stride", "params"));
    for l in &plan.layers {
        let k = l.kernel_shape;
        s.push_str(&format!(
            "{:<20} {:<16} {:>8} {:>12}\n",
            l.name,
            format!("{}x{}x{}x{}", k.n(), k.c(), k.h(), k.w()),
            l.stride,
            l.param_count()
        ));
    }
    s.push_str(&format!("\n{:<20} {:>16} {:>12}\n", "stage", "h x w x c", "params"));
    for row in plan.shape_chain(config) {
        s.push_str(&row.to_string());
        s.push('\n');
    }
    Ok(s)
}

/// Loads a dataset, failing when nothing loads. The report is written to
/// `out/load-report.tsv` when `out` is given.
pub fn load_samples(
    kind: DatasetKind,
    root: &Path,
    opts: &LoadOptions,
    out: Option<&Path>,
) -> Result<(Vec<FundusSample>, LoadReport)> {
    let (samples, report) = match kind {
        DatasetKind::EOphtha => load_eophtha_with(root, opts)?,
        DatasetKind::DiaretDb1 => load_diaretdb1_with(root, opts)?,
        DatasetKind::HeiMed => load_heimed_with(root, opts)?,
        DatasetKind::Dir => load_dir(root, opts)?,
        DatasetKind::Synthetic => {
            return Err(Error::InvalidArgument("synthetic data is not read from disk; write a fixture with `synth`".into()))
        }
    };
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("load-report.tsv"), report.to_tsv())?;
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples loaded from {} ({} files skipped)",
            root.display(),
            report.skipped_count()
        )));
    }
    Ok((samples, report))
}

fn synth(req: &RunRequest, s: &RunSettings) -> Result<String> {
    let out = need(&req.out, req.command, "an output directory")?;
    let kind = req.dataset.unwrap_or(DatasetKind::Dir);
    let (h, w) = s.input_dims();
    let seed = s.seeds.synth;
    match kind {
        DatasetKind::EOphtha => write_eophtha_fixture(out, s.synth_count, s.synth_healthy, h, w, seed)?,
        DatasetKind::DiaretDb1 => write_diaretdb1_fixture(out, s.synth_count, h, w, seed)?,
        DatasetKind::HeiMed => write_heimed_fixture(out, s.synth_count, h, w, seed)?,
        DatasetKind::Dir | DatasetKind::Synthetic => write_dir_fixture(out, s.synth_count, h, w, seed)?,
    }
    Ok(format!("wrote a {kind} fixture ({h}x{w}) to {}\n", out.display()))
}

fn augment(req: &RunRequest, s: &RunSettings) -> Result<String> {
    let out = need(&req.out, req.command, "an output directory")?;
    let data = need(&req.data, req.command, "a data path")?;
    let (samples, _) = load_samples(need_kind(req)?, data, &s.load_options(Some(s.input_dims())), Some(out))?;
    let records = materialize_expansion(&samples, &s.augment, out)?;
    Ok(format!("expanded {} sources to {} pairs in {}\n", samples.len(), records.len(), out.display()))
}

/// Trains a fresh model under `dir`: `checkpoints/`, `train.log` and
/// `weights.bin`.
fn train_into<T: Scalar>(data: &dyn SampleSource<T>, s: &RunSettings, dir: &Path) -> Result<(Model<T>, String)> {
    std::fs::create_dir_all(dir)?;
    let model = Model::<T>::build(s.network.clone(), s.seeds.model)?;
    let cfg = TrainConfig { checkpoint_dir: Some(dir.join("checkpoints")), ..s.train.clone() };
    let mut log = BufWriter::new(File::create(dir.join("train.log"))?);
    let (model, history) = train(model, data, &cfg, Some(&mut log))?;
    drop(log);
    save_weights(&model, &dir.join("weights.bin"))?;
    let last = history.epochs.last().map(|e| e.to_string()).unwrap_or_default();
    Ok((model, format!("trained {} parameters for {} epochs on {} samples\n{last}\n", model_params(s), cfg.epochs, data.len())))
}

fn model_params(s: &RunSettings) -> usize {
    Plan::new(&s.network).map(|p| p.param_count()).unwrap_or(0)
}

fn train_command<T: Scalar>(req: &RunRequest, s: &RunSettings) -> Result<String> {
    let out = need(&req.out, req.command, "an output directory")?;
    let data = need(&req.data, req.command, "a data path")?;
    let kind = req.dataset.unwrap_or(DatasetKind::Dir);
    // A materialized expansion is streamed from disk rather than held in memory.
    if kind == DatasetKind::Dir && data.join(MANIFEST_FILE).is_file() {
        let set = MaterializedSet::open(data)?;
        return Ok(train_into::<T>(&set, s, out)?.1);
    }
    let (samples, _) = load_samples(kind, data, &s.load_options(Some(s.input_dims())), Some(out))?;
    Ok(train_into::<T>(&samples, s, out)?.1)
}

/// Predicted masks for `samples`, which must already be at the model's
/// input resolution.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, samples: &[FundusSample], min_area: usize) -> Result<Vec<ImageEval>> {
    samples
        .iter()
        .map(|s| {
            let pred = model.predict_mask(&s.image.cast::<T>())?;
            ImageEval::new(s.id.clone(), &pred, &s.mask.cast::<T>(), min_area)
        })
        .collect()
}

/// Writes `report.tsv`, `report.txt` and `per-image.tsv` under `dir`.
pub fn write_report_files(dir: &Path, evals: &[ImageEval], report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let one = std::slice::from_ref(report);
    std::fs::write(dir.join("report.tsv"), reports_tsv(one))?;
    std::fs::write(dir.join("report.txt"), reports_table(one))?;
    std::fs::write(dir.join("per-image.tsv"), image_evals_tsv(evals))?;
    Ok(())
}

fn evaluate_command(req: &RunRequest, s: &RunSettings) -> Result<Report> {
    let data = need(&req.data, req.command, "a data path")?;
    let kind = need_kind(req)?;
    let evals = match (&req.weights, &req.predictions) {
        (Some(w), None) => {
            let dtype = peek_dtype(w)?;
            dispatch!(dtype, evaluate_weights(w, kind, data, s, req.out.as_deref()))?
        }
        (None, Some(p)) => evaluate_predictions(p, kind, data, s, req.out.as_deref())?,
        _ => return Err(Error::InvalidArgument("`evaluate` needs exactly one of a weights file or a predictions directory".into())),
    };
    let report = aggregate_report(&kind.to_string(), &evals, s.averaging)?;
    if let Some(out) = &req.out {
        write_report_files(out, &evals, &report)?;
    }
    Ok(report)
}

fn evaluate_weights<T: Scalar>(
    weights: &Path,
    kind: DatasetKind,
    data: &Path,
    s: &RunSettings,
    out: Option<&Path>,
) -> Result<Vec<ImageEval>> {
    let model = load_weights::<T>(weights)?;
    let dims = (model.config().input_h, model.config().input_w);
    let (samples, _) = load_samples(kind, data, &s.load_options(Some(dims)), out)?;
    evaluate_model(&model, &samples, s.min_area)
}

/// Ground truth at native resolution against `<pred>/masks/<id>.png` (as
/// written by `segment`) or `<pred>/<id>.png`.
fn evaluate_predictions(
    pred: &Path,
    kind: DatasetKind,
    data: &Path,
    s: &RunSettings,
    out: Option<&Path>,
) -> Result<Vec<ImageEval>> {
    let dir = if pred.join("masks").is_dir() { pred.join("masks") } else { pred.to_path_buf() };
    let (samples, _) = load_samples(kind, data, &s.load_options(None), out)?;
    samples
        .iter()
        .map(|smp| {
            let path = dir.join(format!("{}.png", smp.id));
            if !path.is_file() {
                return Err(Error::Dataset(format!("no prediction {} for sample `{}`", path.display(), smp.id)));
            }
            ImageEval::new(smp.id.clone(), &read_mask(&path)?, &smp.mask, s.min_area)
        })
        .collect()
}

/// `(id, image)` for every image to segment: a loaded dataset, one file,
/// or the image files directly inside a directory.
fn segment_inputs(req: &RunRequest, s: &RunSettings, data: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    if let Some(kind) = req.dataset {
        let (samples, _) = load_samples(kind, data, &s.load_options(None), req.out.as_deref())?;
        return Ok(samples.into_iter().map(|x| (x.id, x.image)).collect());
    }
    let files: Vec<PathBuf> = if data.is_file() {
        vec![data.to_path_buf()]
    } else {
        let mut f: Vec<PathBuf> = std::fs::read_dir(data)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        f.sort();
        f
    };
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images found at {}", data.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_rgb(&p)?))
        })
        .collect()
}

/// Predicted exudate mask at the image's own resolution.
pub fn segment_image<T: Scalar>(model: &Model<T>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape().h(), image.shape().w());
    let (mh, mw) = (model.config().input_h, model.config().input_w);
    let blank = Tensor::<f32>::zeros(image.shape().with_channels(1));
    let (resized, _) = apply(image, &blank, GeoTransform::Resize { h: mh, w: mw })?;
    let pred = model.predict_mask(&resized.cast::<T>())?.cast::<f32>();
    if (h, w) == (mh, mw) {
        return Ok(pred);
    }
    let (_, back) = apply(&Tensor::zeros(pred.shape().with_channels(3)), &pred, GeoTransform::Resize { h, w })?;
    Ok(back)
}

fn segment<T: Scalar>(req: &RunRequest, s: &RunSettings) -> Result<String> {
    let out = need(&req.out, req.command, "an output directory")?;
    let data = need(&req.data, req.command, "a data path")?;
    let model = load_weights::<T>(need(&req.weights, req.command, "a weights file")?)?;
    let inputs = segment_inputs(req, s, data)?;
    let mut flagged = 0;
    for (id, image) in &inputs {
        let mask = segment_image(&model, image)?;
        let positives = mask.data().iter().filter(|&&v| v > 0.0).count();
        if positives >= s.min_area {
            flagged += 1;
        }
        write_mask(&out.join("masks").join(format!("{id}.png")), &mask, 0)?;
        write_rgb(&out.join("overlays").join(format!("{id}.png")), &render_overlay(image, &mask)?, 0)?;
    }
    Ok(format!(
        "segmented {} images into {} ({flagged} with at least {} exudate pixels)\n",
        inputs.len(),
        out.display(),
        s.min_area
    ))
}

fn pipeline<T: Scalar>(req: &RunRequest, s: &RunSettings) -> Result<(Report, SplitPlan)> {
    let out = need(&req.out, req.command, "an output directory")?;
    let data = need(&req.data, req.command, "a data path")?;
    let kind = need_kind(req)?;
    let (samples, _) = load_samples(kind, data, &s.load_options(Some(s.input_dims())), Some(out))?;
    let plan = match &req.split {
        Some(p) => p.clone(),
        None => {
            let ids: Vec<String> = samples.iter().map(|x| x.id.clone()).collect();
            let test_count = s.test_count.unwrap_or_else(|| default_test_count(ids.len()));
            SplitPlan::random(&ids, test_count, s.seeds.split)?
        }
    };
    let (train_set, test_set) = split(samples, &plan)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "the pipeline needs both a train and a test set (got {} and {})",
            train_set.len(),
            test_set.len()
        )));
    }
    let augmented = out.join("augmented");
    materialize_expansion(&train_set, &s.augment, &augmented)?;
    let set = MaterializedSet::open(&augmented)?;
    let (model, _) = train_into::<T>(&set, s, &out.join("train"))?;
    let evals = evaluate_model(&model, &test_set, s.min_area)?;
    let report = aggregate_report(&kind.to_string(), &evals, s.averaging)?;
    write_report_files(&out.join("eval"), &evals, &report)?;
    Ok((report, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_count_follows_the_eophtha_ratio() {
        assert_eq!(default_test_count(82), 22);
        assert_eq!(default_test_count(2), 1);
        assert_eq!(default_test_count(10), 3);
        assert_eq!(default_test_count(1), 0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let kv = KvConfig::parse("epochs = 2\nbogus = 1\n").unwrap();
        let err = RunSettings::resolve(&kv, 0).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
    }

    #[test]
    fn resolved_settings_round_trip() {
        let kv = KvConfig::parse("input_h = 32\ninput_w = 48\nprecision = f64\naugment.target_count = 5\n").unwrap();
        let s = RunSettings::resolve(&kv, 3).unwrap();
        let back = RunSettings::resolve(&s.to_kv(), 3).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.precision, DType::F64);
    }

    #[test]
    fn summary_ends_with_the_head() {
        let text = summary_text(&NetworkConfig::default()).unwrap();
        assert!(text.contains("parameters: 10627138"));
        assert!(text.trim_end().lines().last().unwrap().contains("448x512x2"));
    }
}
