use std::path::{Path, PathBuf};

use rtcnet::config::KvConfig;
use rtcnet::manifest::{RUN_MANIFEST_FILE, TOOL_VERSION};
use rtcnet::{execute, replay, Command, DatasetKind, RunManifest, RunRequest};

fn tiny_config() -> KvConfig {
    KvConfig::parse(
        "input_h = 32\ninput_w = 32\nencoder_channels = 4,4,4,4\ndecoder_channels = 4,4,4,4\n\
         epochs = 2\nbatch_size = 2\nlearning_rate = 0.01\naugment.target_count = 12\n\
         synth.count = 8\nprecision = f64\n",
    )
    .unwrap()
}

fn request(command: Command, out: &Path) -> RunRequest {
    let mut r = RunRequest::new(command);
    r.seed = 21;
    r.config = tiny_config();
    r.out = Some(out.to_path_buf());
    r
}

fn synth_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    execute(&request(Command::Synth, &data)).unwrap();
    data
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_replay_is_bit_exact_in_double_precision() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_data(tmp.path());
    let first = tmp.path().join("run1");
    let mut req = request(Command::Pipeline, &first);
    req.dataset = Some(DatasetKind::Dir);
    req.data = Some(data);
    let outcome = execute(&req).unwrap();
    assert_eq!(outcome.report.as_ref().unwrap().images, 2);

    let manifest = RunManifest::from_file(&first.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.request.command, Command::Pipeline);
    assert_eq!(manifest.tool_version, TOOL_VERSION);
    let plan = manifest.request.split.clone().unwrap();
    assert_eq!((plan.train.len(), plan.test.len()), (6, 2));
    assert_eq!(manifest.resolved.get("precision"), Some("f64"));

    let second = tmp.path().join("run2");
    replay(&manifest, Some(&second)).unwrap();
    for f in ["train/weights.bin", "train/train.log", "eval/report.tsv", "eval/per-image.tsv", "augmented/manifest.tsv"] {
        let (a, b) = (read(first.join(f)), read(second.join(f)));
        if f.ends_with("train.log") {
            // Lines carry wall-clock seconds; everything before them must match.
            let strip = |v: &[u8]| String::from_utf8_lossy(v).lines().map(|l| l.split(" seconds=").next().unwrap().to_string()).collect::<Vec<_>>();
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert!(a == b, "{f} differs between run and replay");
        }
    }
    let replayed = RunManifest::from_file(&second.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(replayed.request.split, manifest.request.split);
    assert_eq!(replayed.resolved.to_canonical_text(), manifest.resolved.to_canonical_text());
}

#[test]
fn evaluating_written_masks_matches_evaluating_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_data(tmp.path());
    let mut train = request(Command::Train, &tmp.path().join("train"));
    train.dataset = Some(DatasetKind::Dir);
    train.data = Some(data.clone());
    execute(&train).unwrap();
    let weights = tmp.path().join("train/weights.bin");

    let mut seg = request(Command::Segment, &tmp.path().join("seg"));
    seg.data = Some(data.join("images"));
    seg.weights = Some(weights.clone());
    execute(&seg).unwrap();
    assert_eq!(std::fs::read_dir(tmp.path().join("seg/overlays")).unwrap().count(), 8);

    let mut by_model = request(Command::Evaluate, &tmp.path().join("eval-w"));
    by_model.dataset = Some(DatasetKind::Dir);
    by_model.data = Some(data.clone());
    by_model.weights = Some(weights);
    let a = execute(&by_model).unwrap().report.unwrap();

    let mut by_masks = request(Command::Evaluate, &tmp.path().join("eval-p"));
    by_masks.dataset = Some(DatasetKind::Dir);
    by_masks.data = Some(data);
    by_masks.predictions = Some(tmp.path().join("seg"));
    let b = execute(&by_masks).unwrap().report.unwrap();
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.screening, b.screening);
    assert_eq!(read(tmp.path().join("eval-w/per-image.tsv")), read(tmp.path().join("eval-p/per-image.tsv")));
}

#[test]
fn every_command_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("summary");
    let o = execute(&request(Command::Summary, &out)).unwrap();
    assert!(o.text.contains("parameters: "));
    let m = RunManifest::from_file(&out.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(m.request.command, Command::Summary);
    assert!(m.finished_unix >= m.started_unix);
    assert_eq!(m.request.config.get("epochs"), Some("2"));
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = request(Command::Evaluate, tmp.path());
    r.dataset = Some(DatasetKind::Dir);
    r.data = Some(tmp.path().join("absent"));
    assert!(execute(&r).is_err());
    r.weights = Some(tmp.path().join("w.bin"));
    r.predictions = Some(tmp.path().join("p"));
    let e = execute(&r).unwrap_err().to_string();
    assert!(e.contains("weights") && e.contains("predictions"), "{e}");
}
