//! Run manifests: everything a command was asked to do, written in the
//! `key = value` config grammar so a run can be replayed from it.
//!
//! ```text
//! command = pipeline
//! tool_version = 0.1.0
//! seed = 7
//! seeds.model = 1234...
//! dataset = eophtha
//! data = /data/e_ophtha_EX
//! out = /runs/a
//! split.seed = 5678...
//! split.train = C0001,C0004
//! split.test = C0002
//! started_unix = 1760000000
//! finished_unix = 1760000100
//! config.learning_rate = 0.0001
//! ```
//!
//! `config.*` is the fully resolved configuration, defaults included.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::{join_list, KvConfig};
use crate::datasets::{DatasetKind, SplitPlan};
use crate::error::{Error, Result};

pub const RUN_MANIFEST_FILE: &str = "run-manifest.txt";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Augment,
    Train,
    Segment,
    Evaluate,
    Summary,
    Pipeline,
    Synth,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Augment => "augment",
            Command::Train => "train",
            Command::Segment => "segment",
            Command::Evaluate => "evaluate",
            Command::Summary => "summary",
            Command::Pipeline => "pipeline",
            Command::Synth => "synth",
        })
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "augment" => Command::Augment,
            "train" => Command::Train,
            "segment" => Command::Segment,
            "evaluate" => Command::Evaluate,
            "summary" => Command::Summary,
            "pipeline" => Command::Pipeline,
            "synth" => Command::Synth,
            o => return Err(format!("unknown command `{o}`")),
        })
    }
}

/// Per-purpose seeds derived from the single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub split: u64,
    pub augment: u64,
    pub train: u64,
    pub synth: u64,
}

/// First 8 bytes (LE) of SHA-256 over `tag` and the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl Seeds {
    pub fn from_run_seed(seed: u64) -> Seeds {
        Seeds {
            model: derive_seed(seed, "model"),
            split: derive_seed(seed, "split"),
            augment: derive_seed(seed, "augment"),
            train: derive_seed(seed, "train"),
            synth: derive_seed(seed, "synth"),
        }
    }
}

/// Inputs of one command invocation.
#[derive(Clone, Debug)]
pub struct RunRequest {
    pub command: Command,
    pub seed: u64,
    /// Config entries from the file and flags, before defaults are applied.
    pub config: KvConfig,
    pub dataset: Option<DatasetKind>,
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    /// Directory of predicted masks for `evaluate`.
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// A split to reuse instead of drawing one.
    pub split: Option<SplitPlan>,
}

impl RunRequest {
    pub fn new(command: Command) -> RunRequest {
        RunRequest {
            command,
            seed: 0,
            config: KvConfig::new(),
            dataset: None,
            data: None,
            weights: None,
            predictions: None,
            out: None,
            split: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunManifest {
    pub request: RunRequest,
    pub tool_version: String,
    pub seeds: Seeds,
    /// Resolved configuration echo.
    pub resolved: KvConfig,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn check_value(key: &str, v: &str) -> Result<()> {
    if v.contains(['#', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!("manifest value for `{key}` may not contain `#` or newlines: {v:?}")));
    }
    Ok(())
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl RunManifest {
    pub fn to_text(&self) -> Result<String> {
        let r = &self.request;
        let mut rows: Vec<(String, String)> = vec![
            ("command".into(), r.command.to_string()),
            ("tool_version".into(), self.tool_version.clone()),
            ("seed".into(), r.seed.to_string()),
            ("seeds.model".into(), self.seeds.model.to_string()),
            ("seeds.split".into(), self.seeds.split.to_string()),
            ("seeds.augment".into(), self.seeds.augment.to_string()),
            ("seeds.train".into(), self.seeds.train.to_string()),
            ("seeds.synth".into(), self.seeds.synth.to_string()),
        ];
        if let Some(d) = r.dataset {
            rows.push(("dataset".into(), d.to_string()));
        }
        for (k, p) in [("data", &r.data), ("weights", &r.weights), ("predictions", &r.predictions), ("out", &r.out)] {
            if let Some(p) = p {
                rows.push((k.into(), path_text(p)));
            }
        }
        if let Some(s) = &r.split {
            rows.push(("split.seed".into(), s.seed.to_string()));
            rows.push(("split.train".into(), join_list(&s.train)));
            rows.push(("split.test".into(), join_list(&s.test)));
        }
        rows.push(("started_unix".into(), self.started_unix.to_string()));
        rows.push(("finished_unix".into(), self.finished_unix.to_string()));
        for k in self.resolved.keys() {
            rows.push((format!("config.{k}"), self.resolved.get(k).unwrap_or_default().to_string()));
        }
        for k in r.config.keys() {
            rows.push((format!("request.{k}"), r.config.get(k).unwrap_or_default().to_string()));
        }
        let mut text = String::from("# rtcnet run manifest\n");
        for (k, v) in rows {
            check_value(&k, &v)?;
            if v.split(',').any(|item| item.trim() != item) && k.starts_with("split.") {
                return Err(Error::InvalidArgument(format!("sample ids in `{k}` may not have surrounding spaces")));
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        Ok(text)
    }

    pub fn parse(text: &str) -> Result<RunManifest> {
        let kv = KvConfig::parse(text)?;
        let need = |k: &str| kv.get(k).ok_or_else(|| Error::InvalidArgument(format!("manifest lacks `{k}`")));
        let parse_u64 = |k: &str| -> Result<u64> { Ok(kv.parsed::<u64>(k)?.unwrap_or_default()) };
        let command: Command = kv.parsed("command")?.ok_or_else(|| Error::InvalidArgument("manifest lacks `command`".into()))?;
        let mut request = RunRequest::new(command);
        request.seed = need("seed")?.parse().map_err(|e| kv.invalid_value("seed", format!("{e}")))?;
        request.dataset = kv.parsed("dataset")?;
        let path = |k: &str| kv.get(k).map(PathBuf::from);
        request.data = path("data");
        request.weights = path("weights");
        request.predictions = path("predictions");
        request.out = path("out");
        if kv.contains("split.seed") {
            let ids = |k: &str| -> Vec<String> {
                match kv.get(k) {
                    Some("") | None => Vec::new(),
                    Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
                }
            };
            request.split = Some(SplitPlan { train: ids("split.train"), test: ids("split.test"), seed: parse_u64("split.seed")? });
        }
        let mut resolved = KvConfig::new();
        for k in kv.keys() {
            if let Some(rest) = k.strip_prefix("config.") {
                resolved.set(rest, kv.get(k).unwrap_or_default());
            }
            if let Some(rest) = k.strip_prefix("request.") {
                request.config.set(rest, kv.get(k).unwrap_or_default());
            }
        }
        Ok(RunManifest {
            tool_version: need("tool_version")?.to_string(),
            seeds: Seeds::from_run_seed(request.seed),
            request,
            resolved,
            started_unix: parse_u64("started_unix")?,
            finished_unix: parse_u64("finished_unix")?,
        })
    }

    pub fn from_file(path: &Path) -> Result<RunManifest> {
        RunManifest::parse(&std::fs::read_to_string(path)?)
    }

    /// Writes `run-manifest.txt` into the request's output directory.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_MANIFEST_FILE);
        std::fs::write(&path, self.to_text()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_request() {
        let mut r = RunRequest::new(Command::Pipeline);
        r.seed = 9;
        r.config.set("epochs", 3);
        r.dataset = Some(DatasetKind::HeiMed);
        r.data = Some(PathBuf::from("/data/x y"));
        r.out = Some(PathBuf::from("/tmp/out"));
        r.split = Some(SplitPlan { train: vec!["a".into(), "b".into()], test: vec!["c".into()], seed: 4 });
        let mut resolved = KvConfig::new();
        resolved.set("epochs", 3);
        resolved.set("learning_rate", 0.001);
        let m = RunManifest { request: r, tool_version: TOOL_VERSION.into(), seeds: Seeds::from_run_seed(9), resolved, started_unix: 1, finished_unix: 2 };
        let text = m.to_text().unwrap();
        let back = RunManifest::parse(&text).unwrap();
        assert_eq!(back.to_text().unwrap(), text);
        assert_eq!(back.request.split, m.request.split);
        assert_eq!(back.request.config.get("epochs"), Some("3"));
        assert_eq!(back.seeds, m.seeds);
    }

    #[test]
    fn rejects_comment_characters() {
        let mut r = RunRequest::new(Command::Summary);
        r.out = Some(PathBuf::from("/tmp/a#b"));
        let m = RunManifest { request: r, tool_version: "0".into(), seeds: Seeds::from_run_seed(0), resolved: KvConfig::new(), started_unix: 0, finished_unix: 0 };
        assert!(m.to_text().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s = Seeds::from_run_seed(1);
        assert_ne!(s.model, s.train);
        assert_eq!(s, Seeds::from_run_seed(1));
        assert_ne!(s, Seeds::from_run_seed(2));
    }
}
