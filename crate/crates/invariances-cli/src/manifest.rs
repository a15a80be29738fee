//! Run directories and the manifest that makes a run reproducible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::config::Config;
use crate::error::CliError;

/// Where a run writes its artifacts.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    /// Resolve the run directory: `run.dir` verbatim when set, otherwise a
    /// fresh timestamped directory under `out`.
    pub fn prepare(command: &str, cfg: &Config) -> Result<RunPaths, CliError> {
        let dir = match cfg.opt_str("run.dir") {
            Some(d) => PathBuf::from(d),
            None => {
                let parent = PathBuf::from(cfg.str("out"));
                let stamp = utc_stamp();
                let mut dir = parent.join(format!("{stamp}-{command}"));
                let mut n = 1;
                while dir.exists() {
                    n += 1;
                    dir = parent.join(format!("{stamp}-{command}-{n}"));
                }
                dir
            }
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::runtime(format!("cannot create run directory {}: {e}", dir.display())))?;
        Ok(RunPaths { dir })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// `YYYYmmdd-HHMMSS` in UTC, from the civil-from-days algorithm.
fn utc_stamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = (secs / 86_400) as i64;
    let (h, m, s) = {
        let t = secs % 86_400;
        (t / 3600, (t / 60) % 60, t % 60)
    };
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let mo = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if mo <= 2 { y + 1 } else { y };
    format!("{y:04}{mo:02}{d:02}-{h:02}{m:02}{s:02}")
}

/// What a finished run records: enough to reproduce it and find every
/// artifact. Artifact paths are relative to the run directory so two runs
/// of the same configuration differ only in their timings.
#[derive(Serialize)]
pub struct Manifest {
    /// Build identifier of the binary that produced the run.
    pub build: String,
    /// Subcommand that was executed.
    pub command: String,
    /// The fully resolved configuration.
    pub config: BTreeMap<String, Value>,
    /// Artifact label → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Headline metric values, dotted by stage.
    pub metrics: BTreeMap<String, Value>,
    /// Wall-clock seconds per completed stage.
    pub timings_s: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str, config: BTreeMap<String, Value>) -> Manifest {
        Manifest {
            build: format!("invariances {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config,
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, label: &str, relative: &str) {
        self.artifacts.insert(label.to_string(), relative.to_string());
    }

    pub fn metric(&mut self, name: &str, value: impl Into<Value>) {
        self.metrics.insert(name.to_string(), value.into());
    }

    pub fn timing(&mut self, stage: &str, seconds: f64) {
        self.timings_s.insert(stage.to_string(), seconds);
    }

    /// Verify every listed artifact exists, then write `manifest.json`.
    pub fn write(&self, paths: &RunPaths) -> Result<PathBuf, CliError> {
        for (label, rel) in &self.artifacts {
            let p = paths.dir.join(rel);
            if !p.exists() {
                return Err(CliError::runtime(format!(
                    "manifest lists artifact `{label}` at {} but the file does not exist",
                    p.display()
                )));
            }
        }
        let path = paths.file("manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// Write one JSON object per line.
pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| CliError::runtime(format!("cannot serialize record: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a pretty JSON document with a trailing newline.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("cannot serialize document: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_refuses_to_list_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths {
            dir: dir.path().to_path_buf(),
        };
        let mut m = Manifest::new("train-cnn", BTreeMap::new());
        m.artifact("checkpoint", "cnn.ivf");
        assert!(m.write(&paths).is_err());

        std::fs::write(paths.file("cnn.ivf"), b"x").unwrap();
        let written = m.write(&paths).unwrap();
        let text = std::fs::read_to_string(written).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "train-cnn");
        assert_eq!(v["artifacts"]["checkpoint"], "cnn.ivf");
    }

    #[test]
    fn timestamps_look_like_utc_stamps() {
        let s = utc_stamp();
        assert_eq!(s.len(), 15);
        assert_eq!(&s[8..9], "-");
        assert!(s[..8].chars().all(|c| c.is_ascii_digit()));
    }

    #[test]
    fn fresh_run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::defaults();
        cfg.set_flag("out", dir.path().to_str().unwrap()).unwrap();
        let a = RunPaths::prepare("all", &cfg).unwrap();
        let b = RunPaths::prepare("all", &cfg).unwrap();
        assert_ne!(a.dir, b.dir);
        assert!(a.dir.exists() && b.dir.exists());
    }
}
