use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::{diff_summary, hash_text, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.resolved.toml";

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .context("artifact path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// An output directory bound to one resolved config.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
}

impl RunDir {
    /// Echoes the resolved config into `root`, or, if a config is already
    /// there, refuses unless it hashes identically.
    pub fn open(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let text = cfg.resolved_toml();
        let hash = hash_text(&text);
        let path = root.join(CONFIG_FILE);
        if path.exists() {
            let stored = read_text(&path)?;
            let stored_hash = hash_text(&stored);
            if stored_hash != hash {
                let diff = diff_summary(&stored, &text);
                let mut msg = format!(
                    "{} was produced by a different config (stored {}, current {})",
                    root.display(),
                    &stored_hash[..12],
                    &hash[..12]
                );
                for line in diff.iter().take(20) {
                    msg.push_str("\n  ");
                    msg.push_str(line);
                }
                if diff.len() > 20 {
                    msg.push_str(&format!("\n  ... and {} more", diff.len() - 20));
                }
                msg.push_str("\nuse a fresh --out directory or restore the original config");
                bail!(msg);
            }
        } else {
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            hash,
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// `rel` if it exists, otherwise an error naming the stage that makes it.
    pub fn require(&self, rel: impl AsRef<Path>, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            bail!(
                "missing {}: run the `{stage}` stage first (m3 {stage} ...)",
                p.display()
            );
        }
        Ok(p)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn same_payload_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let v = serde_json::json!({"b": [1.5, 2], "a": "x"});
        write_json(&dir.path().join("1.json"), &v).unwrap();
        write_json(&dir.path().join("2.json"), &v).unwrap();
        assert_eq!(
            fs::read(dir.path().join("1.json")).unwrap(),
            fs::read(dir.path().join("2.json")).unwrap()
        );
    }

    #[test]
    fn changed_config_is_refused_with_diff() {
        let dir = tempfile::tempdir().unwrap();
        let a = ExperimentConfig::default();
        let run = RunDir::open(dir.path(), &a).unwrap();
        assert_eq!(run.hash, a.hash());
        RunDir::open(dir.path(), &a).unwrap();
        let mut b = a.clone();
        b.train.epochs = 9;
        let e = RunDir::open(dir.path(), &b).unwrap_err().to_string();
        assert!(e.contains("train.epochs: 200 -> 9"), "{e}");
    }

    #[test]
    fn missing_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::open(dir.path(), &ExperimentConfig::default()).unwrap();
        let e = run.require("manifest.csv", "extract").unwrap_err().to_string();
        assert!(e.contains("`extract`"), "{e}");
    }
}
