//! Flag / config-file resolution and run manifests.

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::{self, Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Bad invocation or invalid value; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Manifest keys under these prefixes describe a run rather than configure
/// it, so a manifest can be fed back through `--config`.
const RESERVED: [&str; 3] = ["run.", "input.", "output."];

/// Values from an optional `key=value` file, overridden by flags; records
/// every resolved value for the manifest.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    usage(format!("{}:{}: expected key=value", path.display(), i + 1))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            // manifests record unset options as `key=`
            None => Ok(None),
            Some(raw) if raw.is_empty() => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config value {key}={raw} is invalid"))),
        }
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.push((key.to_string(), value));
    }

    /// Flag, else config file, else `default`.
    pub fn get<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        self.record(key, v.as_ref().map(ToString::to_string).unwrap_or_default());
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.optional(key, flag)?
            .ok_or_else(|| usage(format!("missing required option --{key}")))
    }

    /// Boolean switch: set by the flag or by `key=true` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.from_file(key)?.unwrap_or(false);
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Repeatable flag; the file form is a comma-separated list.
    pub fn list(&mut self, key: &str, flag: Vec<String>) -> Vec<String> {
        let v = if flag.is_empty() {
            self.file
                .get(key)
                .map(|s| {
                    s.split(',')
                        .map(|p| p.trim().to_string())
                        .filter(|p| !p.is_empty())
                        .collect()
                })
                .unwrap_or_default()
        } else {
            flag
        };
        self.record(key, v.join(","));
        v
    }

    /// Fails on config keys that no option consumed.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !RESERVED.iter().any(|p| k.starts_with(p)))
            .filter(|k| !self.resolved.iter().any(|(r, _)| r == *k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }

    pub fn resolved(&self) -> &[(String, String)] {
        &self.resolved
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Files directly inside `dir` (or `dir` itself when it is a file), sorted.
fn files_of(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() && p.file_name().is_some_and(|n| n != "manifest.txt") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Command, resolved configuration and input digests of one invocation.
pub struct RunManifest {
    path: PathBuf,
    text: String,
}

impl RunManifest {
    /// Writes `out_dir/manifest.txt` before any computation.
    pub fn write(
        command: &str,
        settings: &Settings,
        inputs: &[(&str, &Path)],
        out_dir: &Path,
    ) -> Result<Self> {
        settings.finish()?;
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let mut text = String::new();
        let _ = writeln!(text, "run.command={command}");
        let _ = writeln!(text, "run.version={}", env!("CARGO_PKG_VERSION"));
        for (k, v) in settings.resolved() {
            let _ = writeln!(text, "{k}={v}");
        }
        for (name, path) in inputs {
            for file in files_of(path)? {
                let label = file
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let _ = writeln!(text, "input.{name}.{label}.sha256={}", sha256_file(&file)?);
            }
        }
        let path = out_dir.join("manifest.txt");
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        Ok(Self { path, text })
    }

    /// Appends digests of the produced files.
    pub fn finish(mut self, outputs: &[PathBuf]) -> Result<()> {
        for file in outputs {
            let label = file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let _ = writeln!(self.text, "output.{label}.sha256={}", sha256_file(file)?);
        }
        fs::write(&self.path, &self.text)
            .with_context(|| format!("writing {}", self.path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_file(text: &str) -> (tempfile::TempDir, Settings) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, text).unwrap();
        let s = Settings::load(Some(&p)).unwrap();
        (dir, s)
    }

    #[test]
    fn flags_override_file_and_defaults_fill_in() {
        let (_d, mut s) = with_file("# comment\nsteps = 40\nlr=0.01\nrun.command=pretrain\n");
        assert_eq!(s.get("steps", Some(7usize), 1).unwrap(), 7);
        assert_eq!(s.get("lr", None, 1.0f64).unwrap(), 0.01);
        assert_eq!(s.get("seed", None, 3u64).unwrap(), 3);
        assert!(s.finish().is_ok());
        assert_eq!(s.resolved()[1], ("lr".to_string(), "0.01".to_string()));
    }

    #[test]
    fn unknown_and_malformed_keys_are_usage_errors() {
        let (_d, s) = with_file("stepz=4\n");
        assert!(s
            .finish()
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
        let (_d, mut s) = with_file("steps=four\n");
        assert!(s
            .get("steps", None, 1usize)
            .unwrap_err()
            .downcast_ref::<UsageError>()
            .is_some());
        let mut s = Settings::default();
        assert!(s.required::<String>("out-dir", None).is_err());
    }

    #[test]
    fn list_and_switch_read_file_forms() {
        let (_d, mut s) = with_file("csv=a.csv, b.csv\ngreedy=true\n");
        assert_eq!(s.list("csv", vec![]), vec!["a.csv", "b.csv"]);
        assert!(s.switch("greedy", false).unwrap());
    }
}
