//! Run manifests: a `key = value` record of one invocation, including its
//! argument vector, from which `sateco rerun` repeats the run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, in order.
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Checkpoints read by the run.
    pub inputs: Vec<PathBuf>,
    /// Checkpoints and files written by the run.
    pub outputs: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Resolved settings and data digests.
    pub extra: Vec<(String, String)>,
}

// values are written on one line; newlines and backslashes are escaped
fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        RunManifest { command: command.into(), args: args.to_vec(), ..Default::default() }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# sateco run manifest\n");
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(s, "{k} = {}", escape(v));
        };
        kv("version", env!("CARGO_PKG_VERSION"));
        kv("command", &self.command);
        for a in &self.args {
            kv("arg", a);
        }
        kv("config", &self.config_path.as_ref().map_or("-".into(), |p| p.display().to_string()));
        kv("seed", &self.seed.map_or("-".into(), |s| s.to_string()));
        for p in &self.inputs {
            kv("input", &p.display().to_string());
        }
        for p in &self.outputs {
            kv("output", &p.display().to_string());
        }
        kv("output_dir", &self.output_dir.as_ref().map_or("-".into(), |p| p.display().to_string()));
        for (k, v) in &self.extra {
            kv(&format!("extra.{k}"), v);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        let opt = |v: &str| (v != "-").then(|| v.to_string());
        for line in text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| CliError::Config(format!("bad manifest line {line:?}")))?;
            let v = unescape(v);
            match k.trim() {
                "version" => {}
                "command" => m.command = v,
                "arg" => m.args.push(v),
                "config" => m.config_path = opt(&v).map(PathBuf::from),
                "seed" => m.seed = opt(&v).map(|s| s.parse()).transpose().map_err(|_| CliError::Config(format!("bad manifest seed {v:?}")))?,
                "input" => m.inputs.push(v.into()),
                "output" => m.outputs.push(v.into()),
                "output_dir" => m.output_dir = opt(&v).map(PathBuf::from),
                k => match k.strip_prefix("extra.") {
                    Some(e) => m.extra.push((e.to_string(), v)),
                    None => return Err(CliError::Config(format!("unknown manifest key {k:?}")).into()),
                },
            }
        }
        if m.command.is_empty() {
            return Err(CliError::Config("manifest names no command".into()).into());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        RunManifest::from_text(&fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?)
    }
}

/// SHA-256 over the names and contents of `files`, in the given order.
pub fn digest_files(files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_awkward_values() {
        let mut m = RunManifest::new("eval", &["eval".into(), "--out".into(), "a b = c\\d\nnext".into(), "".into()]);
        m.config_path = Some("cfg/x.cfg".into());
        m.seed = Some(u64::MAX);
        m.inputs = vec!["i1".into(), "i2".into()];
        m.outputs = vec!["o".into()];
        m.extra = vec![("setting.lr".into(), "1e-3".into()), ("cwd".into(), "/tmp".into())];
        assert_eq!(RunManifest::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn absent_optionals_round_trip() {
        let m = RunManifest::new("gradcheck", &[]);
        let back = RunManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(back.config_path.is_none() && back.seed.is_none() && back.output_dir.is_none());
    }

    #[test]
    fn digest_depends_on_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&a, b"xy").unwrap();
        fs::write(&b, b"xy").unwrap();
        let da = digest_files(std::slice::from_ref(&a)).unwrap();
        assert_eq!(da.len(), 64);
        assert_ne!(da, digest_files(std::slice::from_ref(&b)).unwrap());
        assert_ne!(digest_files(&[a.clone(), b.clone()]).unwrap(), digest_files(&[b, a.clone()]).unwrap());
        fs::write(&a, b"xz").unwrap();
        assert_ne!(da, digest_files(&[a]).unwrap());
    }
}
