use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lstx::evaluation::content_hash;
use lstx::training::TrainConfig;
use lstx::{Error, Result};

/// `key=value` record of one invocation: flags, resolved config, seed and
/// content hashes of every input file. It holds nothing that varies between
/// identical reruns.
#[derive(Debug, Default)]
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.push(format!("flag.{name}"), value);
    }

    pub fn flag_opt<T: ToString>(&mut self, name: &str, value: Option<T>) {
        if let Some(v) = value {
            self.flag(name, v);
        }
    }

    pub fn path(&mut self, name: &str, path: &Path) {
        self.flag(name, path.display());
    }

    /// Records the git-style content hash of an input file.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.path(name, path);
        self.push(format!("input.{name}.hash"), content_hash(&bytes));
        Ok(())
    }

    pub fn config(&mut self, cfg: &TrainConfig) {
        for line in cfg.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.push(format!("config.{k}"), v);
            }
        }
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.text()).map_err(|e| Error::io(path, e))
    }
}

/// `<path>.<ext>` beside an output file.
pub fn beside(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Value of `key` in a manifest file, if the file and key exist.
pub fn lookup(path: &Path, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.to_string())
}
