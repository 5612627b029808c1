//! Run manifests and atomic file output.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crh_core::eval::Report;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Key/value record of one command run: configuration, seeds, digests of
/// every input and output, and timings.
pub struct Manifest {
    report: Report,
    start: Instant,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Manifest {
    pub fn new(command: &str, threads: usize) -> Self {
        let mut report = Report::new();
        report.push("command", command);
        report.push("crh_version", env!("CARGO_PKG_VERSION"));
        report.push("threads", threads);
        Self {
            report,
            start: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl std::fmt::Display) {
        self.report.push(format!("config.{key}"), value);
    }

    pub fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.report.push(key, value);
    }

    /// Read an input file and record its digest.
    pub fn input(&mut self, role: &str, path: &Path) -> io::Result<Vec<u8>> {
        let bytes = fs::read(path)?;
        self.report.push(format!("input.{role}"), path.display());
        self.report.push(format!("input.{role}.sha256"), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Record an output; it is written by `finish`.
    pub fn output(&mut self, role: &str, path: &Path, bytes: Vec<u8>) {
        self.report.push(format!("output.{role}"), path.display());
        self.report.push(format!("output.{role}.sha256"), sha256_hex(&bytes));
        self.outputs.push((path.to_path_buf(), bytes));
    }

    /// Record the digest of text sent to standard output.
    pub fn stdout(&mut self, role: &str, bytes: &[u8]) {
        self.report.push(format!("output.{role}"), "-");
        self.report.push(format!("output.{role}.sha256"), sha256_hex(bytes));
    }

    pub fn timing(&mut self, phase: &str, seconds: f64) {
        self.report.push_f64(format!("timing.{phase}_s"), seconds);
    }

    /// Write every output, then the manifest (to `path`, or standard error).
    pub fn finish(mut self, path: Option<&Path>) -> io::Result<()> {
        for (p, bytes) in &self.outputs {
            write_atomic(p, bytes)?;
        }
        let total = self.start.elapsed().as_secs_f64();
        self.timing("total", total);
        let text = self.report.to_string();
        match path {
            Some(p) => write_atomic(p, text.as_bytes()),
            None => {
                eprint!("{text}");
                Ok(())
            }
        }
    }
}

/// Manifest location: explicit, or next to the primary output.
pub fn manifest_path(explicit: Option<&Path>, primary: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        primary.map(|p| {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest");
            PathBuf::from(s)
        })
    })
}
