//! Run manifests and output-directory locking.
//!
//! Every command that writes an output directory records a manifest there
//! before doing any work: the command line, the full config echo, a build
//! identifier, the seed, and a content fingerprint of the input dataset.
//! Re-running into a directory that already holds a manifest refuses unless
//! `--force` is given. A lock file guards against concurrent writers.

use std::fs;
use std::path::{Path, PathBuf};

use mnclglf_core::error::{Error, Result};

/// FNV-1a over file bytes; the dataset content fingerprint.
pub fn fingerprint_file(path: &Path) -> Result<u64> {
    let bytes = fs::read(path)
        .map_err(|e| Error::io(format!("fingerprinting {}", path.display()), e))?;
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}

pub struct RunManifest {
    pub command: String,
    pub config_echo: String,
    pub seed: u64,
    pub dataset_fingerprint: Option<u64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!(
            "build = mnclglf {} ({})\n",
            env!("CARGO_PKG_VERSION"),
            option_env!("PROFILE").unwrap_or("unknown")
        ));
        s.push_str(&format!("seed = {}\n", self.seed));
        if let Some(fp) = self.dataset_fingerprint {
            s.push_str(&format!("dataset_fingerprint = {fp:016x}\n"));
        }
        for o in &self.outputs {
            s.push_str(&format!("output = {o}\n"));
        }
        s.push_str("config_begin\n");
        s.push_str(&self.config_echo);
        s.push_str("config_end\n");
        s
    }
}

/// Writes the manifest, refusing if one already exists and `force` is off.
pub fn write_manifest(dir: &Path, manifest: &RunManifest, force: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join("manifest.txt");
    if path.exists() && !force {
        return Err(Error::Parameter(format!(
            "{} already holds a run manifest; pass --force to overwrite its outputs",
            dir.display()
        )));
    }
    fs::write(&path, manifest.to_text())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Exclusive lock on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Parameter(
                format!(
                    "{} is locked by another run (stale? remove {})",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(Error::io(format!("locking {}", dir.display()), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
