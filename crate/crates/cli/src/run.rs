//! Run directories, lock files, content hashes and per-stage manifests.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Opens a text input, decompressing when the name ends in `.gz`.
pub fn open_text(path: &Path) -> Result<Box<dyn BufRead>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct StageManifest {
    pub command: String,
    pub version: String,
    pub config: Settings,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Run {
    pub dir: PathBuf,
    manifest: StageManifest,
    _lock: Lock,
}

/// Hash of the settings that determine results; output locations are left
/// out.
pub fn config_hash(settings: &Settings) -> Result<String, CliError> {
    let mut s = settings.clone();
    s.out = None;
    s.run_dir = None;
    Ok(sha256_hex(serde_json::to_string(&s)?.as_bytes()))
}

impl Run {
    /// Creates (or reuses) the run directory for `command` and takes its lock.
    /// The directory name is derived from the command, the settings and the
    /// content of every input file.
    pub fn start(command: &str, settings: &Settings, seed: u64, inputs: &[PathBuf]) -> Result<Self, CliError> {
        let inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>, _>>()?;
        let config_hash = config_hash(settings)?;
        let dir = match &settings.run_dir {
            Some(d) => d.clone(),
            None => {
                let mut key = format!("{command}\n{config_hash}\n");
                for d in &inputs {
                    key.push_str(&d.sha256);
                    key.push('\n');
                }
                let root = settings.out.clone().unwrap_or_else(|| PathBuf::from("out"));
                root.join(format!("run-{}", &sha256_hex(key.as_bytes())[..16]))
            }
        };
        fs::create_dir_all(&dir)?;
        let lock_path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Lock(format!(
                    "run directory {} is in use by another process (lock file {})",
                    dir.display(),
                    lock_path.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self {
            manifest: StageManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: settings.clone(),
                config_hash,
                seed,
                inputs,
                outputs: Vec::new(),
            },
            dir,
            _lock: Lock(lock_path),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `bytes` to `name` in the run directory and records it.
    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes)?;
        self.record_output(&path)?;
        Ok(path)
    }

    pub fn record_output(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Writes `<command>.manifest.json` and releases the lock.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let path = self.dir.join(format!("{}.manifest.json", self.manifest.command));
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(self.dir.clone())
    }
}
