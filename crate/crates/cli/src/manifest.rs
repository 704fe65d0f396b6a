use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f
            .read(&mut buf)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
    /// False for files holding wall-clock timings.
    pub reproducible: bool,
}

/// Record of one command invocation, sufficient to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(argv: Vec<String>, config: Option<RunConfig>, seed: Option<u64>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv,
            cwd: std::env::current_dir().unwrap_or_default(),
            config,
            seed,
            threads: rayon::current_num_threads(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputDigest {
            path: std::fs::canonicalize(path)?,
            sha256,
        });
        Ok(())
    }

    pub fn add_artifact(&mut self, out_dir: &Path, name: &str, reproducible: bool) -> Result<(), CliError> {
        let sha256 = sha256_file(&out_dir.join(name))?;
        self.artifacts.push(Artifact {
            path: name.into(),
            sha256,
            reproducible,
        });
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let path = out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Fails if any recorded input changed since the run.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for input in &self.inputs {
            let path = self.cwd.join(&input.path);
            let got = sha256_file(&path)?;
            if got != input.sha256 {
                return Err(CliError::Data(format!(
                    "{} changed since the recorded run",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Reproducible artifacts whose digests differ from `other`'s.
    pub fn mismatches(&self, other: &RunManifest) -> Vec<PathBuf> {
        self.artifacts
            .iter()
            .filter(|a| a.reproducible)
            .filter(|a| !other.artifacts.iter().any(|b| b.path == a.path && b.sha256 == a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }
}
