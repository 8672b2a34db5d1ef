//! Run directory layout: versioned JSON artifacts tracked by SHA-256 in a
//! manifest, so downstream phases can refuse stale inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsw_core::model::{Corpus, CorpusRole};
use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Artifact names that hold the owner's key.
pub const KEY_ARTIFACT: &str = "key";

/// On-disk wrapper for every JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
    /// Hashes of the artifacts this one was computed from.
    #[serde(default)]
    pub sources: BTreeMap<String, String>,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub versions: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path, name: &str) -> Result<Vec<u8>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact { name: name.to_string(), path: path.to_path_buf() });
    }
    std::fs::read(path).map_err(CliError::io(path))
}

fn parse_envelope<T: DeserializeOwned>(bytes: &[u8], name: &str, kind: &str) -> Result<Envelope<T>, CliError> {
    let env: Envelope<T> =
        serde_json::from_slice(bytes).map_err(|e| CliError::BadArtifact { name: name.to_string(), reason: e.to_string() })?;
    if env.kind != kind {
        return Err(CliError::BadArtifact { name: name.to_string(), reason: format!("expected kind '{kind}', found '{}'", env.kind) });
    }
    if env.version != ARTIFACT_SCHEMA_VERSION {
        return Err(CliError::BadArtifact { name: name.to_string(), reason: format!("unsupported version {}", env.version) });
    }
    Ok(env)
}

/// Loads an artifact from an arbitrary path, without manifest checks.
pub fn load_file<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Envelope<T>, CliError> {
    let name = path.display().to_string();
    if kind == KEY_ARTIFACT {
        warn_if_world_readable(path);
    }
    parse_envelope(&read_bytes(path, &name)?, &name, kind)
}

#[cfg(unix)]
fn restrict_permissions(path: &Path) -> Result<(), CliError> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600)).map_err(CliError::io(path))
}

#[cfg(not(unix))]
fn restrict_permissions(_path: &Path) -> Result<(), CliError> {
    Ok(())
}

/// Logs a warning when a key file can be read by any user.
#[cfg(unix)]
pub fn warn_if_world_readable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    let open = std::fs::metadata(path).map(|m| m.permissions().mode() & 0o004 != 0).unwrap_or(false);
    if open {
        warn!("key file {} is world-readable; it is the ownership secret", path.display());
    }
    open
}

#[cfg(not(unix))]
pub fn warn_if_world_readable(_path: &Path) -> bool {
    false
}

/// A run directory and its manifest.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Creates (or resets the manifest of) a run directory for `config`.
    pub fn create(root: &Path, config: &ExperimentConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(CliError::io(root))?;
        let mut versions = BTreeMap::new();
        versions.insert("fsw".to_string(), env!("CARGO_PKG_VERSION").to_string());
        let manifest = RunManifest {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            config_hash: config.hash(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            versions,
        };
        let mut run = Self { root: root.to_path_buf(), manifest };
        run.write_text("config", CONFIG_FILE, &config.to_json())?;
        Ok(run)
    }

    pub fn open(root: &Path) -> Result<Self, CliError> {
        let path = root.join(MANIFEST_FILE);
        let bytes = read_bytes(&path, "manifest")?;
        let manifest: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| CliError::BadArtifact { name: "manifest".into(), reason: e.to_string() })?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    /// The stored configuration, checked against the manifest hash.
    pub fn config(&self) -> Result<ExperimentConfig, CliError> {
        let text = String::from_utf8(self.read_checked("config")?).map_err(|e| CliError::BadArtifact { name: "config".into(), reason: e.to_string() })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.hash() != self.manifest.config_hash {
            return Err(CliError::StaleArtifact { name: "config".into(), expected: self.manifest.config_hash.clone(), actual: cfg.hash() });
        }
        Ok(cfg)
    }

    pub fn save_manifest(&self) -> Result<(), CliError> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(CliError::io(&path))
    }

    pub fn path_of(&self, name: &str) -> Option<PathBuf> {
        self.manifest.artifacts.get(name).map(|e| self.root.join(&e.path))
    }

    pub fn hash_of(&self, name: &str) -> Option<String> {
        self.manifest.artifacts.get(name).map(|e| e.sha256.clone())
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.artifacts.contains_key(name)
    }

    fn record(&mut self, name: &str, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        std::fs::write(&path, bytes).map_err(CliError::io(&path))?;
        if name == KEY_ARTIFACT {
            restrict_permissions(&path)?;
        }
        self.manifest.artifacts.insert(name.to_string(), ArtifactEntry { path: rel.to_string(), sha256: sha256_hex(bytes) });
        self.save_manifest()
    }

    pub fn write_text(&mut self, name: &str, rel: &str, text: &str) -> Result<(), CliError> {
        self.record(name, rel, text.as_bytes())
    }

    /// Writes `payload` in an envelope that records the hashes of `sources`.
    pub fn write<T: Serialize>(&mut self, name: &str, rel: &str, kind: &str, payload: &T, sources: &[&str]) -> Result<(), CliError> {
        let sources = sources.iter().filter_map(|s| self.hash_of(s).map(|h| (s.to_string(), h))).collect();
        let env = Envelope { kind: kind.to_string(), version: ARTIFACT_SCHEMA_VERSION, config_hash: self.manifest.config_hash.clone(), sources, payload };
        let mut text = serde_json::to_string_pretty(&env).expect("artifact serializes");
        text.push('\n');
        self.record(name, rel, text.as_bytes())
    }

    /// File bytes after checking presence and hash.
    pub fn read_checked(&self, name: &str) -> Result<Vec<u8>, CliError> {
        let entry = self
            .manifest
            .artifacts
            .get(name)
            .ok_or_else(|| CliError::MissingArtifact { name: name.to_string(), path: self.root.join(MANIFEST_FILE) })?;
        let path = self.root.join(&entry.path);
        let bytes = read_bytes(&path, name)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(CliError::StaleArtifact { name: name.to_string(), expected: entry.sha256.clone(), actual });
        }
        Ok(bytes)
    }

    pub fn read<T: DeserializeOwned>(&self, name: &str, kind: &str) -> Result<T, CliError> {
        if name == KEY_ARTIFACT {
            if let Some(p) = self.path_of(name) {
                warn_if_world_readable(&p);
            }
        }
        Ok(parse_envelope(&self.read_checked(name)?, name, kind)?.payload)
    }

    pub fn write_corpus(&mut self, name: &str, corpus: &Corpus) -> Result<(), CliError> {
        self.write_text(name, &format!("corpora/{name}.txt"), &corpus.to_text())
    }

    pub fn read_corpus(&self, name: &str, role: CorpusRole) -> Result<Corpus, CliError> {
        let bytes = self.read_checked(name)?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::BadArtifact { name: name.into(), reason: e.to_string() })?;
        Corpus::from_text(role, &text).map_err(|reason| CliError::BadArtifact { name: name.into(), reason })
    }

    /// Checks every listed artifact's hash.
    pub fn verify_all(&self) -> Result<(), CliError> {
        self.manifest.artifacts.keys().try_for_each(|name| self.read_checked(name).map(|_| ()))
    }

    pub fn record_timing(&mut self, phase: &str, seconds: f64) -> Result<(), CliError> {
        self.manifest.timings.insert(phase.to_string(), seconds);
        self.save_manifest()
    }
}
