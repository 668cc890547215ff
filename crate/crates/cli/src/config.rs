//! Plain key=value run configuration with CLI-flag overrides, resolved-config
//! emission, atomic file writes, and process exit-code mapping.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Errors carrying the documented process exit codes: 2 config, 3 training
/// abort, 4 strict data error, 5 artifact incompatibility.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Training(String),
    Data(String),
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::Data(_) => 4,
            CliError::Artifact(_) => 5,
        })
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Training(m) | CliError::Data(m) | CliError::Artifact(m) => m,
        }
    }
}

pub fn config_err(msg: impl Display) -> CliError {
    CliError::Config(msg.to_string())
}

/// Ordered key=value settings for one command. Values resolve as
/// defaults < config file < command-line flags; unknown keys are rejected.
pub struct Settings {
    allowed: Vec<&'static str>,
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(defaults: &[(&'static str, &str)]) -> Self {
        Self {
            allowed: defaults.iter().map(|(k, _)| *k).collect(),
            map: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Layer a key=value file over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are an error.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_err(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !self.allowed.contains(&key) {
            return Err(config_err(format!(
                "unknown config key {key:?}; known keys: {}",
                self.allowed.join(", ")
            )));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a flag override when the flag was given.
    pub fn override_with<T: Display>(&mut self, key: &'static str, flag: &Option<T>) {
        if let Some(v) = flag {
            self.map.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("settings key {key} has no default"))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, CliError> {
        self.get(key)
            .parse()
            .map_err(|e| config_err(format!("{key}={}: {e}", self.get(key))))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, CliError> {
        self.get(key)
            .parse()
            .map_err(|e| config_err(format!("{key}={}: {e}", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, CliError> {
        self.get(key)
            .parse()
            .map_err(|e| config_err(format!("{key}={}: {e}", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            other => Err(config_err(format!("{key}={other}: expected on/off"))),
        }
    }

    pub fn get_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let v = self.get(key);
        if v.is_empty() {
            return Err(config_err(format!("{key} is required")));
        }
        Ok(PathBuf::from(v))
    }

    pub fn get_opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        if v.is_empty() {
            None
        } else {
            Some(PathBuf::from(v))
        }
    }

    /// Serialize the fully-resolved settings, sorted by key.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, self.resolved().as_bytes())
    }
}

/// Write via a sibling temp file and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| config_err(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes)
        .map_err(|e| config_err(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| config_err(format!("cannot rename to {}: {e}", path.display())))?;
    Ok(())
}
