//! Config-file lookup and artifact sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use stfv::digest::config_digest;
use stfv::{Error, Result};

/// Keys from a `--config` JSON file. Keys mirror the long flag names.
#[derive(Debug, Default)]
pub struct Settings {
    map: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(map)) => Ok(Self { map }),
            Ok(_) => Err(Error::InvalidConfig(format!("{}: expected a JSON object", path.display()))),
            Err(e) => Err(Error::InvalidConfig(format!("{}: {e}", path.display()))),
        }
    }

    #[cfg(test)]
    pub fn from_value(v: Value) -> Self {
        match v {
            Value::Object(map) => Self { map },
            _ => Self::default(),
        }
    }

    fn lookup<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::InvalidConfig(format!("config key {key:?}: {e}"))),
        }
    }

    /// Flag value, else config value, else `default`.
    pub fn get<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.lookup(key)?.unwrap_or(default),
        })
    }

    /// Flag value, else config value; absent means `None`.
    pub fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.lookup(key),
        }
    }

    /// Like [`opt`](Self::opt) but missing values are a usage error.
    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.opt(flag, key)?
            .ok_or_else(|| Error::InvalidConfig(format!("missing required --{key}")))
    }

    /// Switches: set on the command line, or `true` in the config.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        Ok(self.lookup(key)?.unwrap_or(false))
    }

    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.require(flag, key)
    }

    pub fn opt_path(&self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
        self.opt(flag, key)
    }
}

/// Digest of the algorithmic settings of one command. Paths and the thread
/// count are not part of `config`.
pub fn digest_of<T: Serialize>(command: &str, config: &T) -> String {
    config_digest(&serde_json::json!({ "command": command, "config": config }))
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// Writes `<artifact>.meta.json` carrying the resolved config and its digest.
pub fn write_sidecar<T: Serialize>(
    artifact: &Path,
    command: &str,
    config: &T,
    extra: Option<Value>,
) -> Result<String> {
    let digest = digest_of(command, config);
    let mut meta = serde_json::json!({
        "command": command,
        "config": config,
        "config_digest": digest,
    });
    if let (Some(Value::Object(extra)), Value::Object(m)) = (extra, &mut meta) {
        m.extend(extra);
    }
    write_json(&sidecar_path(artifact), &meta)?;
    Ok(digest)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}
