//! Layered configuration: built-in defaults, then a JSON config file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use specast::Error;

/// Sections a config file may contain.
const SECTIONS: [&str; 4] = ["model", "train", "synthetic", "eval"];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        require_file(path)?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let Value::Object(root) = value else {
            return Err(Error::InvalidConfig(format!("{}: expected a JSON object", path.display())).into());
        };
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::InvalidConfig(format!(
                "unknown section `{k}` (expected one of {SECTIONS:?})"
            ))
            .into());
        }
        Ok(ConfigFile { root })
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.root.get(name)
    }
}

/// `base`, overlaid by the file section, overlaid by `flags`.
pub fn layered<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Value>,
    flags: Map<String, Value>,
    what: &str,
) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    let obj = value.as_object_mut().expect("configs serialize to objects");
    if let Some(section) = file {
        let Value::Object(section) = section else {
            return Err(Error::InvalidConfig(format!("`{what}` section must be an object")).into());
        };
        obj.extend(section.clone());
    }
    obj.extend(flags);
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("{what}: {e}")).into())
}

/// Collects `Some` flag values under their config keys.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0
                .insert(key.to_string(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }

    /// A `--no-x` switch that only ever turns `key` off.
    pub fn off(&mut self, key: &str, flag: bool) -> &mut Self {
        if flag {
            self.0.insert(key.to_string(), Value::Bool(false));
        }
        self
    }

    pub fn take(&mut self) -> Map<String, Value> {
        std::mem::take(&mut self.0)
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("{} does not exist", path.display())).into());
    }
    Ok(())
}

/// `explicit` if given, otherwise `<root>/<UTC timestamp>-<kind>-<hash>`.
pub fn run_dir(explicit: Option<&Path>, root: &Path, kind: &str, hash: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            root.join(format!("{stamp}-{kind}-{hash}"))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
