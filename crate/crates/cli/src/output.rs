//! Output path resolution, atomic writes and the summary line.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{Map, Value};

/// Relative output paths are placed under this directory when it is set.
pub const OUT_DIR_ENV: &str = "TRAJCL_OUT_DIR";

pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Writes `bytes` to a temp file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let path = resolve_out(path);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(path)
}

/// One JSON object on stdout: `{"status":"ok","command":…, …}`.
pub struct Summary {
    fields: Map<String, Value>,
}

impl Summary {
    pub fn new(command: &str) -> Self {
        let mut fields = Map::new();
        fields.insert("status".into(), Value::from("ok"));
        fields.insert("command".into(), Value::from(command));
        Self { fields }
    }

    pub fn set(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.fields.insert(key.into(), value.into());
        self
    }

    pub fn path(self, key: &str, path: &Path) -> Self {
        let s = path.display().to_string();
        self.set(key, s)
    }

    pub fn line(&self) -> String {
        Value::Object(self.fields.clone()).to_string()
    }
}
