//! Per-command run manifest: what went in, what came out, and how.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use multistyle::config::RunConfig;
use multistyle::trainer::hex_digest;
use multistyle::{Error, Image, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

pub struct Manifest {
    command: String,
    seed: u64,
    config: String,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
    extra: Map<String, Value>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            seed: cfg.seed,
            config: cfg.to_toml(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = hex_digest(&read(path)?);
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    /// Records a file already written by someone else.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let digest = hex_digest(&read(path)?);
        self.outputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    pub fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        write(path, text.as_bytes())?;
        self.output(path)
    }

    pub fn write_png(&mut self, path: &Path, img: &Image) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        img.clamped().save_png(path)?;
        self.output(path)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.extra.insert(key.into(), value);
    }

    /// Writes the resolved config and the manifest into `dir`.
    pub fn write(self, dir: &Path) -> Result<()> {
        let files = |v: &[(PathBuf, String)]| {
            v.iter()
                .map(|(p, h)| {
                    let shown = p.strip_prefix(dir).unwrap_or(p);
                    json!({ "path": shown.display().to_string(), "sha256": h })
                })
                .collect::<Vec<_>>()
        };
        let doc = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config": self.config,
            "inputs": files(&self.inputs),
            "outputs": files(&self.outputs),
            "details": Value::Object(self.extra),
        });
        write(&dir.join(CONFIG_FILE), self.config.as_bytes())?;
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        write(&dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())
    }
}
