use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use qfc_core::pipeline::VERSION;
use qfc_core::{Error, Result};

/// Output directory of one command. Tracks every file written so the
/// manifest can list them.
pub struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    config: &'a str,
    files: &'a [String],
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Registers `name` and returns its full path.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    pub fn write_with(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<PathBuf> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    /// Writes `manifest.json` listing the command, config source and files.
    pub fn finish(mut self, command: &str, config: &str) -> Result<PathBuf> {
        self.files.sort();
        let files = std::mem::take(&mut self.files);
        let manifest = Manifest {
            version: VERSION,
            command,
            config,
            files: &files,
        };
        self.write_json("manifest.json", &manifest)
    }
}
