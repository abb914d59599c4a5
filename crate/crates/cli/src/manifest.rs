// SPDX-License-Identifier: Apache-2.0

//! Run manifests written next to every output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use av3d_core::io::{read_bytes, write_json};

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct ManifestFile<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'a str,
    argv: &'a [String],
    seed: Option<u64>,
    inputs: &'a [InputRecord],
    outputs: &'a [String],
    // kept last so the only run-dependent field is easy to spot
    wall_time_ms: u64,
}

/// Collects what a subcommand read and wrote.
#[derive(Debug)]
pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    seed: Option<u64>,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    started: Instant,
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Records a file that was read, with its digest.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = read_bytes(path)?;
        let digest = Sha256::digest(&bytes);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.push(InputRecord {
            path: display(path),
            bytes: bytes.len() as u64,
            sha256,
        });
        Ok(())
    }

    /// Records an input only when the file exists (e.g. optional sidecars).
    pub fn input_if_exists(&mut self, path: &Path) -> Result<()> {
        if path.is_file() {
            self.input(path)?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(display(path));
    }

    /// `<out>.manifest.json`
    pub fn path_for(out: &Path) -> PathBuf {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = ManifestFile {
            tool: "av3d",
            version: crate::VERSION,
            core_version: av3d_core::VERSION,
            command: &self.command,
            argv: &self.argv,
            seed: self.seed,
            inputs: &self.inputs,
            outputs: &self.outputs,
            wall_time_ms: self.started.elapsed().as_millis() as u64,
        };
        write_json(path, &file)?;
        Ok(())
    }
}
