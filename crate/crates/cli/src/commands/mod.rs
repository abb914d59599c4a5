// SPDX-License-Identifier: Apache-2.0

pub mod classify;
pub mod eval;
pub mod expand;
pub mod pseudo;
pub mod synth;

use std::path::Path;

use av3d_core::io::{data_path_for, BankFormat, EmbData, EmbManifest};

use crate::error::Result;
use crate::manifest::RunManifest;

/// Key tying an object feature row to detection `index` of scene `scene`.
pub fn feature_key(scene: &str, index: usize) -> String {
    format!("{scene}/{index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FormatArg {
    /// Manifest plus a little-endian f32 `.bin` file
    Binary,
    /// Rows inline in the manifest
    Json,
}

impl From<FormatArg> for BankFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Binary => BankFormat::Binary,
            FormatArg::Json => BankFormat::Json,
        }
    }
}

/// Records an EMB1 manifest and, when it points at one, its data file.
pub fn record_bank_input(manifest: &mut RunManifest, path: &Path) -> Result<()> {
    manifest.input(path)?;
    if let Ok(m) = av3d_core::io::read_json::<EmbManifest>(path) {
        if let EmbData::Path(rel) = m.data {
            manifest.input_if_exists(&av3d_core::io::resolve(path, &rel))?;
        }
    }
    Ok(())
}

pub fn record_bank_output(manifest: &mut RunManifest, path: &Path, format: BankFormat) {
    manifest.output(path);
    if format == BankFormat::Binary {
        manifest.output(&data_path_for(path));
    }
}
