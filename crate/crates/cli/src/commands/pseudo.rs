// SPDX-License-Identifier: Apache-2.0

//! `av3d pseudo`: one labeled box per usable mask.

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use clap::Args;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use av3d_core::io::{load_scene, load_scene_index, write_json, BoxScene, BoxSceneList};
use av3d_core::pseudo_box::{
    collect_pseudo_vocabulary, generate_pseudo_boxes, FitConfig, PseudoBoxConfig, PseudoDetection,
    PseudoDiagnostics, DEFAULT_MIN_EXTENT, DEFAULT_MIN_POINTS, DEFAULT_OUTLIER_K,
};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["scenes", "scene"]))]
pub struct PseudoArgs {
    /// Scene index file (`{"scenes": [...]}`)
    #[arg(long, conflicts_with = "scene")]
    pub scenes: Option<PathBuf>,
    /// A single scene file (repeatable)
    #[arg(long)]
    pub scene: Vec<PathBuf>,
    /// Boxes JSON to write
    #[arg(long)]
    pub out: PathBuf,
    /// Diagnostics JSON to write
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_POINTS)]
    pub min_points: usize,
    /// Smallest box extent, meters
    #[arg(long, default_value_t = DEFAULT_MIN_EXTENT)]
    pub min_extent: f64,
    /// Outlier cut in median absolute deviations from the centroid distance median
    #[arg(long, default_value_t = DEFAULT_OUTLIER_K)]
    pub outlier_k: f64,
    #[arg(long)]
    pub no_outlier_filter: bool,
}

#[derive(Debug, Serialize)]
struct SceneDiagnostics {
    id: String,
    #[serde(flatten)]
    diagnostics: PseudoDiagnostics,
}

#[derive(Debug, Serialize)]
struct DiagnosticsFile {
    totals: PseudoDiagnostics,
    vocabulary: BTreeSet<String>,
    scenes: Vec<SceneDiagnostics>,
}

pub fn run(args: &PseudoArgs, argv: &[String]) -> Result<()> {
    let config = PseudoBoxConfig {
        fit: FitConfig {
            min_points: args.min_points,
            min_extent: args.min_extent,
        },
        outlier_k: (!args.no_outlier_filter).then_some(args.outlier_k),
    };
    config.validate()?;
    let mut manifest = RunManifest::new("pseudo", argv);

    let paths = match &args.scenes {
        Some(index) => {
            manifest.input(index)?;
            load_scene_index(index)?
        }
        None => args.scene.clone(),
    };
    for p in &paths {
        manifest.input(p)?;
    }

    let results: Vec<(BoxScene, SceneDiagnostics)> = paths
        .par_iter()
        .map(|path| -> Result<_> {
            let scene = load_scene(path)?;
            let detections = scene
                .masks
                .into_iter()
                .map(PseudoDetection::from_mask)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            let out = generate_pseudo_boxes(&scene.cloud, &scene.camera, &detections, &config)
                .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            if out.boxes.len() != out.sources.len() {
                return Err(CliError::internal("box and source counts differ"));
            }
            let boxes = BoxScene {
                id: scene.id.clone(),
                boxes: out.boxes,
                sources: Some(out.sources),
            };
            Ok((boxes, SceneDiagnostics { id: scene.id, diagnostics: out.diagnostics }))
        })
        .collect::<Result<_>>()?;

    let mut seen = HashSet::new();
    if let Some((b, _)) = results.iter().find(|(b, _)| !seen.insert(b.id.clone())) {
        return Err(CliError::input(format!("scene id '{}' appears more than once", b.id)));
    }

    let mut totals = PseudoDiagnostics::default();
    for (_, d) in &results {
        totals.merge(&d.diagnostics);
        for w in &d.diagnostics.warnings {
            warn!("{}: {w}", d.id);
        }
    }
    info!(
        "{} boxes from {} detections ({} skipped, {} fallbacks)",
        totals.produced, totals.detections, totals.skipped_count, totals.fallback_count
    );

    let (scenes, diags): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let vocabulary = collect_pseudo_vocabulary(&scenes.iter().flat_map(|s| s.boxes.iter().cloned()).collect::<Vec<_>>());
    write_json(&args.out, &BoxSceneList { scenes })?;
    manifest.output(&args.out);
    if let Some(path) = &args.diagnostics {
        write_json(
            path,
            &DiagnosticsFile {
                totals,
                vocabulary,
                scenes: diags,
            },
        )?;
        manifest.output(path);
    }
    manifest.write(&RunManifest::path_for(&args.out))
}
