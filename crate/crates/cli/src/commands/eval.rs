// SPDX-License-Identifier: Apache-2.0

//! `av3d eval`: detection and semantic metrics over a scene list.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use log::info;
use rayon::prelude::*;

use av3d_core::geometry::IouMode;
use av3d_core::io::{read_bank, read_json, write_atomic, write_json, BoxSceneList};
use av3d_core::metrics::{
    finish_evaluation, scene_semantic_tally, ApInterpolation, AucCurve, ClassSplit, EvalConfig, SceneBoxes,
    SemanticTally, DEFAULT_IOU_THRESHOLD, SEMANTIC_THRESHOLDS,
};

use super::record_bank_input;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IouModeArg {
    #[value(name = "axis_aligned", alias = "axis-aligned")]
    AxisAligned,
    Oriented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApArg {
    #[value(name = "all_point", alias = "all-point")]
    AllPoint,
    #[value(name = "11_point", alias = "11-point")]
    ElevenPoint,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth boxes per scene
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted boxes per scene; every box needs a label and a score
    #[arg(long)]
    pub pred: PathBuf,
    /// Class split with alpha weights
    #[arg(long)]
    pub split: PathBuf,
    /// Label embeddings (EMB1) covering ground-truth and predicted labels
    #[arg(long)]
    pub label_embeddings: PathBuf,
    /// A match needs IoU strictly above this
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    #[arg(long, value_enum, default_value_t = IouModeArg::AxisAligned)]
    pub iou_mode: IouModeArg,
    #[arg(long, value_enum, default_value_t = ApArg::AllPoint)]
    pub ap: ApArg,
    /// Report JSON to write
    #[arg(long)]
    pub out: PathBuf,
    /// Accuracy-versus-threshold CSV to write
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

fn pair_scenes(gt: BoxSceneList, pred: BoxSceneList) -> Result<Vec<SceneBoxes>> {
    let mut index = HashMap::new();
    for (i, s) in gt.scenes.iter().enumerate() {
        if index.insert(s.id.clone(), i).is_some() {
            return Err(CliError::input(format!("ground truth lists scene '{}' twice", s.id)));
        }
    }
    let mut preds: Vec<Option<Vec<_>>> = vec![None; gt.scenes.len()];
    for s in pred.scenes {
        let i = *index
            .get(&s.id)
            .ok_or_else(|| CliError::input(format!("predictions for unknown scene '{}'", s.id)))?;
        if preds[i].is_some() {
            return Err(CliError::input(format!("predictions list scene '{}' twice", s.id)));
        }
        preds[i] = Some(s.boxes);
    }
    Ok(gt
        .scenes
        .into_iter()
        .zip(preds)
        .map(|(g, p)| SceneBoxes {
            gt: g.boxes,
            pred: p.unwrap_or_default(),
        })
        .collect())
}

fn curves_csv(base: &AucCurve, novel: &AucCurve) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::internal(format!("csv: {e}"));
    w.write_record(["split", "threshold", "accuracy", "pairs"]).map_err(csv_err)?;
    for (name, c) in [("base", base), ("novel", novel)] {
        for (t, a) in c.thresholds.iter().zip(&c.accuracy) {
            w.write_record([name.to_string(), t.to_string(), a.to_string(), c.pairs.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::internal(format!("csv: {e}")))
}

pub fn run(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::new("eval", argv);
    for p in [&args.gt, &args.pred, &args.split] {
        manifest.input(p)?;
    }
    record_bank_input(&mut manifest, &args.label_embeddings)?;

    let config = EvalConfig {
        iou_threshold: args.iou,
        mode: match args.iou_mode {
            IouModeArg::AxisAligned => IouMode::AxisAligned,
            IouModeArg::Oriented => IouMode::Oriented,
        },
        thresholds: SEMANTIC_THRESHOLDS.to_vec(),
        interpolation: match args.ap {
            ApArg::AllPoint => ApInterpolation::AllPoint,
            ApArg::ElevenPoint => ApInterpolation::ElevenPoint,
        },
    };
    let gt: BoxSceneList = read_json(&args.gt)?;
    let pred: BoxSceneList = read_json(&args.pred)?;
    let split: ClassSplit = read_json(&args.split)?;
    let embeddings = read_bank(&args.label_embeddings)?;
    let scenes = pair_scenes(gt, pred)?;

    // per-scene tallies in parallel, merged in scene order
    let tallies: Vec<SemanticTally> = scenes
        .par_iter()
        .map(|s| scene_semantic_tally(s, &split, &embeddings, &config))
        .collect::<Result<_, _>>()?;
    let mut tally = SemanticTally::default();
    for t in tallies {
        tally.merge(t);
    }
    let report = finish_evaluation(&scenes, &split, &embeddings, &config, &tally)?;
    info!(
        "mAP {:.4}  Rec {:.4}  SS {:.4}",
        report.detection.map, report.detection.rec, report.semantic.scores.ss
    );

    write_json(&args.out, &report)?;
    manifest.output(&args.out);
    if let Some(path) = &args.curves {
        let curves = &report.semantic.curves;
        write_atomic(path, &curves_csv(&curves.base, &curves.novel)?)?;
        manifest.output(path);
    }
    manifest.write(&RunManifest::path_for(&args.out))
}
