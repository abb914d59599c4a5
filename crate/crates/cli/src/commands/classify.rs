// SPDX-License-Identifier: Apache-2.0

//! `av3d classify`: label object features against one or more vocabulary banks.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use av3d_core::alignment::{assign_label, ObjectFeature};
use av3d_core::embedding::{union_banks, EmbeddingBank, LabelCollision};
use av3d_core::io::{read_bank, read_json, read_matrix, write_json, BoxScene, BoxSceneList};

use super::{feature_key, record_bank_input};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Object features (EMB1); rows need not be unit norm
    #[arg(long)]
    pub features: PathBuf,
    /// Vocabulary bank (repeatable; banks are concatenated, earlier labels win)
    #[arg(long, required = true)]
    pub vocab: Vec<PathBuf>,
    /// Leave expansion prototypes out of the softmax
    #[arg(long)]
    pub inference_view: bool,
    /// Assignments JSON to write
    #[arg(long)]
    pub out: PathBuf,
    /// Boxes to relabel; feature rows are matched by `<scene id>/<detection index>`
    #[arg(long, requires = "boxes_out")]
    pub boxes: Option<PathBuf>,
    /// Relabeled boxes, scored by assignment probability
    #[arg(long, requires = "boxes")]
    pub boxes_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureAssignment {
    pub feature: usize,
    pub id: Option<String>,
    pub label: Option<String>,
    pub probability: f64,
    pub bank_index: usize,
    pub provenance: String,
}

#[derive(Debug, Serialize)]
struct AssignmentsFile<'a> {
    vocab_size: usize,
    inference_view: bool,
    collisions: &'a [LabelCollision],
    assignments: &'a [FeatureAssignment],
}

fn relabel(
    scenes: BoxSceneList,
    by_key: &HashMap<&str, &FeatureAssignment>,
) -> Result<(BoxSceneList, usize)> {
    let mut dropped = 0;
    let mut out = Vec::with_capacity(scenes.scenes.len());
    for s in scenes.scenes {
        if s.sources.as_ref().is_some_and(|src| src.len() != s.boxes.len()) {
            return Err(CliError::input(format!("scene '{}': sources and boxes differ in length", s.id)));
        }
        let mut boxes = Vec::with_capacity(s.boxes.len());
        let mut sources = Vec::with_capacity(s.boxes.len());
        for (j, b) in s.boxes.into_iter().enumerate() {
            let det = s.sources.as_ref().map_or(j, |src| src[j]);
            let key = feature_key(&s.id, det);
            let a = by_key
                .get(key.as_str())
                .ok_or_else(|| CliError::input(format!("no feature row labeled '{key}'")))?;
            let Some(label) = &a.label else {
                dropped += 1;
                continue;
            };
            boxes.push(b.with_label(label.clone())?.with_score(a.probability)?);
            sources.push(det);
        }
        out.push(BoxScene {
            id: s.id,
            boxes,
            sources: s.sources.map(|_| sources),
        });
    }
    Ok((BoxSceneList { scenes: out }, dropped))
}

pub fn run(args: &ClassifyArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::new("classify", argv);
    record_bank_input(&mut manifest, &args.features)?;
    let features = read_matrix(&args.features)?;
    let mut banks: Vec<EmbeddingBank> = Vec::with_capacity(args.vocab.len());
    for p in &args.vocab {
        record_bank_input(&mut manifest, p)?;
        banks.push(read_bank(p)?);
    }
    let refs: Vec<&EmbeddingBank> = banks.iter().collect();
    let union = union_banks(&refs)?;
    for c in &union.collisions {
        warn!("vocabulary label '{}' repeated; keeping the first", c.label);
    }
    let vocab = union.bank;
    if features.dim != vocab.dim() {
        return Err(CliError::input(format!(
            "{}: features have dimension {} but the vocabulary has {}",
            args.features.display(),
            features.dim,
            vocab.dim()
        )));
    }
    let boxes: Option<BoxSceneList> = match &args.boxes {
        Some(p) => {
            manifest.input(p)?;
            Some(read_json(p)?)
        }
        None => None,
    };

    let assignments: Vec<FeatureAssignment> = features
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| -> Result<_> {
            let f = ObjectFeature::new(row.iter().map(|&x| x as f64).collect())?;
            let a = assign_label(&f, &vocab, args.inference_view)?;
            Ok(FeatureAssignment {
                feature: i,
                id: features.labels[i].clone(),
                label: a.label,
                probability: a.probability,
                bank_index: a.index,
                provenance: vocab.entries()[a.index].provenance.to_string(),
            })
        })
        .collect::<Result<_>>()?;

    write_json(
        &args.out,
        &AssignmentsFile {
            vocab_size: vocab.len(),
            inference_view: args.inference_view,
            collisions: &union.collisions,
            assignments: &assignments,
        },
    )?;
    manifest.output(&args.out);

    if let (Some(list), Some(out)) = (boxes, &args.boxes_out) {
        let mut by_key = HashMap::new();
        for a in &assignments {
            if let Some(id) = &a.id {
                if by_key.insert(id.as_str(), a).is_some() {
                    return Err(CliError::input(format!("feature id '{id}' appears more than once")));
                }
            }
        }
        let (relabeled, dropped) = relabel(list, &by_key)?;
        if dropped > 0 {
            warn!("{dropped} boxes dropped: their best match is an unlabeled prototype");
        }
        write_json(out, &relabeled)?;
        manifest.output(out);
    }
    manifest.write(&RunManifest::path_for(&args.out))
}
