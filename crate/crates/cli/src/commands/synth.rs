// SPDX-License-Identifier: Apache-2.0

//! `av3d synth`: a self-consistent fixture tree.
//!
//! ```text
//! <out>/scenes/<id>/scene.json, cloud.ply, camera.json, masks/NNN.pgm(+.json)
//! <out>/scenes.json              scene index
//! <out>/gt.json                  ground-truth boxes per scene
//! <out>/split.json               base / novel classes, alphas from GT counts
//! <out>/vocab/labels.emb.json    label centers and their variants
//! <out>/features.emb.json        one object feature per mask
//! <out>/manifest.json
//! ```

use std::path::PathBuf;

use clap::Args;
use log::info;
use rayon::prelude::*;

use av3d_core::embedding::union_banks;
use av3d_core::io::{write_bank, write_json, write_matrix, write_scene, BankFormat, BoxScene, BoxSceneList, RawMatrix, SceneIndex};
use av3d_core::metrics::{ClassSplit, SplitKind};
use av3d_core::rng::{derive_seed, SampleStream};
use av3d_core::synth::{
    generate_embeddings, generate_scenes, rotate_towards_random, CenterLayout, SceneRecord,
    SynthEmbeddingSpec, SynthEmbeddings, SynthSceneSpec,
};

use super::feature_key;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long, default_value_t = 3)]
    pub objects_per_scene: usize,
    #[arg(long, default_value_t = 1500)]
    pub points_per_object: usize,
    /// Embedding dimension
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Variants generated around each label center
    #[arg(long, default_value_t = 3)]
    pub variants: usize,
    /// Largest angle between a variant and its center, radians
    #[arg(long, default_value_t = 0.15)]
    pub spread: f64,
    /// Angle between an object feature and the vocabulary entry it was drawn from, radians
    #[arg(long, default_value_t = 0.05)]
    pub feature_noise: f64,
    /// Norm of the object features
    #[arg(long, default_value_t = 1.0)]
    pub feature_scale: f64,
}

// pairwise angle between label centers
const CENTER_MIN_ANGLE: f64 = 1.0;

impl SynthArgs {
    fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(CliError::input("--scenes must be at least 1"));
        }
        if self.objects_per_scene == 0 {
            return Err(CliError::input("--objects-per-scene must be at least 1"));
        }
        if self.points_per_object == 0 {
            return Err(CliError::input("--points-per-object must be at least 1"));
        }
        if !(self.feature_noise.is_finite() && self.feature_noise >= 0.0 && self.feature_noise < std::f64::consts::FRAC_PI_2) {
            return Err(CliError::input(format!(
                "--feature-noise must lie in [0, π/2), got {}",
                self.feature_noise
            )));
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return Err(CliError::input(format!("--feature-scale must be positive, got {}", self.feature_scale)));
        }
        Ok(())
    }
}

/// One feature row per mask, drawn near a random vocabulary entry of the
/// mask's label (its center or one of its variants).
fn object_features(scenes: &[SceneRecord], emb: &SynthEmbeddings, args: &SynthArgs) -> Result<RawMatrix> {
    let mut rng = SampleStream::new(derive_seed(args.seed, 2));
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for s in scenes {
        for (i, m) in s.masks.iter().enumerate() {
            let center = emb
                .centers
                .index_of(m.label())
                .ok_or_else(|| CliError::internal(format!("no center for label '{}'", m.label())))?;
            let mut sources = vec![emb.centers.entries()[center].embedding.to_f64()];
            sources.extend(
                emb.variant_center
                    .iter()
                    .zip(emb.variants.embeddings())
                    .filter(|(&c, _)| c == center)
                    .map(|(_, e)| e.to_f64()),
            );
            let src = &sources[rng.index(sources.len())];
            let v = if args.feature_noise > 0.0 {
                rotate_towards_random(src, args.feature_noise, &mut rng)
            } else {
                src.clone()
            };
            rows.push(v.iter().map(|x| (x * args.feature_scale) as f32).collect());
            labels.push(Some(feature_key(&s.id, i)));
        }
    }
    Ok(RawMatrix {
        dim: args.dim,
        provenance: vec!["base".to_string(); labels.len()],
        labels,
        rows,
    })
}

pub fn run(args: &SynthArgs, argv: &[String]) -> Result<()> {
    args.validate()?;
    let mut manifest = RunManifest::new("synth", argv);
    manifest.seed(args.seed);

    let spec = SynthSceneSpec {
        seed: derive_seed(args.seed, 0),
        objects: args.objects_per_scene,
        points_per_object: args.points_per_object,
        ..Default::default()
    };
    let labels: Vec<String> = spec.labels.iter().map(|l| l.label.clone()).collect();
    let emb = generate_embeddings(&SynthEmbeddingSpec {
        seed: derive_seed(args.seed, 1),
        dim: args.dim,
        labels,
        centers: CenterLayout::Random {
            min_angle: CENTER_MIN_ANGLE,
        },
        spread: args.spread,
        variants_per_label: args.variants,
        max_attempts: 100_000,
    })?;
    let scenes = generate_scenes(&spec, args.scenes)?;
    info!("generated {} scenes", scenes.len());

    let out = &args.out;
    scenes
        .par_iter()
        .map(|s| write_scene(&out.join("scenes").join(&s.id), s).map(|_| ()))
        .collect::<Result<(), _>>()?;
    let index = SceneIndex {
        scenes: scenes
            .iter()
            .map(|s| format!("scenes/{}/scene.json", s.id))
            .collect(),
    };
    write_json(&out.join("scenes.json"), &index)?;
    manifest.output(&out.join("scenes.json"));
    manifest.output(&out.join("scenes"));

    let gt = BoxSceneList {
        scenes: scenes
            .iter()
            .map(|s| BoxScene {
                id: s.id.clone(),
                boxes: s.gt_boxes.clone(),
                sources: None,
            })
            .collect(),
    };
    write_json(&out.join("gt.json"), &gt)?;
    manifest.output(&out.join("gt.json"));

    // weights follow the share of base and novel ground truth
    let split_of = |l: &str| spec.labels.iter().find(|p| p.label == l).map(|p| p.split);
    let total = gt.scenes.iter().map(|s| s.boxes.len()).sum::<usize>();
    let base = gt
        .scenes
        .iter()
        .flat_map(|s| &s.boxes)
        .filter(|b| b.label().and_then(split_of) == Some(SplitKind::Base))
        .count();
    let alpha_b = base as f64 / total as f64;
    let split = ClassSplit::new(spec.base_labels(), spec.novel_labels(), alpha_b, 1.0 - alpha_b)?;
    write_json(&out.join("split.json"), &split)?;
    manifest.output(&out.join("split.json"));

    let vocab = union_banks(&[&emb.centers, &emb.variants])?.bank;
    let vocab_path = out.join("vocab/labels.emb.json");
    write_bank(&vocab_path, &vocab, BankFormat::Binary)?;
    super::record_bank_output(&mut manifest, &vocab_path, BankFormat::Binary);

    let features = object_features(&scenes, &emb, args)?;
    let features_path = out.join("features.emb.json");
    write_matrix(&features_path, &features, BankFormat::Binary)?;
    super::record_bank_output(&mut manifest, &features_path, BankFormat::Binary);

    manifest.write(&out.join("manifest.json"))?;
    info!("wrote {} objects in {} scenes to {}", total, scenes.len(), out.display());
    Ok(())
}
