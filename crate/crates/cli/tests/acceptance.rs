// SPDX-License-Identifier: Apache-2.0

//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails or overruns its time budget.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use av3d_core::alignment::{contrastive_loss, distillation_loss, ObjectFeature};
use av3d_core::embedding::{normalize_label, pairwise_similarity_stats, union_banks, Embedding, EmbeddingBank, Provenance};
use av3d_core::fsse::{audit_outcome, fsse_expand, fsse_stats_report, FsseConfig, FsseError, FsseOutcome, SampleCount};
use av3d_core::geometry::{iou3d, yaw_distance, IouMode, OrientedBox3, Point3};
use av3d_core::io::{data_path_for, write_bank, BankFormat};
use av3d_core::metrics::{
    evaluate, semantic_score, AucCurve, ClassSplit, EvalConfig, SceneBoxes, SCANNET_ALPHAS, SEMANTIC_THRESHOLDS,
    SUNRGBD_ALPHAS,
};
use av3d_core::pseudo_box::{generate_pseudo_boxes, PseudoBoxConfig, PseudoDetection};
use av3d_core::rng::SampleStream;
use av3d_core::synth::{
    generate_embeddings, generate_scenes, scripted_detector, variant_label, CenterLayout, DetectorScript,
    SynthEmbeddingSpec, SynthSceneSpec,
};
use av3d_oracles::{
    l1_distillation, max_relative_error, monte_carlo_iou, numeric_gradient, reference_evaluate, softmax_cross_entropy,
    threshold_auc, Labeled, RefBox, RefScene, RefSetup,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ------------------------------------------------------------ 1

const SS_TOLERANCE: f64 = 0.001;

fn split_with(alphas: (f64, f64)) -> ClassSplit {
    ClassSplit::new(vec!["base".into()], vec!["novel".into()], alphas.0, alphas.1).unwrap()
}

fn semantic_score_arithmetic() -> Check {
    // (AUC_b, Cov_b, AUC_n, Cov_n), alphas, expected (SS_b, SS_n, SS)
    let scannet = split_with(SCANNET_ALPHAS);
    let sunrgbd = split_with(SUNRGBD_ALPHAS);
    let rows: [(&str, [f64; 4], &ClassSplit, [Option<f64>; 3]); 3] = [
        ("scannet, proposed", [0.890, 0.797, 0.812, 0.585], &scannet, [Some(0.709), Some(0.475), Some(0.570)]),
        ("scannet, baseline", [0.885, 0.680, 0.804, 0.448], &scannet, [Some(0.602), Some(0.360), Some(0.458)]),
        ("sunrgbd, proposed", [0.959, 0.748, 0.797, 0.303], &sunrgbd, [None, None, Some(0.579)]),
    ];
    let mut worst: f64 = 0.0;
    for (name, [ab, cb, an, cn], split, want) in rows {
        let s = semantic_score(ab, cb, an, cn, split);
        for (got, want) in [s.ss_b, s.ss_n, s.ss].into_iter().zip(want) {
            if let Some(w) = want {
                let d = (got - w).abs();
                worst = worst.max(d);
                ensure(d <= SS_TOLERANCE, || format!("{name}: {got:.5} vs {w}"))?;
            }
        }
    }
    Ok(format!("max |diff| {worst:.5} <= {SS_TOLERANCE}"))
}

// ------------------------------------------------------------ 2, 3

fn random_bank(rng: &mut SampleStream, n: usize, dim: usize) -> EmbeddingBank {
    let mut bank = EmbeddingBank::new(dim).unwrap();
    for i in 0..n {
        bank.push_labeled(format!("w{i}"), Embedding::normalized(&rng.unit_vector(dim)).unwrap(), Provenance::Base)
            .unwrap();
    }
    bank
}

fn bank_bytes(bank: &EmbeddingBank, dir: &Path, name: &str) -> (Vec<u8>, Vec<u8>) {
    let p = dir.join(format!("{name}.emb.json"));
    write_bank(&p, bank, BankFormat::Binary).unwrap();
    let manifest = std::fs::read(&p).unwrap();
    let data = std::fs::read(data_path_for(&p)).unwrap();
    (manifest, data)
}

fn expansion(base: &EmbeddingBank, cfg: &FsseConfig) -> Result<(FsseOutcome, bool), String> {
    match fsse_expand(base, cfg) {
        Ok(o) => Ok((o, true)),
        Err(FsseError::Exhausted { partial, .. }) => Ok((*partial, false)),
        Err(e) => Err(e.to_string()),
    }
}

fn fsse_audit_suite() -> Check {
    let mut rng = SampleStream::new(0xF55E);
    let dir = tempfile::tempdir().unwrap();
    let mut accepted_total = 0;
    let mut exhausted = 0;
    for i in 0..50 {
        let dim = if i % 2 == 0 { 8 } else { 512 };
        let n = if dim == 8 { 4 + rng.index(12) } else { 20 + rng.index(200) };
        let base = random_bank(&mut rng, n, dim);
        let theta_min = rng.uniform(0.55, 0.75);
        let theta_max = theta_min + rng.uniform(0.1, 0.2);
        let cfg = FsseConfig {
            count: SampleCount::Fraction(0.3),
            theta_min,
            theta_max,
            seed: rng.next_u64(),
            max_attempts: 200_000,
        };
        let (a, complete) = expansion(&base, &cfg)?;
        let (b, _) = expansion(&base, &cfg)?;
        if !complete {
            exhausted += 1;
        }
        let v = audit_outcome(&base, &a, theta_min, theta_max);
        ensure(v.is_empty(), || format!("config {i}: {} audit violations", v.len()))?;
        ensure(
            bank_bytes(&a.expanded, dir.path(), "a") == bank_bytes(&b.expanded, dir.path(), "a"),
            || format!("config {i}: outputs differ for one seed"),
        )?;
        accepted_total += a.expanded.len();
    }
    ensure(exhausted == 0, || format!("{exhausted} configurations ran out of attempts"))?;

    // 30% of a 772-entry bank is 231 new prototypes
    let cfg = FsseConfig { seed: 772, ..Default::default() };
    let base = random_bank(&mut rng, 772, 512);
    ensure(cfg.target_count(772) == 231, || format!("target {}", cfg.target_count(772)))?;
    let out = fsse_expand(&base, &cfg).map_err(|e| e.to_string())?;
    ensure(out.expanded.len() == 231, || format!("accepted {}", out.expanded.len()))?;
    ensure(audit_outcome(&base, &out, cfg.theta_min, cfg.theta_max).is_empty(), || "772 audit".into())?;
    Ok(format!("50 configs, {accepted_total} samples audited, byte-identical reruns, 772 -> 231"))
}

fn tight_cluster(rng: &mut SampleStream, n: usize, dim: usize, noise: f64) -> EmbeddingBank {
    let center = rng.unit_vector(dim);
    let mut bank = EmbeddingBank::new(dim).unwrap();
    for i in 0..n {
        let z = rng.normal_vector(dim);
        let v: Vec<f64> = center.iter().zip(&z).map(|(c, z)| c + noise * z).collect();
        bank.push_labeled(format!("c{i}"), Embedding::normalized(&v).unwrap(), Provenance::Base)
            .unwrap();
    }
    bank
}

fn fsse_diversity_direction() -> Check {
    let mut rng = SampleStream::new(0xD1F);
    let mut lines = Vec::new();
    for (k, (n, dim, noise)) in [(30, 16, 0.03), (50, 64, 0.02), (100, 128, 0.01), (40, 512, 0.005), (20, 8, 0.05)]
        .into_iter()
        .enumerate()
    {
        let base = tight_cluster(&mut rng, n, dim, noise);
        let cfg = FsseConfig { seed: k as u64, ..Default::default() };
        let before = pairwise_similarity_stats(&base).unwrap();
        ensure(before.mean > cfg.theta_max, || format!("cluster {k} mean {} not above theta_max", before.mean))?;
        let out = fsse_expand(&base, &cfg).map_err(|e| e.to_string())?;
        let r = fsse_stats_report(&base, &out.expanded).unwrap();
        ensure(r.after.mean < r.before.mean, || format!("cluster {k}: mean {} -> {}", r.before.mean, r.after.mean))?;
        ensure(r.after.std > r.before.std, || format!("cluster {k}: std {} -> {}", r.before.std, r.after.std))?;
        lines.push(format!("{:+.1}%", r.mean_change_pct.unwrap_or(f64::NAN)));
    }
    Ok(format!("5 clusters, mean change {}", lines.join(" ")))
}

// ------------------------------------------------------------ 4

fn long_axis_yaw(b: &OrientedBox3) -> f64 {
    let s = b.size();
    if s[1] > s[0] {
        b.yaw() + std::f64::consts::FRAC_PI_2
    } else {
        b.yaw()
    }
}

fn pseudo_box_recovery() -> Check {
    let spec = SynthSceneSpec { seed: 4242, ..Default::default() };
    let scenes = generate_scenes(&spec, 1000).map_err(|e| e.to_string())?;
    let per_scene: Vec<(usize, usize, usize, usize)> = scenes
        .par_iter()
        .map(|s| {
            let dets: Vec<PseudoDetection> =
                s.masks.iter().cloned().map(|m| PseudoDetection::from_mask(m).unwrap()).collect();
            let out = generate_pseudo_boxes(&s.cloud, &s.camera, &dets, &PseudoBoxConfig::default()).unwrap();
            let (mut iou_ok, mut yaw_ok, mut nondegenerate) = (0, 0, 0);
            for (b, &src) in out.boxes.iter().zip(&out.sources) {
                let g = &s.gt_boxes[src];
                if iou3d(b, g, IouMode::Oriented) >= 0.9 {
                    iou_ok += 1;
                }
                let gs = g.size();
                // yaw is meaningless for a nearly square footprint
                if gs[0].max(gs[1]) > 1.1 * gs[0].min(gs[1]) {
                    nondegenerate += 1;
                    if yaw_distance(long_axis_yaw(b), long_axis_yaw(g)) <= 0.05 {
                        yaw_ok += 1;
                    }
                }
            }
            (s.gt_boxes.len(), iou_ok, nondegenerate, yaw_ok)
        })
        .collect();
    let sum = |f: fn(&(usize, usize, usize, usize)) -> usize| per_scene.iter().map(f).sum::<usize>();
    let (objects, iou_ok, nondeg, yaw_ok) = (sum(|t| t.0), sum(|t| t.1), sum(|t| t.2), sum(|t| t.3));
    let iou_rate = iou_ok as f64 / objects as f64;
    let yaw_rate = yaw_ok as f64 / nondeg.max(1) as f64;
    ensure(iou_rate >= 0.95, || format!("IoU >= 0.9 for {iou_ok}/{objects}"))?;
    ensure(yaw_rate >= 0.95, || format!("yaw within 0.05 for {yaw_ok}/{nondeg}"))?;
    Ok(format!(
        "{objects} objects: IoU>=0.9 {:.2}%, yaw<=0.05 {:.2}% of {nondeg}",
        100.0 * iou_rate,
        100.0 * yaw_rate
    ))
}

// ------------------------------------------------------------ 5

fn to_ref_box(b: &OrientedBox3) -> RefBox {
    RefBox {
        center: b.center().to_array(),
        size: b.size(),
        yaw: b.yaw(),
    }
}

fn iou_oracle_equivalence() -> Check {
    let mut rng = SampleStream::new(0x1011);
    let pairs: Vec<(OrientedBox3, OrientedBox3)> = (0..200)
        .map(|i| {
            let size = |r: &mut SampleStream| [r.uniform(0.2, 2.5), r.uniform(0.2, 2.5), r.uniform(0.2, 2.5)];
            let a = OrientedBox3::new(
                Point3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5)),
                size(&mut rng),
                rng.uniform(-3.2, 3.2),
            )
            .unwrap();
            // mostly overlapping pairs, a few identical ones
            let b = if i % 25 == 0 {
                a.clone()
            } else {
                let c = a.center();
                OrientedBox3::new(
                    Point3::new(c.x + rng.uniform(-1.0, 1.0), c.y + rng.uniform(-1.0, 1.0), c.z + rng.uniform(-0.5, 0.5)),
                    size(&mut rng),
                    rng.uniform(-3.2, 3.2),
                )
                .unwrap()
            };
            (a, b)
        })
        .collect();
    let errors: Vec<(f64, f64)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let exact = iou3d(a, b, IouMode::Oriented);
            let mc = monte_carlo_iou(&to_ref_box(a), &to_ref_box(b), 1_000_000, i as u64);
            ((exact - mc).abs(), exact)
        })
        .collect();
    let worst = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let overlapping = errors.iter().filter(|e| e.1 > 0.0).count();
    ensure(worst < 0.01, || format!("max |exact - mc| {worst:.4}"))?;
    Ok(format!("200 pairs ({overlapping} overlapping), max |diff| {worst:.5}"))
}

// ------------------------------------------------------------ 6

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const GRAD_TOLERANCE: f64 = 1e-4;

fn features(rows: &[Vec<f64>]) -> Vec<ObjectFeature> {
    rows.iter().map(|r| ObjectFeature::new(r.clone()).unwrap()).collect()
}

fn gradient_batch(b: u64) -> Result<(f64, f64), String> {
    let mut rng = SampleStream::new(0x6AD + b);
    let dim = if b % 2 == 0 { 4 } else { 512 };
    let n = 1 + rng.index(4);
    let scale = 1.0 / (dim as f64).sqrt();
    let f3d: Vec<Vec<f64>> = (0..n)
        .map(|_| rng.normal_vector(dim).iter().map(|x| x * scale).collect())
        .collect();

    // targets away from the kink of |x|
    let f2d: Vec<Vec<f64>> = f3d
        .iter()
        .map(|r| {
            r.iter()
                .map(|x| x + rng.uniform(0.01, 0.5) * if rng.chance(0.5) { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let target = features(&f2d);
    let d = distillation_loss(&features(&f3d), &target).map_err(|e| e.to_string())?;
    ensure((d.value - l1_distillation(&f3d, &f2d)).abs() < 1e-12, || format!("batch {b}: distillation value"))?;
    let num = numeric_gradient(|x| distillation_loss(&features(x), &target).unwrap().value, &f3d, FD_STEP);
    let e_d = max_relative_error(&d.grad, &num, FD_FLOOR);

    let k = 2 + rng.index(15);
    let mut bank = EmbeddingBank::new(dim).unwrap();
    for i in 0..k {
        bank.push_labeled(format!("k{i}"), Embedding::normalized(&rng.unit_vector(dim)).unwrap(), Provenance::Base)
            .unwrap();
    }
    let rows: Vec<Vec<f64>> = bank.embeddings().map(|e| e.to_f64()).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
    let tau = [1.0, 0.5, 0.1][rng.index(3)];
    let c = contrastive_loss(&features(&f3d), &targets, &bank, tau).map_err(|e| e.to_string())?;
    let want = softmax_cross_entropy(&f3d, &targets, &rows, tau);
    ensure((c.value - want).abs() < 1e-10 * want.max(1.0), || format!("batch {b}: contrastive value"))?;
    let num = numeric_gradient(
        |x| contrastive_loss(&features(x), &targets, &bank, tau).unwrap().value,
        &f3d,
        FD_STEP,
    );
    let e_c = max_relative_error(&c.grad, &num, FD_FLOOR);
    Ok((e_d, e_c))
}

fn gradient_correctness() -> Check {
    let errs: Vec<(f64, f64)> = (0..100u64).into_par_iter().map(gradient_batch).collect::<Result<_, _>>()?;
    let worst_d = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let worst_c = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    ensure(worst_d < GRAD_TOLERANCE, || format!("distillation max rel err {worst_d:.2e}"))?;
    ensure(worst_c < GRAD_TOLERANCE, || format!("contrastive max rel err {worst_c:.2e}"))?;
    Ok(format!("100 batches, max rel err distillation {worst_d:.1e}, contrastive {worst_c:.1e}"))
}

// ------------------------------------------------------------ 7

struct Fixture {
    scenes: Vec<SceneBoxes>,
    split: ClassSplit,
    bank: EmbeddingBank,
}

fn metric_fixture(seed: u64) -> Fixture {
    let mut rng = SampleStream::new(seed);
    let base: Vec<String> = ["chair", "table", "bed", "desk"].map(String::from).to_vec();
    let novel: Vec<String> = ["lamp", "piano", "stool"].map(String::from).to_vec();
    let labels: Vec<String> = base.iter().chain(&novel).cloned().collect();
    let emb = generate_embeddings(&SynthEmbeddingSpec {
        seed,
        dim: 24,
        labels: labels.clone(),
        centers: CenterLayout::Random { min_angle: 1.0 },
        spread: 0.4,
        variants_per_label: 3,
        max_attempts: 10_000,
    })
    .unwrap();
    let bank = union_banks(&[&emb.centers, &emb.variants]).unwrap().bank;
    let mut scenes = Vec::new();
    for _ in 0..2 + rng.index(6) {
        let n = 1 + rng.index(10);
        let gt: Vec<OrientedBox3> = (0..n)
            .map(|_| {
                let c = Point3::new(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(0.0, 1.0));
                OrientedBox3::new(c, [rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5)], 0.0)
                    .unwrap()
                    .with_label(labels[rng.index(labels.len())].clone())
                    .unwrap()
            })
            .collect();
        let script = DetectorScript {
            drop_rate: rng.uniform(0.0, 0.4),
            center_jitter: rng.uniform(0.0, 0.3),
            size_jitter: rng.uniform(0.0, 0.3),
            label_confusion: rng.uniform(0.0, 0.3),
            confusion_label: Some(labels[rng.index(labels.len())].clone()),
            seed: rng.next_u64(),
        };
        let mut pred = scripted_detector(&gt, &script).unwrap();
        for p in pred.iter_mut() {
            if rng.chance(0.5) {
                let l = p.label().unwrap().to_string();
                *p = p.clone().with_label(variant_label(&l, rng.index(3))).unwrap();
            }
        }
        for _ in 0..rng.index(5) {
            let c = Point3::new(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), 0.5);
            pred.push(
                OrientedBox3::new(c, [0.8, 0.8, 0.8], 0.0)
                    .unwrap()
                    .with_label(variant_label(&labels[rng.index(labels.len())], rng.index(3)))
                    .unwrap()
                    .with_score(rng.uniform(0.0, 1.0))
                    .unwrap(),
            );
        }
        scenes.push(SceneBoxes { gt, pred });
    }
    Fixture {
        scenes,
        split: ClassSplit::scannet(base, novel).unwrap(),
        bank,
    }
}

fn labeled(b: &OrientedBox3) -> Labeled {
    Labeled {
        bbox: to_ref_box(b),
        label: b.label().unwrap().to_string(),
        score: b.score().unwrap_or(0.0),
    }
}

fn compare_with_reference(f: &Fixture) -> Result<f64, String> {
    let got = evaluate(&f.scenes, &f.split, &f.bank, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let embeddings: HashMap<String, Vec<f64>> = f
        .bank
        .entries()
        .iter()
        .map(|e| (normalize_label(e.label.as_deref().unwrap()), e.embedding.to_f64()))
        .collect();
    let ref_scenes: Vec<RefScene> = f
        .scenes
        .iter()
        .map(|s| RefScene {
            gt: s.gt.iter().map(labeled).collect(),
            pred: s.pred.iter().map(labeled).collect(),
        })
        .collect();
    let want = reference_evaluate(
        &ref_scenes,
        &RefSetup {
            base: f.split.base_labels(),
            novel: f.split.novel_labels(),
            alpha_b: f.split.alpha_b(),
            embeddings: &embeddings,
            iou_threshold: 0.25,
            thresholds: &SEMANTIC_THRESHOLDS,
        },
    );
    let d = &got.detection;
    let s = &got.semantic.scores;
    let mut fields: BTreeMap<String, (f64, f64)> = [
        ("mAP", d.map, want.map),
        ("mAP_b", d.map_b, want.map_b),
        ("mAP_n", d.map_n, want.map_n),
        ("Rec", d.rec, want.rec),
        ("Rec_b", d.rec_b, want.rec_b),
        ("Rec_n", d.rec_n, want.rec_n),
        ("AUC_b", s.auc_b, want.auc_b),
        ("AUC_n", s.auc_n, want.auc_n),
        ("Cov_b", s.cov_b, want.cov_b),
        ("Cov_n", s.cov_n, want.cov_n),
        ("SS", s.ss, want.ss),
    ]
    .into_iter()
    .map(|(k, a, b)| (k.to_string(), (a, b)))
    .collect();
    for (class, ap) in &want.ap {
        let got = d.per_class.get(class).map_or(f64::NAN, |c| c.ap);
        fields.insert(format!("AP[{class}]"), (got, *ap));
    }
    for (class, r) in &want.recall {
        let got = d.per_class.get(class).map_or(f64::NAN, |c| c.recall);
        fields.insert(format!("Rec[{class}]"), (got, *r));
    }
    let mut worst: f64 = 0.0;
    for (k, (a, b)) in fields {
        let diff = (a - b).abs();
        if !(diff <= 1e-9) {
            return Err(format!("{k}: {a} vs {b}"));
        }
        worst = worst.max(diff);
    }
    Ok(worst)
}

fn single_pair_auc() -> Result<(), String> {
    // two labels at exactly 60 degrees
    let mut bank = EmbeddingBank::new(2).unwrap();
    bank.push_labeled("gt", Embedding::normalized(&[1.0, 0.0]).unwrap(), Provenance::Base).unwrap();
    let h = 3f64.sqrt() / 2.0;
    bank.push_labeled("pred", Embedding::normalized(&[0.5, h]).unwrap(), Provenance::Base).unwrap();
    bank.push_labeled("other", Embedding::normalized(&[0.0, 1.0]).unwrap(), Provenance::Base).unwrap();
    let curve = AucCurve::from_similarities(&[0.5], &SEMANTIC_THRESHOLDS);
    ensure(curve.accuracy == vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], || format!("curve {:?}", curve.accuracy))?;
    ensure((curve.auc - 0.5).abs() < 1e-12, || format!("curve auc {}", curve.auc))?;
    ensure((threshold_auc(&[0.5], &SEMANTIC_THRESHOLDS) - 0.5).abs() < 1e-12, || "oracle auc".into())?;

    let b = OrientedBox3::new(Point3::new(0.0, 0.0, 0.0), [1.0, 1.0, 1.0], 0.0).unwrap();
    let scene = SceneBoxes {
        gt: vec![b.clone().with_label("gt").unwrap()],
        pred: vec![b.with_label("pred").unwrap().with_score(0.9).unwrap()],
    };
    let split = ClassSplit::scannet(vec!["gt".into()], vec!["other".into()]).unwrap();
    let r = evaluate(&[scene], &split, &bank, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let auc_b = r.semantic.scores.auc_b;
    ensure((auc_b - 0.5).abs() < 1e-6, || format!("evaluated AUC_b {auc_b}"))
}

fn perfect_detector(seed: u64) -> Result<(), String> {
    let f = metric_fixture(seed);
    let scenes: Vec<SceneBoxes> = f
        .scenes
        .iter()
        .map(|s| SceneBoxes {
            gt: s.gt.clone(),
            pred: s
                .gt
                .iter()
                .enumerate()
                .map(|(i, g)| g.clone().with_score(1.0 - 0.01 * i as f64).unwrap())
                .collect(),
        })
        .collect();
    let cfg = EvalConfig::default();
    let r = evaluate(&scenes, &f.split, &f.bank, &cfg).map_err(|e| e.to_string())?;
    ensure(r.semantic.scores.ss == 1.0, || format!("perfect ss {}", r.semantic.scores.ss))?;
    ensure(r.detection.map == 1.0, || format!("perfect mAP {}", r.detection.map))?;
    for c in r.detection.per_class.values() {
        ensure(c.ap == 1.0, || format!("perfect AP {}", c.ap))?;
    }
    compare_with_reference(&Fixture { scenes, split: f.split, bank: f.bank }).map(|_| ())
}

fn metric_oracle_equivalence() -> Check {
    let worst: Vec<f64> = (0..50u64)
        .into_par_iter()
        .map(|seed| compare_with_reference(&metric_fixture(1000 + seed)).map_err(|e| format!("fixture {seed}: {e}")))
        .collect::<Result<_, _>>()?;
    let worst = worst.into_iter().fold(0.0, f64::max);
    single_pair_auc()?;
    for seed in 0..5 {
        perfect_detector(seed)?;
    }
    Ok(format!("50 fixtures, max |diff| {worst:.1e}; single-pair AUC 0.5; perfect detector ss = mAP = 1"))
}

// ------------------------------------------------------------ 8

const PIPELINE: &[&[&str]] = &[
    &["synth", "--out", "synth", "--seed", "42", "--scenes", "20"],
    &["pseudo", "--scenes", "synth/scenes.json", "--out", "pseudo/boxes.json", "--diagnostics", "pseudo/diagnostics.json"],
    &[
        "expand", "--base", "synth/vocab/labels.emb.json", "--seed", "42",
        "--out", "vocab/expanded.emb.json", "--report", "vocab/expand_report.json",
    ],
    &[
        "classify", "--features", "synth/features.emb.json", "--vocab", "vocab/expanded.emb.json", "--inference-view",
        "--out", "classify/assignments.json", "--boxes", "pseudo/boxes.json", "--boxes-out", "classify/pred.json",
    ],
    &[
        "eval", "--gt", "synth/gt.json", "--pred", "classify/pred.json", "--split", "synth/split.json",
        "--label-embeddings", "synth/vocab/labels.emb.json", "--iou-mode", "oriented",
        "--out", "eval/report.json", "--curves", "eval/curves.csv",
    ],
];

fn run_pipeline(dir: &Path) -> Result<(), String> {
    for step in PIPELINE {
        let out = Command::new(env!("CARGO_BIN_EXE_av3d"))
            .current_dir(dir)
            .args(*step)
            .env("AV3D_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("`{}` failed: {}", step.join(" "), String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(())
}

fn collect_tree(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_tree(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            let mut bytes = std::fs::read(&p).unwrap();
            if rel.to_string_lossy().ends_with("manifest.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_ms");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
}

fn end_to_end_determinism() -> Check {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut trees = Vec::new();
    for r in &runs {
        run_pipeline(r.path())?;
        let mut tree = BTreeMap::new();
        collect_tree(r.path(), r.path(), &mut tree);
        trees.push(tree);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "file lists differ".into())?;
    if let Some((p, _)) = a.iter().find(|(p, bytes)| b[*p] != **bytes) {
        return Err(format!("{} differs", p.display()));
    }
    let report: serde_json::Value = serde_json::from_slice(&a[Path::new("eval/report.json")]).unwrap();
    let bytes: usize = a.values().map(Vec::len).sum();
    Ok(format!(
        "{} files ({} KiB) identical; SS {:.3}, mAP {:.3}",
        a.len(),
        bytes / 1024,
        report["SS"].as_f64().unwrap_or(f64::NAN),
        report["mAP"].as_f64().unwrap_or(f64::NAN)
    ))
}

// ------------------------------------------------------------ driver

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    check: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "semantic score arithmetic", budget: Duration::from_secs(1), check: semantic_score_arithmetic },
        Criterion { id: 2, name: "expansion audit suite", budget: Duration::from_secs(30), check: fsse_audit_suite },
        Criterion { id: 3, name: "expansion diversity direction", budget: Duration::from_secs(10), check: fsse_diversity_direction },
        Criterion { id: 4, name: "pseudo-box recovery", budget: Duration::from_secs(60), check: pseudo_box_recovery },
        Criterion { id: 5, name: "oriented IoU vs Monte Carlo", budget: Duration::from_secs(120), check: iou_oracle_equivalence },
        Criterion { id: 6, name: "loss gradients vs finite differences", budget: Duration::from_secs(30), check: gradient_correctness },
        Criterion { id: 7, name: "metrics vs reference evaluator", budget: Duration::from_secs(60), check: metric_oracle_equivalence },
        Criterion { id: 8, name: "end-to-end determinism", budget: Duration::from_secs(60), check: end_to_end_determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || *f == c.id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {} {} {:<38} {:.2}s/{}s  {}",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
