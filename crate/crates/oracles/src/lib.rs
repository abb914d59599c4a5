// SPDX-License-Identifier: Apache-2.0

//! Slow, independent reference implementations used as test oracles.
//!
//! Everything here works on plain arrays and tuples and is written without
//! reference to the production crate: homogeneous-matrix projection,
//! Monte-Carlo box overlap, double-loop similarity statistics, central finite
//! differences, and a second evaluator for the detection and semantic metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Uniform draws on [0, 1) from a seeded ChaCha8 stream.
pub struct Uniform(ChaCha8Rng);

impl Uniform {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next()
    }

    /// Box–Muller standard normal.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next();
        let u2 = self.next();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

// ------------------------------------------------------------ projection

/// Projects `p` with the 3×4 matrix `K [R | t]`; `None` behind the camera.
/// Row-major `k` and `r`.
pub fn project_homogeneous(k: &[f64; 9], r: &[f64; 9], t: &[f64; 3], p: [f64; 3]) -> Option<(f64, f64)> {
    let mut rt = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rt[i][j] = r[3 * i + j];
        }
        rt[i][3] = t[i];
    }
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            m[i][j] = (0..3).map(|q| k[3 * i + q] * rt[q][j]).sum();
        }
    }
    let h = [p[0], p[1], p[2], 1.0];
    let x: Vec<f64> = m.iter().map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
    let depth: f64 = (0..3).map(|j| r[6 + j] * p[j]).sum::<f64>() + t[2];
    if depth <= 0.0 {
        return None;
    }
    Some((x[0] / x[2], x[1] / x[2]))
}

// ------------------------------------------------------------ boxes

/// Gravity-aligned box: center, full extents, yaw about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl RefBox {
    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let lz = p[2] - self.center[2];
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[1] / 2.0 && lz.abs() <= self.size[2] / 2.0
    }

    fn sample(&self, u: &mut Uniform) -> [f64; 3] {
        let lx = (u.next() - 0.5) * self.size[0];
        let ly = (u.next() - 0.5) * self.size[1];
        let lz = (u.next() - 0.5) * self.size[2];
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * lx - s * ly,
            self.center[1] + s * lx + c * ly,
            self.center[2] + lz,
        ]
    }
}

/// IoU estimate from `samples` uniform points in each box: the overlap
/// volume is the average of the two one-sided estimates.
pub fn monte_carlo_iou(a: &RefBox, b: &RefBox, samples: usize, seed: u64) -> f64 {
    let mut u = Uniform::new(seed);
    let mut in_b = 0usize;
    let mut in_a = 0usize;
    for _ in 0..samples {
        if b.contains(a.sample(&mut u)) {
            in_b += 1;
        }
        if a.contains(b.sample(&mut u)) {
            in_a += 1;
        }
    }
    let n = samples as f64;
    let inter = 0.5 * (in_b as f64 / n * a.volume() + in_a as f64 / n * b.volume());
    inter / (a.volume() + b.volume() - inter)
}

/// IoU of the boxes treated as axis-aligned (yaw ignored).
pub fn aabb_iou(a: &RefBox, b: &RefBox) -> f64 {
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = (a.center[k] - a.size[k] / 2.0).max(b.center[k] - b.size[k] / 2.0);
        let hi = (a.center[k] + a.size[k] / 2.0).min(b.center[k] + b.size[k] / 2.0);
        inter *= (hi - lo).max(0.0);
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ------------------------------------------------------------ statistics

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    // one square root keeps identical inputs at exactly 1
    (dot / (na * nb).sqrt()).min(1.0)
}

/// Mean and population standard deviation of the cosine over all
/// unordered pairs, by a double loop.
pub fn pair_stats(vectors: &[Vec<f64>]) -> (f64, f64) {
    let mut sims = Vec::new();
    for i in 0..vectors.len() {
        for j in 0..vectors.len() {
            if i < j {
                sims.push(cosine(&vectors[i], &vectors[j]));
            }
        }
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ------------------------------------------------------------ gradients

/// Central differences of `f` with step `h` in every coordinate.
pub fn numeric_gradient<F: Fn(&[Vec<f64>]) -> f64>(f: F, x: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = vec![vec![0.0; x.first().map_or(0, Vec::len)]; x.len()];
    for i in 0..x.len() {
        for j in 0..x[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + h;
            let up = f(&work);
            work[i][j] = orig - h;
            let down = f(&work);
            work[i][j] = orig;
            out[i][j] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Mean L1 distance between paired rows.
pub fn l1_distillation(f3d: &[Vec<f64>], f2d: &[Vec<f64>]) -> f64 {
    let total: f64 = f3d
        .iter()
        .zip(f2d)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    total / f3d.len() as f64
}

/// Mean softmax cross-entropy of `f · bank_k / tau` against `targets`,
/// computed as log-sum-exp minus the target logit.
pub fn softmax_cross_entropy(f3d: &[Vec<f64>], targets: &[usize], bank: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (f, &y) in f3d.iter().zip(targets) {
        let logits: Vec<f64> = bank
            .iter()
            .map(|e| e.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / f3d.len() as f64
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            let scale = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

// ------------------------------------------------------------ evaluator

#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub bbox: RefBox,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefScene {
    pub gt: Vec<Labeled>,
    pub pred: Vec<Labeled>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefReport {
    pub ap: BTreeMap<String, f64>,
    pub recall: BTreeMap<String, f64>,
    pub map: f64,
    pub map_b: f64,
    pub map_n: f64,
    pub rec: f64,
    pub rec_b: f64,
    pub rec_n: f64,
    pub auc_b: f64,
    pub cov_b: f64,
    pub auc_n: f64,
    pub cov_n: f64,
    pub ss_b: f64,
    pub ss_n: f64,
    pub ss: f64,
}

pub struct RefSetup<'a> {
    pub base: &'a [String],
    pub novel: &'a [String],
    pub alpha_b: f64,
    pub embeddings: &'a HashMap<String, Vec<f64>>,
    pub iou_threshold: f64,
    pub thresholds: &'a [f64],
}

/// Repeatedly takes the globally best remaining (gt, pred) pair above the
/// threshold; ties prefer the lower gt, then the lower prediction index.
pub fn brute_force_matching(gt: &[RefBox], pred: &[RefBox], thr: f64) -> Vec<Option<usize>> {
    let mut gt_used = vec![None; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for g in 0..gt.len() {
            if gt_used[g].is_some() {
                continue;
            }
            for p in 0..pred.len() {
                if pred_used[p] {
                    continue;
                }
                let iou = aabb_iou(&gt[g], &pred[p]);
                if iou > thr && best.is_none_or(|(b, _, _)| iou > b) {
                    best = Some((iou, g, p));
                }
            }
        }
        match best {
            Some((_, g, p)) => {
                gt_used[g] = Some(p);
                pred_used[p] = true;
            }
            None => return gt_used,
        }
    }
}

/// VOC-style all-point AP from score-ranked TP flags.
pub fn voc_ap(flags: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut mrec = vec![0.0];
    let mut mpre = vec![0.0];
    let mut tp = 0.0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        mrec.push(tp / npos as f64);
        mpre.push(tp / (i + 1) as f64);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..mrec.len() {
        if mrec[i] != mrec[i - 1] {
            ap += (mrec[i] - mrec[i - 1]) * mpre[i];
        }
    }
    ap
}

/// Accuracy curve and its trapezoid area over a uniform grid.
pub fn threshold_auc(sims: &[f64], thresholds: &[f64]) -> f64 {
    if sims.is_empty() {
        return 0.0;
    }
    let acc: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let mut hit = 0;
            for &s in sims {
                let pass = if t == 1.0 { s >= 1.0 } else { s > t };
                if pass {
                    hit += 1;
                }
            }
            hit as f64 / sims.len() as f64
        })
        .collect();
    let mut area = 0.0;
    for k in 0..thresholds.len() - 1 {
        area += (thresholds[k + 1] - thresholds[k]) * (acc[k] + acc[k + 1]) * 0.5;
    }
    area / (thresholds[thresholds.len() - 1] - thresholds[0])
}

fn norm(l: &str) -> String {
    l.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn reference_evaluate(scenes: &[RefScene], setup: &RefSetup) -> RefReport {
    let emb = |l: &str| setup.embeddings.get(&norm(l)).expect("embedding").as_slice();
    let is_base = |l: &str| setup.base.iter().any(|b| norm(b) == norm(l));
    let classes: Vec<String> = setup.base.iter().chain(setup.novel).map(|c| norm(c)).collect();

    // nearest class for every predicted label
    let mut assign: HashMap<String, String> = HashMap::new();
    for s in scenes {
        for p in &s.pred {
            let key = norm(&p.label);
            if assign.contains_key(&key) {
                continue;
            }
            let mut best = 0;
            for (i, c) in classes.iter().enumerate() {
                if cosine(emb(&key), emb(c)) > cosine(emb(&key), emb(&classes[best])) {
                    best = i;
                }
            }
            assign.insert(key, classes[best].clone());
        }
    }

    // semantics
    let (mut sims_b, mut sims_n) = (Vec::new(), Vec::new());
    let (mut cov_b, mut tot_b, mut cov_n, mut tot_n) = (0, 0, 0, 0);
    for s in scenes {
        let g: Vec<RefBox> = s.gt.iter().map(|x| x.bbox).collect();
        let p: Vec<RefBox> = s.pred.iter().map(|x| x.bbox).collect();
        let m = brute_force_matching(&g, &p, setup.iou_threshold);
        for (gi, gt) in s.gt.iter().enumerate() {
            let covered = p.iter().any(|pb| aabb_iou(&gt.bbox, pb) > setup.iou_threshold);
            let base = is_base(&gt.label);
            if base {
                tot_b += 1;
                cov_b += covered as usize;
            } else {
                tot_n += 1;
                cov_n += covered as usize;
            }
            if let Some(pi) = m[gi] {
                let sim = cosine(emb(&gt.label), emb(&s.pred[pi].label));
                if base {
                    sims_b.push(sim);
                } else {
                    sims_n.push(sim);
                }
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut r = RefReport {
        auc_b: threshold_auc(&sims_b, setup.thresholds),
        auc_n: threshold_auc(&sims_n, setup.thresholds),
        cov_b: frac(cov_b, tot_b),
        cov_n: frac(cov_n, tot_n),
        ..Default::default()
    };
    r.ss_b = r.auc_b * r.cov_b;
    r.ss_n = r.auc_n * r.cov_n;
    r.ss = setup.alpha_b * r.ss_b + (1.0 - setup.alpha_b) * r.ss_n;

    // detection
    let present: BTreeSet<String> = scenes
        .iter()
        .flat_map(|s| s.gt.iter().map(|g| norm(&g.label)))
        .collect();
    for class in &present {
        let npos = scenes
            .iter()
            .flat_map(|s| &s.gt)
            .filter(|g| norm(&g.label) == *class)
            .count();
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            for (pi, p) in s.pred.iter().enumerate() {
                if assign[&norm(&p.label)] == *class {
                    ranked.push((p.score, si, pi));
                }
            }
        }
        // stable sort by descending score keeps (scene, index) order among ties
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut used: HashMap<(usize, usize), bool> = HashMap::new();
        let mut flags = Vec::new();
        for &(_, si, pi) in &ranked {
            let p = &scenes[si].pred[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in scenes[si].gt.iter().enumerate() {
                if norm(&g.label) != *class || used.contains_key(&(si, gi)) {
                    continue;
                }
                let iou = aabb_iou(&g.bbox, &p.bbox);
                if iou > setup.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    used.insert((si, gi), true);
                    flags.push(true);
                }
                None => flags.push(false),
            }
        }
        let tp = flags.iter().filter(|&&f| f).count();
        r.ap.insert(class.clone(), voc_ap(&flags, npos));
        r.recall.insert(class.clone(), tp as f64 / npos as f64);
    }
    let mean_over = |m: &BTreeMap<String, f64>, filt: &dyn Fn(&str) -> bool| {
        let v: Vec<f64> = m.iter().filter(|(c, _)| filt(c)).map(|(_, &x)| x).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    r.map = mean_over(&r.ap, &|_| true);
    r.map_b = mean_over(&r.ap, &|c| is_base(c));
    r.map_n = mean_over(&r.ap, &|c| !is_base(c));
    r.rec = mean_over(&r.recall, &|_| true);
    r.rec_b = mean_over(&r.recall, &|c| is_base(c));
    r.rec_n = mean_over(&r.recall, &|c| !is_base(c));
    r
}
