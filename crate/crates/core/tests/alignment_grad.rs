// SPDX-License-Identifier: Apache-2.0

use av3d_core::alignment::{class_probabilities, contrastive_loss, distillation_loss, ObjectFeature};
use av3d_core::embedding::{Embedding, EmbeddingBank, Provenance};
use av3d_core::rng::SampleStream;
use av3d_oracles::{l1_distillation, max_relative_error, numeric_gradient, softmax_cross_entropy};

const STEP: f64 = 1e-5;

fn features(rows: &[Vec<f64>]) -> Vec<ObjectFeature> {
    rows.iter().map(|r| ObjectFeature::new(r.clone()).unwrap()).collect()
}

fn bank(rng: &mut SampleStream, n: usize, dim: usize) -> (EmbeddingBank, Vec<Vec<f64>>) {
    let mut b = EmbeddingBank::new(dim).unwrap();
    for i in 0..n {
        b.push_labeled(format!("k{i}"), Embedding::normalized(&rng.unit_vector(dim)).unwrap(), Provenance::Base)
            .unwrap();
    }
    let rows = b.embeddings().map(|e| e.to_f64()).collect();
    (b, rows)
}

#[test]
fn distillation_gradient_matches_differences() {
    let mut rng = SampleStream::new(1);
    for dim in [4, 64] {
        for _ in 0..5 {
            let n = 3;
            let f3d: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vector(dim)).collect();
            // keep every coordinate away from the kink of |x|
            let f2d: Vec<Vec<f64>> = f3d
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|x| {
                            let off = rng.uniform(0.01, 1.0) * if rng.chance(0.5) { 1.0 } else { -1.0 };
                            x + off
                        })
                        .collect()
                })
                .collect();
            let target = features(&f2d);
            let got = distillation_loss(&features(&f3d), &target).unwrap();
            assert!((got.value - l1_distillation(&f3d, &f2d)).abs() < 1e-12);
            let num = numeric_gradient(
                |x| distillation_loss(&features(x), &target).unwrap().value,
                &f3d,
                STEP,
            );
            assert!(max_relative_error(&got.grad, &num, 1e-6) < 1e-4);
        }
    }
}

#[test]
fn contrastive_gradient_matches_differences() {
    let mut rng = SampleStream::new(2);
    for dim in [4, 64] {
        for tau in [1.0, 0.1] {
            let (b, rows) = bank(&mut rng, 7, dim);
            let f3d: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vector(dim)).collect();
            let targets: Vec<usize> = (0..4).map(|_| rng.index(7)).collect();
            let got = contrastive_loss(&features(&f3d), &targets, &b, tau).unwrap();
            let want = softmax_cross_entropy(&f3d, &targets, &rows, tau);
            assert!((got.value - want).abs() < 1e-10 * want.max(1.0));
            let num = numeric_gradient(
                |x| contrastive_loss(&features(x), &targets, &b, tau).unwrap().value,
                &f3d,
                STEP,
            );
            assert!(max_relative_error(&got.grad, &num, 1e-6) < 1e-4);
        }
    }
}

#[test]
fn probabilities_sum_to_one_and_follow_dot_ranking() {
    let mut rng = SampleStream::new(3);
    let (b, rows) = bank(&mut rng, 20, 16);
    for _ in 0..50 {
        let f = rng.normal_vector(16);
        let p = class_probabilities(&ObjectFeature::new(f.clone()).unwrap(), &b, 1.0).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&x| x >= 0.0));
        let dots: Vec<f64> = rows.iter().map(|r| r.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        assert_eq!(argmax(&p), argmax(&dots));
    }
}

#[test]
fn contrastive_is_nonnegative() {
    let mut rng = SampleStream::new(4);
    let (b, _) = bank(&mut rng, 5, 8);
    for _ in 0..20 {
        let f: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vector(8)).collect();
        let l = contrastive_loss(&features(&f), &[0, 1, 2], &b, 0.5).unwrap();
        assert!(l.value >= 0.0);
    }
}
