mod common;

use agmask_core::dataio::Mask;
use agmask_core::evaluation::{iou, optimal_threshold, pr_f1, topk_accuracy, ScoredSample};
use common::{grid_best_f1, naive_iou, random_mask, random_samples, rng};
use rand::Rng;

#[test]
fn iou_equals_pixel_loop() {
    let mut r = rng(31);
    for _ in 0..100 {
        let a = random_mask(&mut r, 32, 32);
        let b = random_mask(&mut r, 32, 32);
        assert_eq!(iou(&a, &b).unwrap(), naive_iou(&a, &b));
    }
}

#[test]
fn overlapping_bands_give_one_third() {
    let a = Mask::from_fn(32, 32, |_, y| y < 10);
    let b = Mask::from_fn(32, 32, |_, y| (5..15).contains(&y));
    assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn iou_rejects_mismatched_sizes() {
    assert!(iou(&Mask::new(4, 4), &Mask::new(4, 5)).is_err());
}

fn fixture() -> Vec<ScoredSample> {
    [(0.9, true), (0.8, true), (0.2, false)]
        .iter()
        .enumerate()
        .map(|(i, &(score, correct))| ScoredSample { id: format!("s{i}"), score, correct })
        .collect()
}

#[test]
fn three_sample_fixture() {
    let m = pr_f1(&fixture(), 0.2).unwrap();
    assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.recall, 1.0);
    assert!((m.f1 - 0.8).abs() < 1e-12);
    let report = optimal_threshold(&fixture()).unwrap();
    assert_eq!(report.threshold, 0.8);
    assert_eq!(report.f1, 1.0);
}

#[test]
fn threshold_matches_dense_grid() {
    let mut r = rng(32);
    for _ in 0..100 {
        let samples = random_samples(&mut r);
        let report = optimal_threshold(&samples).unwrap();
        let (grid_f1, grid_theta) = grid_best_f1(&samples);
        assert!((report.f1 - grid_f1).abs() < 1e-12, "{} vs {grid_f1}", report.f1);
        assert!((pr_f1(&samples, grid_theta).unwrap().f1 - report.f1).abs() < 1e-12);
        // with a unique best row the grid's first best threshold sits in the gap just below theta*
        let best_rows = report.table.iter().filter(|row| (row.f1 - report.f1).abs() < 1e-12).count();
        if best_rows == 1 {
            let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
            scores.sort_by(f64::total_cmp);
            let below = scores.iter().rev().find(|&&s| s < report.threshold).copied().unwrap_or(-1.0);
            assert!(grid_theta > below - 1e-12 && grid_theta <= report.threshold + 1e-12);
        }
        for row in &report.table {
            assert!(row.f1 <= report.f1);
        }
    }
}

#[test]
fn all_correct_picks_the_minimum() {
    let mut r = rng(33);
    let samples: Vec<ScoredSample> = (0..10)
        .map(|i| ScoredSample { id: i.to_string(), score: r.random_range(-1.0..1.0), correct: true })
        .collect();
    let report = optimal_threshold(&samples).unwrap();
    let min = samples.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
    assert_eq!(report.threshold, min);
    assert_eq!(report.f1, 1.0);
}

#[test]
fn topk_accuracy_is_monotone_in_k() {
    let mut r = rng(34);
    for _ in 0..20 {
        let c = r.random_range(2..8);
        let n = r.random_range(1..30);
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let accs: Vec<f64> = (1..=c).map(|k| topk_accuracy(&scores, &labels, k).unwrap()).collect();
        assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(accs[c - 1], 1.0);
    }
}
