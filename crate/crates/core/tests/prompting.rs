mod common;

use std::collections::HashSet;

use agmask_core::prompting::{binarize, prompts_for, to_bbox_prompt, to_point_prompts, PromptConfig, PromptMode, PromptSet};
use common::{first_peak, label_components, random_cone_map, red_pixels, rng, snapped_centroid};
use proptest::prelude::*;

fn cfg(seed: u64) -> PromptConfig {
    PromptConfig { seed, ..PromptConfig::default() }
}

fn rc(p: &agmask_core::prompting::Point) -> (usize, usize) {
    (p.y, p.x)
}

#[test]
fn two_regions_give_their_centroids() {
    for trial in 0..25 {
        let map = random_cone_map(&mut rng(trial), 2);
        let comps = label_components(&red_pixels(&map, 0.8));
        assert_eq!(comps.len(), 2);
        let PromptSet::MultiplePoints(points) = to_point_prompts(&map, &cfg(trial)).unwrap() else {
            panic!("expected multiple points");
        };
        let got: HashSet<(usize, usize)> = points.iter().map(rc).collect();
        let want: HashSet<(usize, usize)> = comps.iter().map(|c| snapped_centroid(c)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn one_region_gives_peak_and_seeded_samples() {
    for trial in 0..25 {
        let map = random_cone_map(&mut rng(1000 + trial), 1);
        let region: HashSet<(usize, usize)> = red_pixels(&map, 0.8).into_iter().collect();
        let c = cfg(trial);
        let radius = c.radius_for(map.height(), map.width());
        let PromptSet::MultiplePoints(points) = to_point_prompts(&map, &c).unwrap() else {
            panic!("expected multiple points");
        };
        assert_eq!(points.len(), 4);
        let peak = first_peak(&map);
        assert_eq!(rc(&points[0]), peak);
        for p in &points[1..] {
            let (r, col) = rc(p);
            assert!(region.contains(&(r, col)));
            assert!(r.abs_diff(peak.0).max(col.abs_diff(peak.1)) <= radius);
        }
        assert_eq!(to_point_prompts(&map, &c).unwrap(), PromptSet::MultiplePoints(points));
    }
}

#[test]
fn box_is_tight_over_the_red_pixels() {
    for trial in 0..25 {
        let map = random_cone_map(&mut rng(2000 + trial), 1 + (trial as usize % 2));
        let red = red_pixels(&map, 0.8);
        let PromptSet::BoundingBox(b) = to_bbox_prompt(&map, &cfg(0)).unwrap() else {
            panic!("expected a box");
        };
        assert_eq!(b.y0, red.iter().map(|p| p.0).min().unwrap());
        assert_eq!(b.y1, red.iter().map(|p| p.0).max().unwrap());
        assert_eq!(b.x0, red.iter().map(|p| p.1).min().unwrap());
        assert_eq!(b.x1, red.iter().map(|p| p.1).max().unwrap());
    }
}

#[test]
fn identical_under_one_and_four_workers() {
    let maps: Vec<_> = (0..16).map(|i| random_cone_map(&mut rng(3000 + i), 1 + (i as usize % 2))).collect();
    let run = |workers: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
        pool.install(|| {
            use rayon::prelude::*;
            maps.par_iter()
                .enumerate()
                .map(|(i, m)| to_point_prompts(m, &cfg(i as u64)).unwrap())
                .collect::<Vec<_>>()
        })
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prompts_are_distinct_and_in_bounds(seed in 0u64..10_000, cones in 1usize..=2, mode in 0usize..3) {
        let map = random_cone_map(&mut rng(seed), cones);
        let mode = PromptMode::ALL[mode];
        let p = prompts_for(&map, mode, &cfg(seed)).unwrap();
        p.validate(map.width(), map.height()).unwrap();
        let pts = p.points();
        let unique: HashSet<_> = pts.iter().collect();
        prop_assert_eq!(unique.len(), pts.len());
        let red: HashSet<(usize, usize)> = red_pixels(&map, 0.8).into_iter().collect();
        for q in pts {
            prop_assert!(red.contains(&rc(q)));
        }
    }

    #[test]
    fn lower_fraction_never_shrinks_the_red_set(seed in 0u64..10_000, a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let map = random_cone_map(&mut rng(seed), 2);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let big = binarize(&map, lo);
        let small = binarize(&map, hi);
        prop_assert_eq!(small.intersection_count(&big).unwrap(), small.count());
    }
}
