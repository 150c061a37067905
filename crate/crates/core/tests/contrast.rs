mod common;

use std::collections::HashMap;

use anatembed::augment::{pair_from_transforms, AugmentConfig, SpatialTransform};
use anatembed::contrast::{
    global_diverse_negatives, global_hard_negatives, info_nce, loss_and_grads, random_negatives,
    sample_positives, CellRef, Exclusion, FieldGeom, Positive, Term,
};
use anatembed::grid::Extent;
use anatembed::net::EmbeddingField;
use anatembed::phantom::generate;
use anatembed::rng::stream;
use anatembed::Error;
use common::selection;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn hard_negatives_match_exhaustive_sort_in_every_trial() {
    let matched = (0..100)
        .filter(|&i| selection::hard_negative_trial(i))
        .count();
    assert_eq!(matched, 100);
}

#[test]
fn no_negative_falls_inside_the_exclusion_zone() {
    let rep = selection::delta_exclusion(100_000);
    assert!(rep.selections >= 100_000);
    assert_eq!(rep.violations, 0, "{rep:?}");
}

#[test]
fn closed_form_losses() {
    let f = [1.0f32, 0.0];
    let h = [0.0f32, 1.0];
    let l = info_nce(&f, Some(&f), &[&h], 0.5).unwrap();
    assert!((l - 0.1269280110429725).abs() < 1e-6);
    for k in 1..=5usize {
        let hs: Vec<Vec<f32>> = (1..=k)
            .map(|j| {
                let mut v = vec![0.0f32; 6];
                v[j] = 1.0;
                v
            })
            .collect();
        let mut anchor = vec![0.0f32; 6];
        anchor[0] = 1.0;
        let refs: Vec<&[f32]> = hs.iter().map(Vec::as_slice).collect();
        let l = info_nce(&anchor, None, &refs, 0.5).unwrap();
        assert!((l - (1.0 + k as f64 * (-2.0f64).exp()).ln()).abs() < 1e-12);
    }
}

#[test]
fn batch_loss_is_the_mean_of_its_terms() {
    let mut rng = stream(5, "mean", 0);
    let e = Extent::from_sizes(&[3, 3]).unwrap();
    let mut values = vec![0.0f32; 2 * 9];
    for cell in 0..9 {
        let a: f64 = rand::Rng::gen_range(&mut rng, 0.0..6.28);
        values[cell] = a.cos() as f32;
        values[9 + cell] = a.sin() as f32;
    }
    let field = EmbeddingField {
        values,
        dim: 2,
        extent: e,
        stride: [1; 3],
        origin: [0.0; 3],
    };
    let r = |cell| CellRef { field: 0, cell };
    let terms = vec![
        Term {
            anchor: r(0),
            positive: Some(r(1)),
            negatives: vec![r(2), r(3)],
        },
        Term {
            anchor: r(4),
            positive: None,
            negatives: vec![r(5), r(6), r(7)],
        },
    ];
    let (mean, _) = loss_and_grads(&[&field], &terms, 0.5).unwrap();
    let v = |c| field.vector(c);
    let a = info_nce(&v(0), Some(&v(1)), &[&v(2), &v(3)], 0.5).unwrap();
    let b = info_nce(&v(4), None, &[&v(5), &v(6), &v(7)], 0.5).unwrap();
    assert!((mean - (a + b) / 2.0).abs() < 1e-12);
}

fn fixed_pair() -> anatembed::augment::PatchPair {
    let p = generate(0, 2, &[128, 128], 0.3).unwrap();
    let ta = SpatialTransform::crop(2, &[30.0, 30.0], &[40, 40]).unwrap();
    let mut tb = SpatialTransform::crop(2, &[45.0, 38.0], &[40, 40]).unwrap();
    tb.rotation_deg = 12.0;
    pair_from_transforms(&p, ta, tb)
}

#[test]
fn positives_are_uniform_over_overlap_and_body() {
    let pair = fixed_pair();
    let e = pair.overlap_mask_a.extent();
    let pool: Vec<usize> = (0..e.len())
        .filter(|&i| {
            if !(pair.overlap_mask_a.data()[i] && pair.body_mask_a.data()[i]) {
                return false;
            }
            let c = e.coords(i);
            let q = pair
                .correspondence(&[c[0] as f64, c[1] as f64, c[2] as f64])
                .unwrap();
            pair.body_mask_b.sample_nearest(&q) == Some(true)
        })
        .collect();
    assert!(pool.len() > 100);
    let n = 10_000;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut rng = stream(1, "uniform", 0);
    for _ in 0..n {
        let pos = sample_positives(&pair, 1, &mut rng).unwrap();
        let Positive::Pair { a, b } = pos.items[0] else {
            panic!("expected a pair")
        };
        let q = pair.correspondence(&a).unwrap();
        assert!((0..3).all(|k| (q[k] - b[k]).abs() < 0.5));
        let idx = e.index(a[0] as usize, a[1] as usize, a[2] as usize);
        *counts.entry(idx).or_default() += 1;
    }
    assert!(counts.keys().all(|k| pool.contains(k)));
    let expected = n as f64 / pool.len() as f64;
    let chi2: f64 = pool
        .iter()
        .map(|i| {
            let o = *counts.get(i).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new((pool.len() - 1) as f64).unwrap().cdf(chi2);
    assert!(p_value > 0.01, "chi2 {chi2} p {p_value}");
}

#[test]
fn positives_respect_correspondence_and_body() {
    let p = generate(3, 2, &[128, 128], 0.3).unwrap();
    let cfg = AugmentConfig::default();
    for k in 0..30 {
        let pair = anatembed::augment::sample_pair(&p, &cfg, &mut stream(k, "pos", 0)).unwrap();
        let pos = sample_positives(&pair, 32, &mut stream(k, "pos", 1)).unwrap();
        assert!(pos.items.len() >= 32);
        for item in &pos.items {
            match *item {
                Positive::Pair { a, b } => {
                    let q = pair.correspondence(&a).unwrap();
                    assert!((0..3).all(|i| (q[i] - b[i]).abs() < 0.5));
                    assert_eq!(pair.body_mask_a.sample_nearest(&a), Some(true));
                    assert_eq!(pair.body_mask_b.sample_nearest(&b), Some(true));
                }
                Positive::SelfPositive { .. } => {
                    assert!(!pair.has_overlap() || pos.self_positive())
                }
            }
        }
    }
}

#[test]
fn disjoint_pairs_fall_back_to_self_positives() {
    let p = generate(0, 2, &[128, 128], 0.3).unwrap();
    let ta = SpatialTransform::crop(2, &[10.0, 10.0], &[40, 40]).unwrap();
    let tb = SpatialTransform::crop(2, &[70.0, 70.0], &[40, 40]).unwrap();
    let pair = pair_from_transforms(&p, ta, tb);
    let pos = sample_positives(&pair, 8, &mut stream(0, "self", 0)).unwrap();
    assert!(pos.self_positive());
    assert_eq!(pos.items.len(), 16);
}

fn grid_geom(image: usize, h: usize, w: usize) -> FieldGeom {
    FieldGeom {
        image,
        sources: (0..h * w)
            .map(|c| [0.0, (c / w) as f64, (c % w) as f64])
            .collect(),
    }
}

#[test]
fn exhausted_eligible_set_is_an_error() {
    let geoms = vec![grid_geom(0, 2, 2)];
    let field = EmbeddingField {
        values: vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        dim: 2,
        extent: Extent::from_sizes(&[2, 2]).unwrap(),
        stride: [1; 3],
        origin: [0.0; 3],
    };
    let everything = Exclusion {
        image: 0,
        points: vec![[0.0, 0.5, 0.5]],
        radius: [0.0, 5.0, 5.0],
        own: vec![],
    };
    let r = global_hard_negatives(&[1.0, 0.0], &[(0, &field)], &geoms, &everything, 3);
    assert!(matches!(r, Err(Error::NoEligibleNegatives)));
    let r = global_diverse_negatives(&[4], &geoms, &everything, 3, &mut stream(0, "e", 0));
    assert!(matches!(r, Err(Error::NoEligibleNegatives)));
    let r = random_negatives(&[(0, 4)], &geoms, &everything, 3, &mut stream(0, "e", 0));
    assert!(matches!(r, Err(Error::NoEligibleNegatives)));
}

#[test]
fn diverse_negatives_reach_every_field_of_the_batch() {
    // b = 4 images, two views each
    let geoms: Vec<FieldGeom> = (0..8).map(|f| grid_geom(f / 2, 4, 4)).collect();
    let excl = Exclusion {
        image: 0,
        points: vec![[0.0, 1.0, 1.0]],
        radius: [0.0, 1.0, 1.0],
        own: vec![CellRef { field: 0, cell: 5 }],
    };
    let mut seen = [false; 8];
    let mut rng = stream(3, "coupon", 0);
    for _ in 0..100 {
        for r in global_diverse_negatives(&[16; 8], &geoms, &excl, 1, &mut rng).unwrap() {
            assert!(excl.allows(r, &geoms));
            seen[r.field] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "{seen:?}");
}
