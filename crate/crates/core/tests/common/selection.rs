//! Negative selection against brute-force oracles.

use anatembed::augment::AugmentConfig;
use anatembed::contrast::{
    global_hard_negatives, local_negatives, CellRef, Exclusion, FieldGeom, Positive,
};
use anatembed::grid::{Extent, Point};
use anatembed::net::{EmbeddingField, EncoderConfig};
use anatembed::phantom::{generate, Phantom};
use anatembed::rng::stream;
use anatembed::trainer::{forward_batch, select_terms, TrainConfig, Trainer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn toy_field(rng: &mut ChaCha8Rng, h: usize, w: usize, dim: usize) -> EmbeddingField {
    let n = h * w;
    let mut values = vec![0.0f32; dim * n];
    for cell in 0..n {
        for (c, v) in unit_vec(rng, dim).into_iter().enumerate() {
            values[c * n + cell] = v;
        }
    }
    EmbeddingField {
        values,
        dim,
        extent: Extent::from_sizes(&[h, w]).unwrap(),
        stride: [1, 1, 1],
        origin: [0.0; 3],
    }
}

/// Independent restatement of the exclusion rule.
fn oracle_allows(
    r: CellRef,
    image_of: &[usize],
    sources: &[Vec<Point>],
    anchor_image: usize,
    points: &[Point],
    radius: f64,
    own: &[CellRef],
) -> bool {
    if own.contains(&r) {
        return false;
    }
    if radius <= 0.0 || image_of[r.field] != anchor_image {
        return true;
    }
    let s = sources[r.field][r.cell];
    points
        .iter()
        .all(|p| ((s[1] - p[1]).powi(2) + (s[2] - p[2]).powi(2)).sqrt() > radius)
}

fn exhaustive_top(mut scored: Vec<(CellRef, f64)>, k: usize) -> Vec<CellRef> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.0.field.cmp(&b.0.field))
            .then(a.0.cell.cmp(&b.0.cell))
    });
    scored.into_iter().take(k).map(|(r, _)| r).collect()
}

/// One randomized toy instance: global hard negatives on two ≤ 8×8 fields
/// and local candidates from a ≤ 8×8 combined map, each compared with an
/// exhaustive sort. Returns whether both agree.
pub fn hard_negative_trial(i: u64) -> bool {
    let mut rng = stream(i, "toy-selection", 0);
    let h = rng.gen_range(2..=8);
    let w = rng.gen_range(2..=8);
    let dim = rng.gen_range(2..=4);
    // fields 0 and 1 belong to image 0, field 2 to image 1
    let fields: Vec<EmbeddingField> = (0..3).map(|_| toy_field(&mut rng, h, w, dim)).collect();
    let image_of = [0usize, 0, 1];
    let shift = [0.0, rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    let sources: Vec<Vec<Point>> = (0..3)
        .map(|f| {
            (0..h * w)
                .map(|c| {
                    let p = fields[f].cell_center(c);
                    if f == 1 {
                        [0.0, p[1] + shift[1], p[2] + shift[2]]
                    } else {
                        p
                    }
                })
                .collect()
        })
        .collect();
    let geoms: Vec<FieldGeom> = (0..3)
        .map(|f| FieldGeom {
            image: image_of[f],
            sources: sources[f].clone(),
        })
        .collect();
    let radius = rng.gen_range(0..=3) as f64;
    let points: Vec<Point> = (0..2)
        .map(|_| {
            [
                0.0,
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
            ]
        })
        .collect();
    let own = vec![
        CellRef {
            field: 0,
            cell: rng.gen_range(0..h * w),
        },
        CellRef {
            field: 1,
            cell: rng.gen_range(0..h * w),
        },
    ];
    let excl = Exclusion {
        image: 0,
        points: points.clone(),
        radius: [0.0, radius, radius],
        own: own.clone(),
    };
    let n_neg = rng.gen_range(1..=12);
    let anchor = unit_vec(&mut rng, dim);

    let mut scored = vec![];
    for f in 0..2 {
        for cell in 0..h * w {
            let r = CellRef { field: f, cell };
            if oracle_allows(r, &image_of, &sources, 0, &points, radius, &own) {
                let v = fields[f].vector(cell);
                let s: f64 = anchor
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                scored.push((r, s));
            }
        }
    }
    let want = exhaustive_top(scored, n_neg);
    let got = global_hard_negatives(
        &anchor,
        &[(0, &fields[0]), (1, &fields[1])],
        &geoms,
        &excl,
        n_neg,
    );
    let global_ok = match got {
        Ok(g) => g == want,
        Err(_) => want.is_empty(),
    };

    // combined score maps on fields 0 and 1
    let maps: Vec<(usize, Vec<f32>)> = (0..2)
        .map(|f| (f, (0..h * w).map(|_| rng.gen_range(-2.0f32..2.0)).collect()))
        .collect();
    let mut scored = vec![];
    for (f, m) in &maps {
        for (cell, &s) in m.iter().enumerate() {
            let r = CellRef { field: *f, cell };
            if oracle_allows(r, &image_of, &sources, 0, &points, radius, &own) {
                scored.push((r, s as f64));
            }
        }
    }
    let n_cand = rng.gen_range(1..=12);
    let want = exhaustive_top(scored, n_cand);
    let mut sel = stream(i, "toy-selection", 1);
    let local_ok = match local_negatives(&maps, &geoms, &excl, n_cand, n_cand, &mut sel) {
        Ok(g) => g == want,
        Err(_) => want.is_empty(),
    };
    // drawing fewer than the pool keeps a distinct subset of it
    let subset_ok =
        match local_negatives(&maps, &geoms, &excl, n_cand, n_cand.div_ceil(2), &mut sel) {
            Ok(g) => {
                let mut d = g.clone();
                d.sort();
                d.dedup();
                d.len() == g.len()
                    && g.len() == n_cand.div_ceil(2).min(want.len())
                    && g.iter().all(|r| want.contains(r))
            }
            Err(_) => want.is_empty(),
        };
    global_ok && local_ok && subset_ok
}

#[derive(Debug, Default)]
pub struct DeltaReport {
    pub selections: usize,
    pub violations: usize,
    pub batches: usize,
}

/// Runs full term construction on desk-sized batches until at least
/// `min_selections` negatives were chosen, and checks every one against the
/// δ and own-cell rules.
pub fn delta_exclusion(min_selections: usize) -> DeltaReport {
    let data: Vec<Phantom> = (0..8)
        .map(|s| generate(s, 2, &[128, 128], 0.3).unwrap())
        .collect();
    let encoder = EncoderConfig::desk_2d();
    let train = TrainConfig::desk_2d();
    let sampling = train.sampling();
    let radius = sampling.delta_mm / data[0].spacing[1];
    let trainer = Trainer::new(encoder.clone(), AugmentConfig::default(), train).unwrap();
    let mut rep = DeltaReport::default();
    let mut t = 0;
    while rep.selections < min_selections {
        let batch = trainer.draw_batch(&data, t).unwrap();
        t += 1;
        let fwd = forward_batch(&encoder, &trainer.params, &batch, &data).unwrap();
        let terms = select_terms(&fwd, &batch, &sampling).unwrap();
        rep.batches += 1;
        let source = |fields: &[EmbeddingField], r: CellRef| {
            let pair = &batch.pairs[r.field / 2];
            let tr = if r.field % 2 == 0 {
                &pair.transform_a
            } else {
                &pair.transform_b
            };
            tr.forward(&fields[r.field].cell_center(r.cell))
        };
        let mut gi = 0;
        let mut li = 0;
        for (image, (pair, pos)) in batch.pairs.iter().zip(&batch.positives).enumerate() {
            for p in &pos.items {
                let anchors: Vec<(Point, Option<Point>)> = match *p {
                    Positive::Pair { a, b } => {
                        let sa = pair.transform_a.forward(&a);
                        let sb = pair.transform_b.forward(&b);
                        vec![(sa, Some(sb)), (sb, Some(sa))]
                    }
                    Positive::SelfPositive { view, p } => {
                        let tr = if view == anatembed::contrast::View::A {
                            &pair.transform_a
                        } else {
                            &pair.transform_b
                        };
                        vec![(tr.forward(&p), None)]
                    }
                };
                for (s0, s1) in anchors {
                    let pts: Vec<Point> = std::iter::once(s0).chain(s1).collect();
                    for (term, fields) in [
                        (terms.global.get(gi), &fwd.global),
                        (terms.local.get(li), &fwd.local),
                    ] {
                        let Some(term) = term else { continue };
                        for &n in &term.negatives {
                            rep.selections += 1;
                            let own = n == term.anchor || Some(n) == term.positive;
                            let near = n.field / 2 == image
                                && pts.iter().any(|q| {
                                    let s = source(fields, n);
                                    ((s[1] - q[1]).powi(2) + (s[2] - q[2]).powi(2)).sqrt() <= radius
                                });
                            if own || near {
                                rep.violations += 1;
                            }
                        }
                    }
                    gi += 1;
                    li += 1;
                }
            }
        }
        assert_eq!(gi, terms.global.len());
        assert_eq!(li, terms.local.len());
    }
    rep
}
