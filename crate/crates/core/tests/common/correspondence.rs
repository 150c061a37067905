//! Pixel correspondence checks over randomly augmented pairs.

use anatembed::augment::{sample_pair, AugmentConfig};
use anatembed::phantom::generate;
use anatembed::rng::stream;
use rand::Rng;

pub const ROUNDTRIP_TOL_PX: f64 = 0.5;
pub const SOURCE_TOL_UNIT: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct CorrespondenceReport {
    pub pairs: usize,
    pub points: usize,
    pub max_roundtrip_px: f64,
    pub max_source_err: f64,
    pub violations: usize,
}

/// Draws augmented pairs until `pairs` of them overlap and checks
/// `points_per_pair` random overlap pixels of each.
pub fn run(cfg: &AugmentConfig, pairs: usize, points_per_pair: usize) -> CorrespondenceReport {
    let mut rep = CorrespondenceReport::default();
    let mut k = 0u64;
    while rep.pairs < pairs {
        let phantom = generate(k % 10, 2, &[128, 128], 0.3).unwrap();
        let mut rng = stream(k, "correspondence", 0);
        k += 1;
        let pair = sample_pair(&phantom, cfg, &mut rng).unwrap();
        let e = pair.overlap_mask_a.extent();
        let overlap: Vec<usize> = (0..e.len())
            .filter(|&i| pair.overlap_mask_a.data()[i])
            .collect();
        if overlap.is_empty() {
            continue;
        }
        rep.pairs += 1;
        for _ in 0..points_per_pair {
            let c = e.coords(overlap[rng.gen_range(0..overlap.len())]);
            let p = [c[0] as f64, c[1] as f64, c[2] as f64];
            rep.points += 1;
            let Some(q) = pair.correspondence(&p) else {
                rep.violations += 1;
                continue;
            };
            let Some(back) = pair.correspondence_ba(&q) else {
                rep.violations += 1;
                continue;
            };
            let rt = (0..3).map(|a| (back[a] - p[a]).powi(2)).sum::<f64>().sqrt();
            let ca = phantom.canonical_at(&pair.transform_a.forward(&p));
            let cb = phantom.canonical_at(&pair.transform_b.forward(&q));
            let src = match (ca, cb) {
                (Some(a), Some(b)) => a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
                _ => f64::INFINITY,
            };
            rep.max_roundtrip_px = rep.max_roundtrip_px.max(rt);
            rep.max_source_err = rep.max_source_err.max(src);
            if rt >= ROUNDTRIP_TOL_PX || src >= SOURCE_TOL_UNIT {
                rep.violations += 1;
            }
        }
    }
    rep
}
