//! Stochastic patch pairs with exact pixel correspondence.
//!
//! A [`SpatialTransform`] maps patch pixels to source-image pixels:
//!
//! ```text
//! source(p) = offset + deform(rotate(flip(unresize(p))))
//! ```
//!
//! Every stage is analytic except the elastic deformation, which is inverted
//! numerically by fixed-point iteration. Intensity jitter touches patch
//! values only and never the geometry.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Extent, Grid, Point};
use crate::phantom::Phantom;

/// Hard cap on elastic displacement as a fraction of the crop extent; keeps
/// the deformation invertible.
pub const MAX_ELASTIC_FRACTION: f64 = 0.05;
const INVERSE_ITERS: usize = 60;
const INVERSE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Output patch extent per active axis.
    pub patch_size: Vec<usize>,
    pub scale_enabled: bool,
    /// Crop extent range as a multiple of `patch_size`.
    pub scale_range: [f64; 2],
    pub deform_rotate_enabled: bool,
    /// Rotations are drawn uniformly from `±rotation_deg` (in-plane).
    pub rotation_deg: f64,
    /// Elastic amplitude as a fraction of the crop extent.
    pub elastic_amplitude: f64,
    /// Control points per axis of the elastic displacement grid.
    pub elastic_grid: usize,
    pub intensity_enabled: bool,
    pub intensity_gamma_range: [f64; 2],
    pub intensity_noise_std: f64,
    /// Linear rescale `a·v + b` ranges.
    pub intensity_scale_range: [f64; 2],
    pub intensity_shift_range: [f64; 2],
    pub flip_enabled: bool,
    /// Axes (0-based over the active axes) that may be flipped.
    pub flip_axes: Vec<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            patch_size: vec![48, 48],
            scale_enabled: true,
            scale_range: [0.6, 1.4],
            deform_rotate_enabled: true,
            rotation_deg: 30.0,
            elastic_amplitude: 0.05,
            elastic_grid: 4,
            intensity_enabled: true,
            intensity_gamma_range: [0.7, 1.5],
            intensity_noise_std: 0.02,
            intensity_scale_range: [0.9, 1.1],
            intensity_shift_range: [-0.1, 0.1],
            flip_enabled: false,
            flip_axes: vec![1],
        }
    }
}

impl AugmentConfig {
    /// Crop-only configuration (first rung of the augmentation ladder).
    pub fn crop_only(patch_size: Vec<usize>) -> Self {
        AugmentConfig {
            patch_size,
            scale_enabled: false,
            deform_rotate_enabled: false,
            intensity_enabled: false,
            flip_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self, rank: usize) -> Result<()> {
        if self.patch_size.len() != rank {
            return Err(Error::config(format!(
                "augment.patch_size has {} axes, data rank is {rank}",
                self.patch_size.len()
            )));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::config("augment.patch_size must be positive"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(
                "augment.scale_range must satisfy 0 < lo <= hi",
            ));
        }
        if !(0.0..=MAX_ELASTIC_FRACTION).contains(&self.elastic_amplitude) {
            return Err(Error::config(format!(
                "augment.elastic_amplitude must lie in [0, {MAX_ELASTIC_FRACTION}]"
            )));
        }
        if self.elastic_grid < 2 {
            return Err(Error::config(
                "augment.elastic_grid needs at least 2 control points",
            ));
        }
        let [g0, g1] = self.intensity_gamma_range;
        if !(g0 > 0.0 && g0 <= g1) {
            return Err(Error::config(
                "augment.intensity_gamma_range must satisfy 0 < lo <= hi",
            ));
        }
        if self.flip_axes.iter().any(|&a| a >= rank) {
            return Err(Error::config("augment.flip_axes refers to a missing axis"));
        }
        Ok(())
    }

    /// Checks that the largest crop fits inside `image`.
    pub fn check_fits(&self, image: Extent) -> Result<()> {
        let sizes = image.sizes();
        let max_scale = if self.scale_enabled {
            self.scale_range[1]
        } else {
            1.0
        };
        for (a, (&p, &s)) in self.patch_size.iter().zip(&sizes).enumerate() {
            if (p as f64 * max_scale).round() as usize > s {
                return Err(Error::config(format!(
                    "patch extent {p} (×{max_scale}) exceeds image extent {s} on axis {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Smooth displacement interpolated bilinearly (trilinearly in 3D) from a
/// coarse control grid spanning the crop frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticField {
    points: [usize; 3],
    span: [f64; 3],
    /// Displacement `[dz, dy, dx]` per control point.
    values: Vec<[f64; 3]>,
}

impl ElasticField {
    pub fn random(
        rank: usize,
        grid: usize,
        crop: [f64; 3],
        amplitude: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let off = 3 - rank;
        let mut points = [1usize; 3];
        let mut span = [1.0; 3];
        for a in off..3 {
            points[a] = grid;
            span[a] = (crop[a] - 1.0).max(1.0);
        }
        let n = points.iter().product();
        let values = (0..n)
            .map(|_| {
                let mut v = [0.0; 3];
                for a in off..3 {
                    v[a] = rng.gen_range(-1.0..=1.0) * amplitude * crop[a];
                }
                v
            })
            .collect();
        ElasticField {
            points,
            span,
            values,
        }
    }

    fn displacement(&self, r: &Point) -> Point {
        let mut lo = [0usize; 3];
        let mut w = [0.0; 3];
        for a in 0..3 {
            if self.points[a] == 1 {
                continue;
            }
            let g = (r[a] / self.span[a]).clamp(0.0, 1.0) * (self.points[a] - 1) as f64;
            lo[a] = (g.floor() as usize).min(self.points[a] - 2);
            w[a] = g - lo[a] as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8usize {
            let mut idx = [0usize; 3];
            let mut wt = 1.0;
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                if self.points[a] == 1 {
                    if bit == 1 {
                        wt = 0.0;
                    }
                    continue;
                }
                idx[a] = lo[a] + bit;
                wt *= if bit == 1 { w[a] } else { 1.0 - w[a] };
            }
            if wt == 0.0 {
                continue;
            }
            let v = &self.values[(idx[0] * self.points[1] + idx[1]) * self.points[2] + idx[2]];
            for a in 0..3 {
                out[a] += wt * v[a];
            }
        }
        out
    }
}

/// Patch → source mapping for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTransform {
    pub rank: usize,
    /// Source pixel coordinate of the crop's first pixel, `[z, y, x]`.
    pub crop_offset: Point,
    /// Crop extent in source pixels.
    pub crop_size: [f64; 3],
    /// Patch extent.
    pub output_size: [usize; 3],
    /// In-plane rotation about the crop center, degrees.
    pub rotation_deg: f64,
    pub elastic: Option<ElasticField>,
    pub flip: [bool; 3],
}

impl SpatialTransform {
    /// Pure crop of `size` pixels at `offset`, no resize.
    pub fn crop(rank: usize, offset: &[f64], size: &[usize]) -> Result<Self> {
        let e = Extent::from_sizes(size)?;
        if e.rank != rank {
            return Err(Error::shape("crop size rank mismatch"));
        }
        let o = e.lift(offset)?;
        Ok(SpatialTransform {
            rank,
            crop_offset: o,
            crop_size: e.dims.map(|d| d as f64),
            output_size: e.dims,
            rotation_deg: 0.0,
            elastic: None,
            flip: [false; 3],
        })
    }

    fn center(&self) -> [f64; 3] {
        self.crop_size.map(|c| (c - 1.0) / 2.0)
    }

    fn rotate(&self, q: &Point, angle_deg: f64) -> Point {
        if angle_deg == 0.0 {
            return *q;
        }
        let c = self.center();
        let (s, co) = (angle_deg * PI / 180.0).sin_cos();
        let (dy, dx) = (q[1] - c[1], q[2] - c[2]);
        [q[0], c[1] + co * dy - s * dx, c[2] + s * dy + co * dx]
    }

    /// Patch pixel → crop frame (undo resize, then flip).
    fn to_crop(&self, p: &Point) -> Point {
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = (p[a] + 0.5) * self.crop_size[a] / self.output_size[a] as f64 - 0.5;
            if self.flip[a] {
                q[a] = self.crop_size[a] - 1.0 - q[a];
            }
        }
        q
    }

    fn from_crop(&self, q: &Point) -> Point {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let qa = if self.flip[a] {
                self.crop_size[a] - 1.0 - q[a]
            } else {
                q[a]
            };
            p[a] = (qa + 0.5) * self.output_size[a] as f64 / self.crop_size[a] - 0.5;
        }
        p
    }

    pub fn forward(&self, p: &Point) -> Point {
        let r = self.rotate(&self.to_crop(p), self.rotation_deg);
        let e = match &self.elastic {
            Some(f) => {
                let d = f.displacement(&r);
                [r[0] + d[0], r[1] + d[1], r[2] + d[2]]
            }
            None => r,
        };
        [
            e[0] + self.crop_offset[0],
            e[1] + self.crop_offset[1],
            e[2] + self.crop_offset[2],
        ]
    }

    pub fn inverse(&self, s: &Point) -> Point {
        let e = [
            s[0] - self.crop_offset[0],
            s[1] - self.crop_offset[1],
            s[2] - self.crop_offset[2],
        ];
        let r = match &self.elastic {
            Some(f) => {
                // r + d(r) = e
                let mut r = e;
                for _ in 0..INVERSE_ITERS {
                    let d = f.displacement(&r);
                    let next = [e[0] - d[0], e[1] - d[1], e[2] - d[2]];
                    let step = (0..3).map(|a| (next[a] - r[a]).abs()).fold(0.0, f64::max);
                    r = next;
                    if step < INVERSE_TOL {
                        break;
                    }
                }
                r
            }
            None => e,
        };
        self.from_crop(&self.rotate(&r, -self.rotation_deg))
    }

    pub fn output_extent(&self) -> Extent {
        Extent {
            rank: self.rank,
            dims: self.output_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub patch_a: Grid<f32>,
    pub patch_b: Grid<f32>,
    pub transform_a: SpatialTransform,
    pub transform_b: SpatialTransform,
    pub overlap_mask_a: Grid<bool>,
    pub body_mask_a: Grid<bool>,
    pub body_mask_b: Grid<bool>,
    source_extent: Extent,
}

/// Inverse maps of edge pixels land a rounding error outside the patch;
/// those are snapped back onto the edge.
const EDGE_TOL: f64 = 1e-6;

fn inside_patch(e: Extent, mut q: Point) -> Option<Point> {
    for a in e.first_axis()..3 {
        let hi = (e.dims[a] - 1) as f64;
        if q[a] < -EDGE_TOL || q[a] > hi + EDGE_TOL {
            return None;
        }
        q[a] = q[a].clamp(0.0, hi);
    }
    e.contains(&q).then_some(q)
}

impl PatchPair {
    pub fn source_extent(&self) -> Extent {
        self.source_extent
    }

    /// Real-valued pixel in `patch_b` seeing the same source point as `p` in
    /// `patch_a`, if it lies inside `patch_b` and inside the source image.
    pub fn correspondence(&self, p: &Point) -> Option<Point> {
        let s = self.transform_a.forward(p);
        if !self.source_extent.contains(&s) {
            return None;
        }
        inside_patch(
            self.transform_b.output_extent(),
            self.transform_b.inverse(&s),
        )
    }

    /// Same as [`correspondence`](Self::correspondence) from `patch_b` to `patch_a`.
    pub fn correspondence_ba(&self, q: &Point) -> Option<Point> {
        let s = self.transform_b.forward(q);
        if !self.source_extent.contains(&s) {
            return None;
        }
        inside_patch(
            self.transform_a.output_extent(),
            self.transform_a.inverse(&s),
        )
    }

    pub fn has_overlap(&self) -> bool {
        self.overlap_mask_a.data().iter().any(|&b| b)
    }
}

fn draw_transform(
    rank: usize,
    image: Extent,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> SpatialTransform {
    let off = 3 - rank;
    let mut out = [1usize; 3];
    out[off..].copy_from_slice(&cfg.patch_size);
    let scale = if cfg.scale_enabled {
        rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1])
    } else {
        1.0
    };
    let mut crop = [1.0; 3];
    let mut offset = [0.0; 3];
    for a in off..3 {
        let c = ((out[a] as f64 * scale).round() as usize).clamp(1, image.dims[a]);
        crop[a] = c as f64;
        offset[a] = rng.gen_range(0..=image.dims[a] - c) as f64;
    }
    let mut t = SpatialTransform {
        rank,
        crop_offset: offset,
        crop_size: crop,
        output_size: out,
        rotation_deg: 0.0,
        elastic: None,
        flip: [false; 3],
    };
    if cfg.deform_rotate_enabled {
        t.rotation_deg = rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg);
        if cfg.elastic_amplitude > 0.0 {
            t.elastic = Some(ElasticField::random(
                rank,
                cfg.elastic_grid,
                crop,
                cfg.elastic_amplitude.min(MAX_ELASTIC_FRACTION),
                rng,
            ));
        }
    }
    if cfg.flip_enabled {
        for &a in &cfg.flip_axes {
            t.flip[off + a] = rng.gen_bool(0.5);
        }
    }
    t
}

/// Resamples the source image and body mask through `t`.
pub fn render_view(phantom: &Phantom, t: &SpatialTransform) -> (Grid<f32>, Grid<bool>) {
    let e = t.output_extent();
    let mut vals = Vec::with_capacity(e.len());
    let mut mask = Vec::with_capacity(e.len());
    for i in 0..e.len() {
        let c = e.coords(i);
        let s = t.forward(&[c[0] as f64, c[1] as f64, c[2] as f64]);
        vals.push(phantom.image.sample_linear(&s).unwrap_or(0.0) as f32);
        mask.push(phantom.body_mask.sample_nearest(&s).unwrap_or(false));
    }
    (
        Grid::from_vec(e, vals).expect("sized"),
        Grid::from_vec(e, mask).expect("sized"),
    )
}

/// Gamma, linear rescale and additive noise on values only.
pub fn jitter_intensity(patch: &mut Grid<f32>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let gamma = rng.gen_range(cfg.intensity_gamma_range[0]..=cfg.intensity_gamma_range[1]);
    let a = rng.gen_range(cfg.intensity_scale_range[0]..=cfg.intensity_scale_range[1]);
    let b = rng.gen_range(cfg.intensity_shift_range[0]..=cfg.intensity_shift_range[1]);
    for v in patch.data_mut() {
        let g = (*v as f64).max(0.0).powf(gamma);
        *v = (a * g + b + cfg.intensity_noise_std * rng.sample::<f64, _>(StandardNormal)) as f32;
    }
}

/// Builds a pair from two explicit transforms (no intensity jitter).
pub fn pair_from_transforms(
    phantom: &Phantom,
    ta: SpatialTransform,
    tb: SpatialTransform,
) -> PatchPair {
    let (patch_a, body_mask_a) = render_view(phantom, &ta);
    let (patch_b, body_mask_b) = render_view(phantom, &tb);
    let source_extent = phantom.extent();
    let mut pair = PatchPair {
        overlap_mask_a: Grid::filled(ta.output_extent(), false),
        patch_a,
        patch_b,
        transform_a: ta,
        transform_b: tb,
        body_mask_a,
        body_mask_b,
        source_extent,
    };
    let e = pair.transform_a.output_extent();
    let overlap = (0..e.len())
        .map(|i| {
            let c = e.coords(i);
            pair.correspondence(&[c[0] as f64, c[1] as f64, c[2] as f64])
                .is_some()
        })
        .collect();
    pair.overlap_mask_a = Grid::from_vec(e, overlap).expect("sized");
    pair
}

/// Draws two augmented views of `phantom`. Pairs that do not overlap are
/// returned as-is.
pub fn sample_pair(
    phantom: &Phantom,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatchPair> {
    let rank = phantom.rank();
    cfg.validate(rank)?;
    cfg.check_fits(phantom.extent())?;
    let ta = draw_transform(rank, phantom.extent(), cfg, rng);
    let tb = draw_transform(rank, phantom.extent(), cfg, rng);
    let mut pair = pair_from_transforms(phantom, ta, tb);
    if cfg.intensity_enabled {
        jitter_intensity(&mut pair.patch_a, cfg, rng);
        jitter_intensity(&mut pair.patch_b, cfg, rng);
    }
    Ok(pair)
}
