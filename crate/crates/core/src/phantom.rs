//! Procedural anatomy phantoms with exact ground truth.
//!
//! A [`CanonicalLayout`] places primitives and landmarks in the unit cube.
//! Each generated [`Phantom`] pulls that layout back through a smooth,
//! per-sample displacement `c(u) = u + d(u)`, where `u` is the normalized
//! pixel-center position and `d` is a sum of a few low-frequency sinusoids.
//! `coord_field` stores `c` at every pixel, so any two phantoms can be put in
//! exact correspondence through their canonical coordinates.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Extent, Grid, Point};
use crate::rng;
use crate::tensor_file::{self, TensorRecord};

pub const MIN_SIZE: usize = 32;
/// Largest displacement, as a fraction of the image extent, at `variation = 1`.
pub const MAX_DISPLACEMENT_FRACTION: f64 = 0.15;
const WARP_MODES: usize = 4;
const NOISE_STD: f64 = 0.015;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    /// Straight tube along the axis with the largest radius.
    Tube,
    /// Ellipsoidal shell; `thickness` is in canonical units.
    Shell {
        thickness: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    pub kind: ShapeKind,
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkDef {
    pub name: String,
    pub point: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalLayout {
    pub rank: usize,
    /// Painted in order; the first primitive is the body outline.
    pub primitives: Vec<Primitive>,
    pub landmarks: Vec<LandmarkDef>,
    /// Amplitude of the fine canonical texture painted inside the body.
    pub texture: f64,
}

fn prim(name: &str, kind: ShapeKind, center: &[f64], radii: &[f64], intensity: f64) -> Primitive {
    Primitive {
        name: name.into(),
        kind,
        center: center.to_vec(),
        radii: radii.to_vec(),
        intensity,
    }
}

fn lm(name: &str, point: &[f64]) -> LandmarkDef {
    LandmarkDef {
        name: name.into(),
        point: point.to_vec(),
    }
}

impl CanonicalLayout {
    /// Default layout for `rank` 2 (axial-like slice, 8 landmarks) or 3
    /// (torso volume, 12 landmarks). Both are left-right asymmetric.
    pub fn default_for(rank: usize) -> Result<Self> {
        use ShapeKind::*;
        let layout = match rank {
            2 => CanonicalLayout {
                rank,
                primitives: vec![
                    prim("body", Ellipsoid, &[0.5, 0.5], &[0.40, 0.43], 0.35),
                    prim(
                        "ribcage",
                        Shell { thickness: 0.025 },
                        &[0.47, 0.5],
                        &[0.33, 0.37],
                        0.85,
                    ),
                    prim("lung_right", Ellipsoid, &[0.43, 0.32], &[0.21, 0.115], 0.08),
                    prim("lung_left", Ellipsoid, &[0.41, 0.665], &[0.18, 0.10], 0.10),
                    prim("liver", Ellipsoid, &[0.70, 0.33], &[0.09, 0.13], 0.50),
                    prim("heart", Ellipsoid, &[0.56, 0.585], &[0.115, 0.125], 0.62),
                    prim("aorta", Ellipsoid, &[0.66, 0.545], &[0.035, 0.035], 0.75),
                    prim("spine", Ellipsoid, &[0.79, 0.5], &[0.06, 0.075], 0.95),
                    prim("trachea", Tube, &[0.2, 0.5], &[0.09, 0.022], 0.04),
                    prim("sternum", Tube, &[0.12, 0.5], &[0.015, 0.06], 0.90),
                ],
                landmarks: vec![
                    lm("sternum_center", &[0.12, 0.5]),
                    lm("trachea_bifurcation", &[0.285, 0.5]),
                    lm("lung_apex_right", &[0.23, 0.32]),
                    lm("lung_apex_left", &[0.24, 0.665]),
                    lm("heart_center", &[0.56, 0.585]),
                    lm("aorta_center", &[0.66, 0.545]),
                    lm("liver_tip", &[0.70, 0.21]),
                    lm("spine_center", &[0.79, 0.5]),
                ],
                texture: 0.05,
            },
            3 => CanonicalLayout {
                rank,
                primitives: vec![
                    prim(
                        "body",
                        Ellipsoid,
                        &[0.5, 0.5, 0.5],
                        &[0.48, 0.40, 0.43],
                        0.35,
                    ),
                    prim(
                        "ribcage",
                        Shell { thickness: 0.025 },
                        &[0.45, 0.47, 0.5],
                        &[0.40, 0.33, 0.37],
                        0.85,
                    ),
                    prim(
                        "lung_right",
                        Ellipsoid,
                        &[0.40, 0.43, 0.32],
                        &[0.28, 0.21, 0.115],
                        0.08,
                    ),
                    prim(
                        "lung_left",
                        Ellipsoid,
                        &[0.38, 0.41, 0.665],
                        &[0.25, 0.18, 0.10],
                        0.10,
                    ),
                    prim(
                        "liver",
                        Ellipsoid,
                        &[0.76, 0.62, 0.34],
                        &[0.14, 0.15, 0.16],
                        0.50,
                    ),
                    prim(
                        "kidney_right",
                        Ellipsoid,
                        &[0.78, 0.70, 0.36],
                        &[0.07, 0.04, 0.03],
                        0.58,
                    ),
                    prim(
                        "kidney_left",
                        Ellipsoid,
                        &[0.75, 0.70, 0.64],
                        &[0.07, 0.04, 0.03],
                        0.58,
                    ),
                    prim(
                        "heart",
                        Ellipsoid,
                        &[0.53, 0.56, 0.585],
                        &[0.14, 0.115, 0.125],
                        0.62,
                    ),
                    prim(
                        "aorta",
                        Tube,
                        &[0.52, 0.66, 0.545],
                        &[0.40, 0.035, 0.035],
                        0.75,
                    ),
                    prim("spine", Tube, &[0.5, 0.79, 0.5], &[0.46, 0.06, 0.075], 0.95),
                    prim(
                        "trachea",
                        Tube,
                        &[0.22, 0.40, 0.5],
                        &[0.14, 0.022, 0.022],
                        0.04,
                    ),
                    prim(
                        "sternum",
                        Tube,
                        &[0.45, 0.17, 0.5],
                        &[0.19, 0.015, 0.06],
                        0.90,
                    ),
                ],
                landmarks: vec![
                    lm("trachea_bifurcation", &[0.355, 0.40, 0.5]),
                    lm("lung_apex_right", &[0.13, 0.43, 0.32]),
                    lm("lung_apex_left", &[0.14, 0.41, 0.665]),
                    lm("heart_center", &[0.53, 0.56, 0.585]),
                    lm("aorta_top", &[0.13, 0.66, 0.545]),
                    lm("liver_center", &[0.76, 0.62, 0.34]),
                    lm("liver_dome", &[0.63, 0.62, 0.34]),
                    lm("kidney_right", &[0.78, 0.70, 0.36]),
                    lm("kidney_left", &[0.75, 0.70, 0.64]),
                    lm("spine_upper", &[0.3, 0.79, 0.5]),
                    lm("spine_lower", &[0.8, 0.79, 0.5]),
                    lm("sternum_top", &[0.26, 0.17, 0.5]),
                ],
                texture: 0.05,
            },
            r => {
                return Err(Error::config(format!(
                    "phantom rank must be 2 or 3, got {r}"
                )))
            }
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(Error::config(format!(
                "layout rank {} not in {{2, 3}}",
                self.rank
            )));
        }
        let mut names = HashSet::new();
        for p in &self.primitives {
            if !names.insert(p.name.as_str()) {
                return Err(Error::config(format!(
                    "duplicate primitive name {}",
                    p.name
                )));
            }
            if p.center.len() != self.rank || p.radii.len() != self.rank {
                return Err(Error::config(format!(
                    "primitive {} has wrong rank",
                    p.name
                )));
            }
            if p.center.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config(format!(
                    "primitive {} center outside unit cube",
                    p.name
                )));
            }
        }
        if self.primitives.is_empty() {
            return Err(Error::config("layout has no primitives"));
        }
        for l in &self.landmarks {
            if l.point.len() != self.rank || l.point.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::config(format!(
                    "landmark {} outside unit cube",
                    l.name
                )));
            }
            let c = lift(&l.point);
            if self.primitives[0].level(&c) >= 0.0 {
                return Err(Error::config(format!(
                    "landmark {} outside the body",
                    l.name
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash used to check that phantoms share a layout.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn lift(v: &[f64]) -> Point {
    let mut p = [0.0; 3];
    p[3 - v.len()..].copy_from_slice(v);
    p
}

impl Primitive {
    /// Normalized level function: negative inside, zero on the boundary,
    /// roughly `distance / radius` outside.
    fn level(&self, c: &Point) -> f64 {
        let r = self.radii.len();
        let off = 3 - r;
        let rel = |a: usize| (c[off + a] - self.center[a]) / self.radii[a];
        match self.kind {
            ShapeKind::Ellipsoid | ShapeKind::Shell { .. } => {
                (0..r).map(|a| rel(a).powi(2)).sum::<f64>().sqrt() - 1.0
            }
            ShapeKind::Tube => {
                let long = (0..r)
                    .max_by(|&a, &b| self.radii[a].total_cmp(&self.radii[b]))
                    .expect("nonempty");
                let cross = (0..r)
                    .filter(|&a| a != long)
                    .map(|a| rel(a).powi(2))
                    .sum::<f64>()
                    .sqrt();
                rel(long).abs().max(cross) - 1.0
            }
        }
    }

    fn min_radius(&self) -> f64 {
        self.radii.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Soft membership in `[0, 1]` with an edge about one pixel wide.
    fn membership(&self, c: &Point, px_per_unit: f64) -> f64 {
        let soft = |level: f64, rmin: f64| (0.5 - level * rmin * px_per_unit).clamp(0.0, 1.0);
        match self.kind {
            ShapeKind::Shell { thickness } => {
                let outer = soft(self.level(c), self.min_radius());
                let inner = Primitive {
                    name: String::new(),
                    kind: ShapeKind::Ellipsoid,
                    center: self.center.clone(),
                    radii: self
                        .radii
                        .iter()
                        .map(|r| (r - thickness).max(1e-6))
                        .collect(),
                    intensity: 0.0,
                };
                outer * (1.0 - soft(inner.level(c), inner.min_radius()))
            }
            _ => soft(self.level(c), self.min_radius()),
        }
    }
}

/// Smooth displacement `d(u)` in canonical units.
#[derive(Clone, Debug, PartialEq)]
struct Warp {
    rank: usize,
    amplitude: f64,
    // Per active axis: (weight, wave vector, phase) for each mode.
    modes: Vec<Vec<(f64, [f64; 3], f64)>>,
}

impl Warp {
    fn random(rank: usize, variation: f64, rng: &mut ChaCha8Rng) -> Self {
        const FREQS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let off = 3 - rank;
        let modes = (0..rank)
            .map(|_| {
                let mut m: Vec<(f64, [f64; 3], f64)> = (0..WARP_MODES)
                    .map(|_| {
                        let mut k = [0.0; 3];
                        for kk in k.iter_mut().skip(off) {
                            *kk = FREQS[rng.gen_range(0..FREQS.len())];
                        }
                        (rng.gen_range(-1.0..1.0), k, rng.gen_range(0.0..2.0 * PI))
                    })
                    .collect();
                let total: f64 = m.iter().map(|x| x.0.abs()).sum::<f64>().max(1e-12);
                for x in &mut m {
                    x.0 /= total;
                }
                m
            })
            .collect();
        // |d| ≤ variation·15% in Euclidean norm, and ‖∇d‖ < 0.9 keeps the
        // pull-back orientation-preserving.
        let amplitude = (variation * MAX_DISPLACEMENT_FRACTION / (rank as f64).sqrt())
            .min(0.9 / (2.0 * PI * rank as f64));
        Warp {
            rank,
            amplitude,
            modes,
        }
    }

    fn displacement(&self, u: &Point) -> Point {
        let mut d = [0.0; 3];
        if self.amplitude == 0.0 {
            return d;
        }
        let off = 3 - self.rank;
        for (a, modes) in self.modes.iter().enumerate() {
            let s: f64 = modes
                .iter()
                .map(|(w, k, phi)| {
                    w * (2.0 * PI * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) + phi).sin()
                })
                .sum();
            d[off + a] = self.amplitude * s;
        }
        d
    }

    fn canonical(&self, u: &Point) -> Point {
        let d = self.displacement(u);
        [u[0] + d[0], u[1] + d[1], u[2] + d[2]]
    }

    /// Solves `u + d(u) = target` by fixed-point iteration (contraction
    /// because ‖∇d‖ < 1).
    fn invert(&self, target: &Point) -> Point {
        let mut u = *target;
        for _ in 0..200 {
            let c = self.canonical(&u);
            let r = [c[0] - target[0], c[1] - target[1], c[2] - target[2]];
            if r.iter().all(|v| v.abs() < 1e-14) {
                break;
            }
            u = [u[0] - r[0], u[1] - r[1], u[2] - r[2]];
        }
        u
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    /// Pixel coordinate `[z, y, x]` (z = 0 for 2D).
    pub position: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub seed: u64,
    pub variation: f64,
    /// Millimetres per pixel, `[z, y, x]`.
    pub spacing: Point,
    pub image: Grid<f32>,
    /// Canonical coordinate per pixel, one grid per active axis.
    pub coord_field: Vec<Grid<f32>>,
    pub body_mask: Grid<bool>,
    pub landmarks: Vec<Landmark>,
    pub layout_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: Vec<usize>,
    pub variation: f64,
}

/// Generates a phantom from the default layout of the given rank.
pub fn generate(seed: u64, rank: usize, size: &[usize], variation: f64) -> Result<Phantom> {
    let layout = CanonicalLayout::default_for(rank)?;
    generate_with_layout(&layout, seed, size, variation)
}

pub fn generate_with_layout(
    layout: &CanonicalLayout,
    seed: u64,
    size: &[usize],
    variation: f64,
) -> Result<Phantom> {
    layout.validate()?;
    if size.len() != layout.rank {
        return Err(Error::config(format!(
            "size has {} axes but layout rank is {}",
            size.len(),
            layout.rank
        )));
    }
    if let Some(s) = size.iter().find(|&&s| s < MIN_SIZE) {
        return Err(Error::config(format!(
            "phantom size {s} below the minimum of {MIN_SIZE} pixels per axis"
        )));
    }
    if !(0.0..=1.0).contains(&variation) {
        return Err(Error::config(format!(
            "variation {variation} outside [0, 1]"
        )));
    }
    let extent = Extent::from_sizes(size)?;
    let off = extent.first_axis();
    let mut warp_rng = rng::stream(seed, "phantom.warp", 0);
    let mut tone_rng = rng::stream(seed, "phantom.tone", 0);
    let mut noise_rng = rng::stream(seed, "phantom.noise", 0);
    let warp = Warp::random(layout.rank, variation, &mut warp_rng);

    // Per-sample organ contrast and a smooth multiplicative bias field.
    let levels: Vec<f64> = layout
        .primitives
        .iter()
        .map(|p| (p.intensity + tone_rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0))
        .collect();
    let bias_amp: f64 = tone_rng.gen_range(0.02..0.08);
    let bias_k: Vec<f64> = (0..3).map(|_| tone_rng.gen_range(0.3..1.0)).collect();
    let bias_phi: Vec<f64> = (0..3).map(|_| tone_rng.gen_range(0.0..2.0 * PI)).collect();
    let tex_phase: Vec<f64> = (0..3)
        .map(|_| 0.25 * PI * (1 + tone_rng.gen_range(0..2)) as f64)
        .collect();

    let px_per_unit = size.iter().sum::<usize>() as f64 / size.len() as f64;
    let to_u = |idx: [usize; 3]| -> Point {
        let mut u = [0.0; 3];
        for a in off..3 {
            u[a] = (idx[a] as f64 + 0.5) / extent.dims[a] as f64;
        }
        u
    };

    let n = extent.len();
    let mut image = vec![0.0f32; n];
    let mut mask = vec![false; n];
    let mut coords: Vec<Vec<f32>> = vec![vec![0.0; n]; layout.rank];
    for i in 0..n {
        let idx = extent.coords(i);
        let u = to_u(idx);
        let c = warp.canonical(&u);
        for a in 0..layout.rank {
            coords[a][i] = c[off + a] as f32;
        }
        let mut v = 0.0f64;
        let mut inside = false;
        let mut body_alpha = 0.0;
        for (k, p) in layout.primitives.iter().enumerate() {
            let alpha = p.membership(&c, px_per_unit);
            if k == 0 {
                body_alpha = alpha;
            }
            if alpha > 0.0 {
                v = v * (1.0 - alpha) + levels[k] * alpha;
            }
            inside |= alpha >= 0.5;
        }
        if inside {
            let tex: f64 = (off..3)
                .map(|a| (2.0 * PI * 9.0 * c[a] + tex_phase[a]).sin())
                .product();
            v += layout.texture * tex * body_alpha;
            let bias: f64 = (off..3)
                .map(|a| (2.0 * PI * bias_k[a] * u[a] + bias_phi[a]).sin())
                .sum::<f64>();
            v *= 1.0 + bias_amp * bias / layout.rank as f64;
            let noise: f64 = noise_rng.sample::<f64, _>(StandardNormal) * NOISE_STD;
            v += noise;
        } else {
            v = 0.0;
        }
        image[i] = v.clamp(0.0, 1.0) as f32;
        mask[i] = inside;
    }

    let image = Grid::from_vec(extent, image)?;
    let body_mask = Grid::from_vec(extent, mask)?;
    let coord_field = coords
        .into_iter()
        .map(|c| Grid::from_vec(extent, c))
        .collect::<Result<Vec<_>>>()?;

    let mut landmarks = Vec::with_capacity(layout.landmarks.len());
    for def in &layout.landmarks {
        let u = warp.invert(&lift(&def.point));
        let mut pos = [0.0; 3];
        for a in off..3 {
            pos[a] = u[a] * extent.dims[a] as f64 - 0.5;
        }
        if !extent.contains(&pos) || body_mask.sample_nearest(&pos) != Some(true) {
            return Err(Error::config(format!(
                "landmark {} falls outside the body for seed {seed}",
                def.name
            )));
        }
        landmarks.push(Landmark {
            name: def.name.clone(),
            position: pos,
        });
    }

    Ok(Phantom {
        seed,
        variation,
        spacing: [1.0; 3],
        image,
        coord_field,
        body_mask,
        landmarks,
        layout_hash: layout.hash(),
    })
}

impl Phantom {
    pub fn extent(&self) -> Extent {
        self.image.extent()
    }

    pub fn rank(&self) -> usize {
        self.extent().rank
    }

    /// Canonical coordinate at a real-valued pixel position (linear
    /// interpolation of the coordinate field).
    pub fn canonical_at(&self, p: &Point) -> Option<Vec<f64>> {
        self.coord_field
            .iter()
            .map(|g| g.sample_linear(p))
            .collect()
    }

    /// Pixel whose stored canonical coordinate is nearest to `target`
    /// (exhaustive search over the body).
    pub fn nearest_canonical_pixel(&self, target: &[f64]) -> Option<Point> {
        let e = self.extent();
        let mut best: Option<(f64, usize)> = None;
        for i in 0..e.len() {
            if !self.body_mask.data()[i] {
                continue;
            }
            let d: f64 = self
                .coord_field
                .iter()
                .zip(target)
                .map(|(g, t)| (g.data()[i] as f64 - t).powi(2))
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| {
            let c = e.coords(i);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
    }

    /// Discrete central-difference Jacobian determinant of the coordinate
    /// field at an interior pixel.
    pub fn jacobian_det(&self, idx: [usize; 3]) -> f64 {
        let e = self.extent();
        let off = e.first_axis();
        let r = e.rank;
        let mut j = vec![vec![0.0; r]; r];
        for (b, col) in (off..3).enumerate() {
            let mut lo = idx;
            let mut hi = idx;
            lo[col] -= 1;
            hi[col] += 1;
            for (a, g) in self.coord_field.iter().enumerate() {
                j[a][b] =
                    (*g.get(hi[0], hi[1], hi[2]) as f64 - *g.get(lo[0], lo[1], lo[2]) as f64) / 2.0;
            }
        }
        if r == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        }
    }

    pub fn landmark(&self, name: &str) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.name == name)
    }
}

/// Landmark coordinates (`rank` columns) per phantom, rows in layout order.
pub fn landmark_set(phantoms: &[Phantom]) -> Result<Vec<Vec<Vec<f64>>>> {
    let Some(first) = phantoms.first() else {
        return Ok(vec![]);
    };
    for p in phantoms {
        if p.layout_hash != first.layout_hash {
            return Err(Error::LayoutMismatch(
                first.layout_hash.clone(),
                p.layout_hash.clone(),
            ));
        }
    }
    Ok(phantoms
        .iter()
        .map(|p| {
            p.landmarks
                .iter()
                .map(|l| p.extent().project(&l.position))
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarLandmark {
    pub name: String,
    pub position: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spacing: Vec<f64>,
    pub landmarks: Vec<SidecarLandmark>,
    pub layout_hash: String,
    pub seed: u64,
    pub variation: f64,
    pub size: Vec<usize>,
}

/// Files making up a persisted phantom `<dir>/<stem>.*`.
pub struct PhantomPaths {
    pub image: PathBuf,
    pub coords: PathBuf,
    pub mask: PathBuf,
    pub sidecar: PathBuf,
}

impl PhantomPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        PhantomPaths {
            image: dir.join(format!("{stem}.image.pet")),
            coords: dir.join(format!("{stem}.coords.pet")),
            mask: dir.join(format!("{stem}.mask.pet")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }

    /// Accepts either the sidecar path or the `<dir>/<stem>` prefix.
    pub fn from_any(path: &Path) -> Self {
        let s = path.to_string_lossy();
        let stem_path = s.strip_suffix(".json").unwrap_or(&s).to_string();
        let p = Path::new(&stem_path);
        let dir = p.parent().unwrap_or(Path::new("."));
        let stem = p
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(dir, &stem)
    }
}

impl Phantom {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let e = self.extent();
        let paths = PhantomPaths::new(dir, stem);
        let sizes = e.sizes();
        tensor_file::save(
            &paths.image,
            &[TensorRecord::f32(sizes.clone(), self.image.data().to_vec())],
        )?;
        let mut cshape = vec![e.rank];
        cshape.extend(&sizes);
        let cdata: Vec<f32> = self
            .coord_field
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect();
        tensor_file::save(&paths.coords, &[TensorRecord::f32(cshape, cdata)])?;
        tensor_file::save(
            &paths.mask,
            &[TensorRecord::u8(
                sizes.clone(),
                self.body_mask.data().iter().map(|&b| b as u8).collect(),
            )],
        )?;
        let sidecar = Sidecar {
            spacing: e.project(&self.spacing),
            landmarks: self
                .landmarks
                .iter()
                .map(|l| SidecarLandmark {
                    name: l.name.clone(),
                    position: e.project(&l.position),
                })
                .collect(),
            layout_hash: self.layout_hash.clone(),
            seed: self.seed,
            variation: self.variation,
            size: sizes,
        };
        tensor_file::write_atomic(&paths.sidecar, &serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let paths = PhantomPaths::from_any(path);
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(&paths.sidecar)?)?;
        let extent = Extent::from_sizes(&sidecar.size)?;
        let single = |p: &Path| -> Result<TensorRecord> {
            let mut recs = tensor_file::load(p)?;
            if recs.len() != 1 {
                return Err(Error::format(p, "expected exactly one tensor record"));
            }
            Ok(recs.remove(0))
        };
        let img = single(&paths.image)?;
        if img.shape != sidecar.size {
            return Err(Error::format(
                &paths.image,
                "image shape disagrees with sidecar",
            ));
        }
        let image = Grid::from_vec(
            extent,
            img.into_f32()
                .ok_or_else(|| Error::format(&paths.image, "image must be f32"))?,
        )?;
        let coords = single(&paths.coords)?
            .into_f32()
            .ok_or_else(|| Error::format(&paths.coords, "coords must be f32"))?;
        let n = extent.len();
        if coords.len() != n * extent.rank {
            return Err(Error::format(
                &paths.coords,
                "coordinate field has wrong size",
            ));
        }
        let coord_field = coords
            .chunks(n)
            .map(|c| Grid::from_vec(extent, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let mask = single(&paths.mask)?
            .into_u8()
            .ok_or_else(|| Error::format(&paths.mask, "mask must be u8"))?;
        let body_mask = Grid::from_vec(extent, mask.into_iter().map(|b| b != 0).collect())?;
        let landmarks = sidecar
            .landmarks
            .iter()
            .map(|l| {
                Ok(Landmark {
                    name: l.name.clone(),
                    position: extent.lift(&l.position)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Phantom {
            seed: sidecar.seed,
            variation: sidecar.variation,
            spacing: {
                let mut s = [1.0; 3];
                s[3 - extent.rank..].copy_from_slice(&sidecar.spacing);
                s
            },
            image,
            coord_field,
            body_mask,
            landmarks,
            layout_hash: sidecar.layout_hash,
        })
    }
}

/// Loads every phantom sidecar (`*.json`) in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, Phantom)>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json") && p.with_extension("image.pet").exists()
        })
        .collect();
    stems.sort();
    stems
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, Phantom::load(&p)?))
        })
        .collect()
}
