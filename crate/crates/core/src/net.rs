//! Coarse-to-fine encoder.
//!
//! Four conv stages (two 3×3 convs with relu each) form a pyramid
//! `L0..L3`. `L1` sits at the local stride and `L3` at the global stride.
//! A feature pyramid fuses `L2` into `L1` top-down; `L3` only feeds the
//! global head, so nothing flows from the coarsest level into the finer
//! ones. Each head is a 3×3 conv followed by channel L2 normalization.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Extent, Grid, Point};
use crate::rng::stream;
use crate::tensor_file::TensorRecord;
use rand::Rng;

pub const NORM_EPS: f32 = 1e-8;
const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub stage_channels: Vec<usize>,
    /// Width of the pyramid laterals.
    pub fpn_channels: usize,
    pub global_stride: Vec<usize>,
    pub local_stride: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk_2d()
    }
}

impl EncoderConfig {
    pub fn desk_2d() -> Self {
        EncoderConfig {
            dim: 2,
            stage_channels: vec![8, 16, 32, 64],
            fpn_channels: 32,
            global_stride: vec![8, 8],
            local_stride: vec![2, 2],
            embed_dim: 32,
        }
    }

    pub fn desk_3d() -> Self {
        EncoderConfig {
            dim: 3,
            stage_channels: vec![8, 16, 32, 64],
            fpn_channels: 32,
            global_stride: vec![4, 8, 8],
            local_stride: vec![2, 2, 2],
            embed_dim: 32,
        }
    }

    /// Full-width 2D encoder with the published stride and embedding size.
    pub fn paper_2d() -> Self {
        EncoderConfig {
            dim: 2,
            stage_channels: vec![16, 32, 64, 128],
            fpn_channels: 128,
            global_stride: vec![16, 16],
            local_stride: vec![2, 2],
            embed_dim: 128,
        }
    }

    pub fn paper_3d() -> Self {
        EncoderConfig {
            dim: 3,
            stage_channels: vec![16, 32, 64, 128],
            fpn_channels: 128,
            global_stride: vec![4, 16, 16],
            local_stride: vec![2, 2, 2],
            embed_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    /// Derives the per-level strides. Fails when the strides cannot be
    /// realised by the pyramid.
    pub fn plan(&self) -> Result<Plan> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::config(format!(
                "encoder.dim must be 2 or 3, got {}",
                self.dim
            )));
        }
        if self.stage_channels.len() != LEVELS || self.stage_channels.contains(&0) {
            return Err(Error::config(
                "encoder.stage_channels needs 4 positive entries",
            ));
        }
        if self.fpn_channels == 0 || self.embed_dim == 0 {
            return Err(Error::config(
                "encoder.fpn_channels and encoder.embed_dim must be positive",
            ));
        }
        if self.global_stride.len() != self.dim || self.local_stride.len() != self.dim {
            return Err(Error::config("encoder strides need one entry per axis"));
        }
        let off = 3 - self.dim;
        let mut steps = [[1usize; 3]; LEVELS];
        for a in 0..self.dim {
            let (g, l) = (self.global_stride[a], self.local_stride[a]);
            if l == 0 || g == 0 || g % l != 0 {
                return Err(Error::config(format!(
                    "encoder.global_stride {g} is not a multiple of local_stride {l} on axis {a}"
                )));
            }
            let r = g / l;
            // split r = lo·hi with lo the largest divisor not above √r
            let lo = (1..=r)
                .filter(|d| r % d == 0 && d * d <= r)
                .max()
                .unwrap_or(1);
            steps[1][off + a] = l;
            steps[2][off + a] = lo;
            steps[3][off + a] = r / lo;
        }
        let mut strides = [[1usize; 3]; LEVELS];
        for lv in 1..LEVELS {
            for a in 0..3 {
                strides[lv][a] = strides[lv - 1][a] * steps[lv][a];
            }
        }
        Ok(Plan {
            rank: self.dim,
            steps,
            strides,
        })
    }

    /// Checks that a patch extent is compatible with the strides.
    pub fn check_extent(&self, sizes: &[usize]) -> Result<()> {
        if sizes.len() != self.dim {
            return Err(Error::config(format!(
                "input has {} axes, encoder expects {}",
                sizes.len(),
                self.dim
            )));
        }
        for (a, (&s, &g)) in sizes.iter().zip(&self.global_stride).enumerate() {
            if s == 0 || s % g != 0 {
                return Err(Error::config(format!(
                    "extent {s} on axis {a} is not divisible by global stride {g}"
                )));
            }
        }
        Ok(())
    }

    /// Upper bound, per axis `[z, y, x]`, on how far in pixels an input
    /// change can travel to influence an output cell (cell width included).
    pub fn receptive_radius(&self) -> Result<[usize; 3]> {
        let plan = self.plan()?;
        let mut out = [0; 3];
        for a in 0..3 {
            if !plan.active(a) {
                continue;
            }
            let s = |lv: usize| plan.strides[lv][a];
            let mut r = [0usize; LEVELS];
            for lv in 0..LEVELS {
                let (prev, base) = if lv == 0 {
                    (1, 0)
                } else {
                    (s(lv - 1), r[lv - 1])
                };
                r[lv] = base + plan.kernel(lv)[a] / 2 * prev + s(lv);
            }
            let global = r[3] + 2 * s(3);
            let local = r[1].max(r[2] + s(2)) + 2 * s(1);
            out[a] = global.max(local);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub rank: usize,
    /// Stride of the first conv of each stage, `[z, y, x]`.
    pub steps: [[usize; 3]; LEVELS],
    /// Cumulative stride of each level.
    pub strides: [[usize; 3]; LEVELS],
}

impl Plan {
    fn active(&self, axis: usize) -> bool {
        axis >= 3 - self.rank
    }

    /// Kernel of the first conv of stage `lv`: 3, widened for steps above 2
    /// so that every input pixel is covered.
    fn kernel(&self, lv: usize) -> [usize; 3] {
        let mut k = [1; 3];
        for (a, kk) in k.iter_mut().enumerate() {
            if self.active(a) {
                *kk = 3.max(2 * self.steps[lv][a] - 1);
            }
        }
        k
    }

    pub fn local_stride(&self) -> [usize; 3] {
        self.strides[1]
    }

    pub fn global_stride(&self) -> [usize; 3] {
        self.strides[3]
    }
}

/// Model parameters in a fixed, named order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
}

fn layout(cfg: &EncoderConfig) -> Result<Vec<Slot>> {
    let plan = cfg.plan()?;
    let rank = cfg.dim;
    let off = 3 - rank;
    let mut slots = vec![];
    let mut conv = |name: String, out: usize, inp: usize, k: [usize; 3]| {
        let mut shape = vec![out, inp];
        shape.extend_from_slice(&k[off..]);
        let fan_in = inp * k.iter().product::<usize>();
        slots.push(Slot {
            name: format!("{name}.weight"),
            shape,
            fan_in,
            bias: false,
        });
        slots.push(Slot {
            name: format!("{name}.bias"),
            shape: vec![out],
            fan_in,
            bias: true,
        });
    };
    let k3 = {
        let mut k = [1; 3];
        k[off..].fill(3);
        k
    };
    let k1 = [1; 3];
    let ch = &cfg.stage_channels;
    for lv in 0..LEVELS {
        let inp = if lv == 0 { 1 } else { ch[lv - 1] };
        conv(format!("stage{lv}.conv0"), ch[lv], inp, plan.kernel(lv));
        conv(format!("stage{lv}.conv1"), ch[lv], ch[lv], k3);
    }
    for lv in 1..LEVELS {
        conv(format!("lateral{lv}"), cfg.fpn_channels, ch[lv], k1);
    }
    conv("head_global".into(), cfg.embed_dim, cfg.fpn_channels, k3);
    conv("head_local".into(), cfg.embed_dim, cfg.fpn_channels, k3);
    Ok(slots)
}

/// Fan-in scaled uniform initialisation (He bound `√(6/fan_in)`), zero
/// biases. Each tensor draws from its own stream.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<Params> {
    let slots = layout(cfg)?;
    let mut names = vec![];
    let mut tensors = vec![];
    for (i, s) in slots.into_iter().enumerate() {
        let n: usize = s.shape.iter().product();
        let data = if s.bias {
            vec![0.0; n]
        } else {
            let bound = (6.0 / s.fan_in as f64).sqrt();
            let mut rng = stream(seed, "init", i as u64);
            (0..n)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect()
        };
        names.push(s.name);
        tensors.push(Tensor::new(s.shape, data)?);
    }
    Ok(Params { names, tensors })
}

impl Params {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .map(|t| TensorRecord::f32(t.shape().to_vec(), t.data().to_vec()))
            .collect()
    }

    /// Rebuilds parameters for `cfg` from records in layout order.
    pub fn from_records(cfg: &EncoderConfig, records: Vec<TensorRecord>) -> Result<Params> {
        let slots = layout(cfg)?;
        if slots.len() != records.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, encoder needs {}",
                records.len(),
                slots.len()
            )));
        }
        let mut names = vec![];
        let mut tensors = vec![];
        for (s, r) in slots.into_iter().zip(records) {
            if r.shape != s.shape {
                return Err(Error::shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    s.name, r.shape, s.shape
                )));
            }
            let data = r
                .into_f32()
                .ok_or_else(|| Error::shape(format!("{} is not f32", s.name)))?;
            names.push(s.name);
            tensors.push(Tensor::new(s.shape, data)?);
        }
        Ok(Params { names, tensors })
    }
}

/// Per-pixel unit embeddings at a fixed stride.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingField {
    /// `[C, D, H, W]` channel-major values.
    pub values: Vec<f32>,
    pub dim: usize,
    /// Spatial cell extent.
    pub extent: Extent,
    pub stride: [usize; 3],
    /// Pixel coordinate of the first pixel covered by cell 0.
    pub origin: Point,
}

impl EmbeddingField {
    pub fn from_tensor(t: &Tensor, rank: usize, stride: [usize; 3], origin: Point) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != rank + 1 {
            return Err(Error::shape(format!(
                "field tensor {shape:?} for rank {rank}"
            )));
        }
        let extent = Extent::from_sizes(&shape[1..])?;
        Ok(EmbeddingField {
            values: t.data().to_vec(),
            dim: shape[0],
            extent,
            stride,
            origin,
        })
    }

    pub fn cells(&self) -> usize {
        self.extent.len()
    }

    pub fn vector(&self, cell: usize) -> Vec<f32> {
        let n = self.cells();
        (0..self.dim).map(|c| self.values[c * n + cell]).collect()
    }

    /// Cell containing pixel `p` (frame of the field's image).
    pub fn cell_of(&self, p: &Point) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let c = ((p[a] - self.origin[a] + 0.5) / self.stride[a] as f64).floor();
            if c < 0.0 || c >= self.extent.dims[a] as f64 {
                return None;
            }
            idx[a] = c as usize;
        }
        Some(self.extent.index(idx[0], idx[1], idx[2]))
    }

    /// Pixel coordinate of a cell's center.
    pub fn cell_center(&self, cell: usize) -> Point {
        let c = self.extent.coords(cell);
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.origin[a] + (c[a] as f64 + 0.5) * self.stride[a] as f64 - 0.5;
        }
        p
    }

    /// Linear interpolation between cell centers at pixel `p`, clamped at the
    /// border; the same weights the similarity upsampling uses.
    pub fn interpolate(&self, p: &Point) -> Vec<f32> {
        let mut axes = [(0usize, 0usize, 0.0f32); 3];
        for a in 0..3 {
            let n = self.extent.dims[a];
            let src = ((p[a] - self.origin[a] + 0.5) / self.stride[a] as f64 - 0.5)
                .clamp(0.0, (n - 1) as f64);
            let lo = (src.floor() as usize).min(n - 1);
            axes[a] = (lo, (lo + 1).min(n - 1), (src - lo as f64) as f32);
        }
        let n = self.cells();
        let mut out = vec![0.0f32; self.dim];
        for corner in 0..8 {
            let mut w = 1.0f32;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let (lo, hi, t) = axes[a];
                if corner >> a & 1 == 1 {
                    idx[a] = hi;
                    w *= t;
                } else {
                    idx[a] = lo;
                    w *= 1.0 - t;
                }
            }
            if w == 0.0 {
                continue;
            }
            let cell = self.extent.index(idx[0], idx[1], idx[2]);
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.values[c * n + cell];
            }
        }
        out
    }

    /// Inner product of `anchor` with every cell, accumulated channel by
    /// channel in a fixed order.
    pub fn similarity(&self, anchor: &[f32]) -> Result<Vec<f32>> {
        if anchor.len() != self.dim {
            return Err(Error::shape(format!(
                "anchor has {} channels, field has {}",
                anchor.len(),
                self.dim
            )));
        }
        let n = self.cells();
        let mut out = vec![0.0f32; n];
        for (c, &f) in anchor.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&self.values[c * n..(c + 1) * n]) {
                *o += f * v;
            }
        }
        Ok(out)
    }

    pub fn max_norm_deviation(&self) -> f32 {
        let n = self.cells();
        (0..n)
            .map(|i| {
                let s: f32 = (0..self.dim).map(|c| self.values[c * n + i].powi(2)).sum();
                (s.sqrt() - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }
}

/// Graph handles for the two heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub global: Var,
    pub local: Var,
}

/// Records the encoder on `g`. `params` are the graph handles of the
/// tensors in [`Params`] order; `input` is a `[1, spatial]` map.
pub fn record(cfg: &EncoderConfig, g: &mut Graph, params: &[Var], input: Var) -> Result<HeadVars> {
    let plan = cfg.plan()?;
    let off = 3 - cfg.dim;
    let axes = |v: [usize; 3]| v[off..].to_vec();
    let mut it = params.iter().copied();
    let mut next = || {
        it.next()
            .ok_or_else(|| Error::shape("too few parameter handles"))
    };
    let mut levels = Vec::with_capacity(LEVELS);
    let mut x = input;
    let pad_of = |k: [usize; 3]| axes(k.map(|v| v / 2));
    let k3 = {
        let mut k = [1; 3];
        k[off..].fill(3);
        k
    };
    for lv in 0..LEVELS {
        let (w, b) = (next()?, next()?);
        let k = plan.kernel(lv);
        x = g.conv(x, w, Some(b), &axes(plan.steps[lv]), &pad_of(k))?;
        x = g.relu(x);
        let (w, b) = (next()?, next()?);
        x = g.conv(x, w, Some(b), &axes([1; 3]), &pad_of(k3))?;
        x = g.relu(x);
        levels.push(x);
    }
    let mut laterals = Vec::with_capacity(LEVELS - 1);
    for lv in 1..LEVELS {
        let (w, b) = (next()?, next()?);
        laterals.push(g.conv(levels[lv], w, Some(b), &axes([1; 3]), &axes([0; 3]))?);
    }
    let ratio = |fine: usize, coarse: usize| -> [usize; 3] {
        let mut r = [1; 3];
        for a in 0..3 {
            r[a] = plan.strides[coarse][a] / plan.strides[fine][a];
        }
        r
    };
    // top-down from L2 into L1; L3 is cut off from the finer levels
    let up = g.upsample_nearest(laterals[1], &axes(ratio(1, 2)))?;
    let fused = g.add(laterals[0], up)?;
    let (w, b) = (next()?, next()?);
    let hg = g.conv(laterals[2], w, Some(b), &axes([1; 3]), &pad_of(k3))?;
    let global = g.l2_normalize_channels(hg, NORM_EPS)?;
    let (w, b) = (next()?, next()?);
    let hl = g.conv(fused, w, Some(b), &axes([1; 3]), &pad_of(k3))?;
    let local = g.l2_normalize_channels(hl, NORM_EPS)?;
    if next().is_ok() {
        return Err(Error::shape("too many parameter handles"));
    }
    Ok(HeadVars { global, local })
}

/// Input tensor `[1, spatial]` for a scalar grid.
pub fn input_tensor(patch: &Grid<f32>) -> Tensor {
    let e = patch.extent();
    let mut shape = vec![1];
    shape.extend(e.sizes());
    Tensor::new(shape, patch.data().to_vec()).expect("sized")
}

/// Graph-free forward pass returning `(F_g, F_l)`.
pub fn forward(
    cfg: &EncoderConfig,
    params: &Params,
    patch: &Grid<f32>,
) -> Result<(EmbeddingField, EmbeddingField)> {
    let e = patch.extent();
    if e.rank != cfg.dim {
        return Err(Error::shape(format!(
            "patch rank {} for a {}D encoder",
            e.rank, cfg.dim
        )));
    }
    cfg.check_extent(&e.sizes())?;
    let plan = cfg.plan()?;
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let x = g.constant(input_tensor(patch));
    let h = record(cfg, &mut g, &vars, x)?;
    Ok((
        EmbeddingField::from_tensor(g.value(h.global), cfg.dim, plan.global_stride(), [0.0; 3])?,
        EmbeddingField::from_tensor(g.value(h.local), cfg.dim, plan.local_stride(), [0.0; 3])?,
    ))
}
