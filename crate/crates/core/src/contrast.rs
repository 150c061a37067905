//! Positive sampling, negative selection and the InfoNCE loss.
//!
//! Fields of a batch are addressed by position: image `i` contributes view A
//! at field `2i` and view B at field `2i + 1`, both for the global and for
//! the local level.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{PatchPair, SpatialTransform};
use crate::autodiff::kernels::resample_linear_forward;
use crate::autodiff::{CustomOp, Tensor};
use crate::error::{Error, Result};
use crate::grid::{Grid, Point};
use crate::net::EmbeddingField;

/// Largest tolerated deviation of an input vector norm from 1.
pub const NORM_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    A,
    B,
}

impl View {
    pub fn field(self, image: usize) -> usize {
        2 * image + usize::from(self == View::B)
    }

    pub fn other(self) -> View {
        match self {
            View::A => View::B,
            View::B => View::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Positive {
    /// `a` in view A and `b` in view B see the same source point.
    Pair { a: Point, b: Point },
    /// Non-overlapping pair: the pixel is its own positive.
    SelfPositive { view: View, p: Point },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositivePairs {
    pub items: Vec<Positive>,
}

impl PositivePairs {
    pub fn self_positive(&self) -> bool {
        self.items
            .iter()
            .all(|p| matches!(p, Positive::SelfPositive { .. }))
    }
}

fn body_pixels(mask: &Grid<bool>) -> Vec<usize> {
    let all: Vec<usize> = (0..mask.data().len()).filter(|&i| mask.data()[i]).collect();
    if all.is_empty() {
        // patch entirely off the body: fall back to every pixel
        (0..mask.data().len()).collect()
    } else {
        all
    }
}

fn draw(pool_len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool_len >= n {
        index::sample(rng, pool_len, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..pool_len)).collect()
    }
}

fn pixel(e: crate::grid::Extent, i: usize) -> Point {
    let c = e.coords(i);
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

/// Draws `n_pos` positives uniformly from overlap ∩ body, or self-positives
/// from each view when there is no such pixel.
pub fn sample_positives(
    pair: &PatchPair,
    n_pos: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PositivePairs> {
    if n_pos == 0 {
        return Err(Error::config("n_pos must be at least 1"));
    }
    let ea = pair.transform_a.output_extent();
    let mut pool = vec![];
    for i in 0..ea.len() {
        if !(pair.overlap_mask_a.data()[i] && pair.body_mask_a.data()[i]) {
            continue;
        }
        let p = pixel(ea, i);
        let Some(q) = pair.correspondence(&p) else {
            continue;
        };
        if pair.body_mask_b.sample_nearest(&q) == Some(true) {
            pool.push((p, q));
        }
    }
    let items = if pool.is_empty() {
        let mut items = vec![];
        for (view, mask) in [(View::A, &pair.body_mask_a), (View::B, &pair.body_mask_b)] {
            let px = body_pixels(mask);
            for k in draw(px.len(), n_pos, rng) {
                items.push(Positive::SelfPositive {
                    view,
                    p: pixel(mask.extent(), px[k]),
                });
            }
        }
        items
    } else {
        draw(pool.len(), n_pos, rng)
            .into_iter()
            .map(|k| Positive::Pair {
                a: pool[k].0,
                b: pool[k].1,
            })
            .collect()
    };
    Ok(PositivePairs { items })
}

/// Reference to one cell of one batch field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellRef {
    pub field: usize,
    pub cell: usize,
}

/// Source-image position of every cell of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGeom {
    pub image: usize,
    pub sources: Vec<Point>,
}

impl FieldGeom {
    pub fn new(field: &EmbeddingField, transform: &SpatialTransform, image: usize) -> Self {
        let sources = (0..field.cells())
            .map(|c| transform.forward(&field.cell_center(c)))
            .collect();
        FieldGeom { image, sources }
    }
}

/// Per-axis exclusion radius in pixels: `δ / spacing`, rounded up.
pub fn delta_pixels(delta_mm: f64, spacing: &Point) -> [f64; 3] {
    spacing.map(|s| (delta_mm / s).ceil())
}

/// Cells a negative may not come from: the positive pair's own cells and
/// anything within δ of either positive in the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub image: usize,
    pub points: Vec<Point>,
    pub radius: [f64; 3],
    pub own: Vec<CellRef>,
}

impl Exclusion {
    pub fn allows(&self, r: CellRef, geoms: &[FieldGeom]) -> bool {
        if self.own.contains(&r) {
            return false;
        }
        let g = &geoms[r.field];
        if g.image != self.image || self.radius.iter().all(|&r| r <= 0.0) {
            return true;
        }
        let s = &g.sources[r.cell];
        self.points.iter().all(|p| {
            let d: f64 = (0..3)
                .filter(|&a| self.radius[a] > 0.0)
                .map(|a| ((s[a] - p[a]) / self.radius[a]).powi(2))
                .sum();
            d > 1.0
        })
    }
}

/// Descending score, then ascending reference: a total order so top-k is
/// reproducible under ties.
fn by_score(a: &(CellRef, f32), b: &(CellRef, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` best eligible cells of `scored`, best first.
pub fn top_k(mut scored: Vec<(CellRef, f32)>, k: usize) -> Vec<(CellRef, f32)> {
    if k == 0 || scored.is_empty() {
        return vec![];
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_score);
        scored.truncate(k);
    }
    scored.sort_by(by_score);
    scored
}

fn warn_short(kind: &str, got: usize, want: usize) {
    if got < want {
        log::warn!("{kind}: only {got} eligible negatives, wanted {want}");
    }
}

/// Hard global negatives: top-`n_neg` similarities over `fields` (the two
/// views of the anchor's image) among allowed cells.
pub fn global_hard_negatives(
    anchor: &[f32],
    fields: &[(usize, &EmbeddingField)],
    geoms: &[FieldGeom],
    excl: &Exclusion,
    n_neg: usize,
) -> Result<Vec<CellRef>> {
    let mut scored = vec![];
    for &(fid, f) in fields {
        for (cell, s) in f.similarity(anchor)?.into_iter().enumerate() {
            let r = CellRef { field: fid, cell };
            if excl.allows(r, geoms) {
                scored.push((r, s));
            }
        }
    }
    if scored.is_empty() {
        return Err(Error::NoEligibleNegatives);
    }
    warn_short("global hard", scored.len(), n_neg);
    Ok(top_k(scored, n_neg).into_iter().map(|(r, _)| r).collect())
}

/// Diverse global negatives: `n` cells drawn uniformly from every field of
/// the batch, rejecting excluded cells.
pub fn global_diverse_negatives(
    cells_per_field: &[usize],
    geoms: &[FieldGeom],
    excl: &Exclusion,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CellRef>> {
    let total: usize = cells_per_field.iter().sum();
    if total == 0 {
        return Err(Error::NoEligibleNegatives);
    }
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 50 * n.max(1) {
        attempts += 1;
        let mut k = rng.gen_range(0..total);
        let mut field = 0;
        while k >= cells_per_field[field] {
            k -= cells_per_field[field];
            field += 1;
        }
        let r = CellRef { field, cell: k };
        if excl.allows(r, geoms) {
            out.push(r);
        }
    }
    if out.is_empty() && n > 0 {
        return Err(Error::NoEligibleNegatives);
    }
    warn_short("global diverse", out.len(), n);
    Ok(out)
}

/// Linearly upsamples a global similarity map onto the local grid.
pub fn upsample_to(map: &[f32], from: &EmbeddingField, to: &EmbeddingField) -> Result<Vec<f32>> {
    let mut ratio = [1usize; 3];
    for a in 0..3 {
        if from.stride[a] % to.stride[a] != 0 {
            return Err(Error::shape(
                "global stride is not a multiple of the local stride",
            ));
        }
        ratio[a] = from.stride[a] / to.stride[a];
    }
    Ok(resample_linear_forward(
        map,
        1,
        from.extent.dims,
        to.extent.dims,
        ratio,
    ))
}

/// Local negatives from precomputed score maps (`S_g↑ + S_l`, or `S_l`
/// alone): the top `n_cand` allowed cells, then `n_neg` of them drawn
/// without replacement. With `n_cand == n_neg` the candidates are returned.
pub fn local_negatives(
    maps: &[(usize, Vec<f32>)],
    geoms: &[FieldGeom],
    excl: &Exclusion,
    n_cand: usize,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CellRef>> {
    let mut scored = vec![];
    for (fid, map) in maps {
        for (cell, &s) in map.iter().enumerate() {
            let r = CellRef { field: *fid, cell };
            if excl.allows(r, geoms) {
                scored.push((r, s));
            }
        }
    }
    if scored.is_empty() {
        return Err(Error::NoEligibleNegatives);
    }
    let cand = top_k(scored, n_cand.max(n_neg));
    warn_short("local candidates", cand.len(), n_cand);
    if cand.len() <= n_neg {
        return Ok(cand.into_iter().map(|(r, _)| r).collect());
    }
    Ok(index::sample(rng, cand.len(), n_neg)
        .into_iter()
        .map(|k| cand[k].0)
        .collect())
}

/// Uniform draw of `n` allowed cells from `fields` without regard to
/// similarity.
pub fn random_negatives(
    fields: &[(usize, usize)],
    geoms: &[FieldGeom],
    excl: &Exclusion,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CellRef>> {
    let pool: Vec<CellRef> = fields
        .iter()
        .flat_map(|&(field, cells)| (0..cells).map(move |cell| CellRef { field, cell }))
        .filter(|&r| excl.allows(r, geoms))
        .collect();
    if pool.is_empty() {
        return Err(Error::NoEligibleNegatives);
    }
    warn_short("local random", pool.len(), n);
    Ok(draw(pool.len(), n.min(pool.len()), rng)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

fn check_unit(v: &[f32]) -> Result<()> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if (n - 1.0).abs() > NORM_TOL {
        return Err(Error::NotNormalized {
            norm: n,
            tol: NORM_TOL,
        });
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// `log Σ exp(z)` with max subtraction.
fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// One InfoNCE term: `−log[e^{f·f'/τ} / (e^{f·f'/τ} + Σ_j e^{f·h_j/τ})]`.
/// `positive = None` uses `f·f = 1` as the positive logit.
pub fn info_nce(
    f: &[f32],
    positive: Option<&[f32]>,
    negatives: &[&[f32]],
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    check_unit(f)?;
    let sp = match positive {
        Some(p) => {
            check_unit(p)?;
            dot(f, p)
        }
        None => 1.0,
    };
    let mut z = Vec::with_capacity(negatives.len() + 1);
    z.push(sp / tau);
    for h in negatives {
        check_unit(h)?;
        z.push(dot(f, h) / tau);
    }
    Ok(log_sum_exp(&z) - z[0])
}

/// An anchor, its positive (`None` for self-positives) and its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub anchor: CellRef,
    pub positive: Option<CellRef>,
    pub negatives: Vec<CellRef>,
}

/// Mean InfoNCE over `terms` and its gradient with respect to every field's
/// values.
pub fn loss_and_grads(
    fields: &[&EmbeddingField],
    terms: &[Term],
    tau: f64,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut grads: Vec<Vec<f64>> = fields.iter().map(|f| vec![0.0; f.values.len()]).collect();
    if terms.is_empty() {
        return Ok((
            0.0,
            grads
                .into_iter()
                .map(|g| g.into_iter().map(|v| v as f32).collect())
                .collect(),
        ));
    }
    let vec_of = |r: CellRef| fields[r.field].vector(r.cell);
    let w = 1.0 / terms.len() as f64;
    let mut total = 0.0;
    for t in terms {
        let f = vec_of(t.anchor);
        check_unit(&f)?;
        let pos = t.positive.map(vec_of);
        let negs: Vec<Vec<f32>> = t.negatives.iter().map(|&r| vec_of(r)).collect();
        let mut z = Vec::with_capacity(negs.len() + 1);
        z.push(match &pos {
            Some(p) => dot(&f, p) / tau,
            None => 1.0 / tau,
        });
        for h in &negs {
            z.push(dot(&f, h) / tau);
        }
        let lse = log_sum_exp(&z);
        total += w * (lse - z[0]);
        // dL/dz_k = softmax_k − [k = positive]
        let soft: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let mut add = |r: CellRef, coef: f64, other: &[f32]| {
            let f = fields[r.field];
            let n = f.cells();
            let g = &mut grads[r.field];
            for (c, &o) in other.iter().enumerate() {
                g[c * n + r.cell] += coef * o as f64;
            }
        };
        let mut gf = vec![0.0f64; f.len()];
        if let (Some(p), Some(pr)) = (&pos, t.positive) {
            let c = w * (soft[0] - 1.0) / tau;
            for (g, &v) in gf.iter_mut().zip(p.iter()) {
                *g += c * v as f64;
            }
            add(pr, c, &f);
        }
        for (j, (h, &hr)) in negs.iter().zip(&t.negatives).enumerate() {
            let c = w * soft[j + 1] / tau;
            for (g, &v) in gf.iter_mut().zip(h.iter()) {
                *g += c * v as f64;
            }
            add(hr, c, &f);
        }
        let n = fields[t.anchor.field].cells();
        let g = &mut grads[t.anchor.field];
        for (c, v) in gf.into_iter().enumerate() {
            g[c * n + t.anchor.cell] += v;
        }
    }
    let grads = grads
        .into_iter()
        .map(|g| g.into_iter().map(|v| v as f32).collect())
        .collect();
    Ok((total, grads))
}

/// Graph node for a precomputed loss: backward scales the stored field
/// gradients by the incoming gradient.
pub struct FusedLoss {
    grads: Vec<Vec<f32>>,
}

impl FusedLoss {
    pub fn new(grads: Vec<Vec<f32>>) -> Self {
        FusedLoss { grads }
    }
}

impl CustomOp for FusedLoss {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Vec<f32>>> {
        let k = grad_out.item();
        self.grads
            .iter()
            .map(|g| Some(g.iter().map(|v| v * k).collect()))
            .collect()
    }
}

/// Sampling counts and switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_rand_g: usize,
    pub n_cand_l: usize,
    pub tau: f64,
    pub delta_mm: f64,
    pub coarse_to_fine: bool,
    pub global_hard: bool,
    pub global_diverse: bool,
    pub local_hard: bool,
    pub local_diverse: bool,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pos == 0 || self.n_neg == 0 || self.n_cand_l == 0 {
            return Err(Error::config(
                "n_pos, n_neg and n_cand_l must be at least 1",
            ));
        }
        if self.global_diverse && self.n_rand_g == 0 {
            return Err(Error::config(
                "n_rand_g must be at least 1 when diverse negatives are on",
            ));
        }
        if self.n_cand_l < self.n_neg {
            return Err(Error::config("n_cand_l must not be smaller than n_neg"));
        }
        if self.coarse_to_fine && !self.global_hard && !self.global_diverse {
            return Err(Error::config("global loss needs hard or diverse negatives"));
        }
        if !(self.tau > 0.0) || !(self.delta_mm >= 0.0) {
            return Err(Error::config(
                "tau must be positive and delta_mm non-negative",
            ));
        }
        Ok(())
    }
}

/// One image's view of the batch for term construction.
pub struct BatchFields<'a> {
    pub global: &'a [EmbeddingField],
    pub local: &'a [EmbeddingField],
    pub geom_global: &'a [FieldGeom],
    pub geom_local: &'a [FieldGeom],
    pub spacing: &'a [Point],
}

struct AnchorSite {
    view: View,
    pixel: Point,
    partner: Option<Point>,
}

fn sites(pos: &PositivePairs) -> Vec<AnchorSite> {
    let mut out = vec![];
    for p in &pos.items {
        match *p {
            Positive::Pair { a, b } => {
                out.push(AnchorSite {
                    view: View::A,
                    pixel: a,
                    partner: Some(b),
                });
                out.push(AnchorSite {
                    view: View::B,
                    pixel: b,
                    partner: Some(a),
                });
            }
            Positive::SelfPositive { view, p } => out.push(AnchorSite {
                view,
                pixel: p,
                partner: None,
            }),
        }
    }
    out
}

fn cell(field: &EmbeddingField, fid: usize, p: &Point) -> Result<CellRef> {
    let cell = field
        .cell_of(p)
        .ok_or_else(|| Error::shape(format!("pixel {p:?} outside its embedding field")))?;
    Ok(CellRef { field: fid, cell })
}

/// Builds the global and local loss terms for image `image` of a batch.
/// Both directions of every positive pair become anchors, each with its own
/// negatives.
pub fn build_terms(
    batch: &BatchFields,
    image: usize,
    pair: &PatchPair,
    pos: &PositivePairs,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Term>, Vec<Term>)> {
    let radius = delta_pixels(cfg.delta_mm, &batch.spacing[image]);
    let transform = |v: View| match v {
        View::A => &pair.transform_a,
        View::B => &pair.transform_b,
    };
    let (fa, fb) = (View::A.field(image), View::B.field(image));
    let global_cells: Vec<usize> = batch.global.iter().map(EmbeddingField::cells).collect();
    let mut gterms = vec![];
    let mut lterms = vec![];
    for s in sites(pos) {
        let fid = s.view.field(image);
        let oid = s.view.other().field(image);
        let mut points = vec![transform(s.view).forward(&s.pixel)];
        if let Some(q) = s.partner {
            points.push(transform(s.view.other()).forward(&q));
        }
        let exclusion = |fields: &[EmbeddingField]| -> Result<Exclusion> {
            let mut own = vec![cell(&fields[fid], fid, &s.pixel)?];
            if let Some(q) = s.partner {
                own.push(cell(&fields[oid], oid, &q)?);
            }
            Ok(Exclusion {
                image,
                points: points.clone(),
                radius,
                own,
            })
        };

        let eg = exclusion(batch.global)?;
        let el = exclusion(batch.local)?;
        let ag = eg.own[0];
        let al = el.own[0];
        let fg = batch.global[fid].vector(ag.cell);
        let fl = batch.local[fid].vector(al.cell);

        if cfg.coarse_to_fine {
            let mut negatives = vec![];
            if cfg.global_hard {
                let views = [(fa, &batch.global[fa]), (fb, &batch.global[fb])];
                negatives.extend(global_hard_negatives(
                    &fg,
                    &views,
                    batch.geom_global,
                    &eg,
                    cfg.n_neg,
                )?);
            }
            if cfg.global_diverse {
                negatives.extend(global_diverse_negatives(
                    &global_cells,
                    batch.geom_global,
                    &eg,
                    cfg.n_rand_g,
                    rng,
                )?);
            }
            gterms.push(Term {
                anchor: ag,
                positive: eg.own.get(1).copied(),
                negatives,
            });
        }

        let negatives = if cfg.local_hard {
            let mut maps = vec![];
            for id in [fa, fb] {
                let mut m = batch.local[id].similarity(&fl)?;
                if cfg.coarse_to_fine {
                    let sg = batch.global[id].similarity(&fg)?;
                    let up = upsample_to(&sg, &batch.global[id], &batch.local[id])?;
                    for (v, u) in m.iter_mut().zip(up) {
                        *v += u;
                    }
                }
                maps.push((id, m));
            }
            let n_cand = if cfg.local_diverse {
                cfg.n_cand_l
            } else {
                cfg.n_neg
            };
            local_negatives(&maps, batch.geom_local, &el, n_cand, cfg.n_neg, rng)?
        } else {
            let fields = [(fa, batch.local[fa].cells()), (fb, batch.local[fb].cells())];
            random_negatives(&fields, batch.geom_local, &el, cfg.n_neg, rng)?
        };
        lterms.push(Term {
            anchor: al,
            positive: el.own.get(1).copied(),
            negatives,
        });
    }
    Ok((gterms, lterms))
}
