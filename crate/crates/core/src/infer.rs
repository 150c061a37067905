//! Whole-image embedding, template anchors and similarity-field matching.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::resample_linear_forward;
use crate::error::{Error, Result};
use crate::grid::{Extent, Grid, Point};
use crate::net::{forward, EmbeddingField, EncoderConfig, Params};

pub const DEFAULT_THRESHOLD: f64 = 1.0;
/// Tile margin in local-stride cells (at least).
pub const OVERLAP_CELLS: usize = 16;

/// Tile core extent per axis; rounded up to the global stride. Images no
/// larger than one core are embedded in a single pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tiling {
    pub tile: Vec<usize>,
}

impl Tiling {
    pub fn whole() -> Self {
        Tiling { tile: vec![] }
    }

    pub fn uniform(rank: usize, size: usize) -> Self {
        Tiling {
            tile: vec![size; rank],
        }
    }
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling::whole()
    }
}

/// Global and local fields over a whole image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub global: EmbeddingField,
    pub local: EmbeddingField,
    /// Extent of the original (unpadded) image.
    pub image: Extent,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn crop(img: &Grid<f32>, start: [usize; 3], size: [usize; 3]) -> Grid<f32> {
    let e = Extent {
        rank: img.extent().rank,
        dims: size,
    };
    Grid::from_fn(e, |[z, y, x]| {
        let (sz, sy, sx) = (z + start[0], y + start[1], x + start[2]);
        let d = img.extent().dims;
        if sz < d[0] && sy < d[1] && sx < d[2] {
            *img.get(sz, sy, sx)
        } else {
            0.0
        }
    })
}

/// Per-axis tile margin in pixels: the encoder's receptive radius or
/// [`OVERLAP_CELLS`] local cells, whichever is larger, on the global grid.
pub fn tile_margin(cfg: &EncoderConfig) -> Result<[usize; 3]> {
    let plan = cfg.plan()?;
    let rf = cfg.receptive_radius()?;
    let off = 3 - cfg.dim;
    let mut m = [0; 3];
    for a in off..3 {
        let g = plan.global_stride()[a];
        m[a] = round_up(rf[a].max(OVERLAP_CELLS * plan.local_stride()[a]), g);
    }
    Ok(m)
}

/// Embeds `image` (zero-padded up to a multiple of the global stride),
/// tile by tile. Tiles start on the global grid and carry a margin beyond
/// the receptive radius, so stitched cells equal an untiled pass.
pub fn embed_image(
    cfg: &EncoderConfig,
    params: &Params,
    image: &Grid<f32>,
    tiling: &Tiling,
) -> Result<ImageEmbedding> {
    let e = image.extent();
    if e.rank != cfg.dim {
        return Err(Error::shape(format!(
            "image rank {} for a {}D encoder",
            e.rank, cfg.dim
        )));
    }
    let plan = cfg.plan()?;
    let (gs, ls) = (plan.global_stride(), plan.local_stride());
    let off = 3 - cfg.dim;
    let mut padded = [1usize; 3];
    for a in off..3 {
        padded[a] = round_up(e.dims[a], gs[a]);
    }
    let mut core = padded;
    if !tiling.tile.is_empty() {
        if tiling.tile.len() != cfg.dim || tiling.tile.contains(&0) {
            return Err(Error::config(
                "tiling.tile needs one positive extent per axis",
            ));
        }
        for a in off..3 {
            core[a] = round_up(tiling.tile[a - off], gs[a]).min(padded[a]);
        }
    }
    if core == padded {
        let (mut g, mut l) = forward(cfg, params, &crop(image, [0; 3], padded))?;
        g.origin = [0.0; 3];
        l.origin = [0.0; 3];
        return Ok(ImageEmbedding {
            global: g,
            local: l,
            image: e,
        });
    }
    let margin = tile_margin(cfg)?;
    let cells = |s: [usize; 3]| Extent {
        rank: cfg.dim,
        dims: [padded[0] / s[0], padded[1] / s[1], padded[2] / s[2]],
    };
    let (ge, le) = (cells(gs), cells(ls));
    let mut gv = vec![0.0f32; cfg.embed_dim * ge.len()];
    let mut lv = vec![0.0f32; cfg.embed_dim * le.len()];
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| (0..padded[a]).step_by(core[a]).collect())
        .collect();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let s = [z, y, x];
                let mut lo = [0; 3];
                let mut hi = [1; 3];
                for a in 0..3 {
                    lo[a] = s[a].saturating_sub(margin[a]);
                    hi[a] = (s[a] + core[a] + margin[a]).min(padded[a]);
                }
                let size = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                let (tg, tl) = forward(cfg, params, &crop(image, lo, size))?;
                for (tf, out, oe, st) in [(&tg, &mut gv, ge, gs), (&tl, &mut lv, le, ls)] {
                    let mut c0 = [0; 3];
                    let mut c1 = [0; 3];
                    let mut t0 = [0; 3];
                    for a in 0..3 {
                        c0[a] = s[a] / st[a];
                        c1[a] = ((s[a] + core[a]).min(padded[a])) / st[a];
                        t0[a] = lo[a] / st[a];
                    }
                    let (n_out, n_tile) = (oe.len(), tf.cells());
                    for cz in c0[0]..c1[0] {
                        for cy in c0[1]..c1[1] {
                            for cx in c0[2]..c1[2] {
                                let oi = oe.index(cz, cy, cx);
                                let ti = tf.extent.index(cz - t0[0], cy - t0[1], cx - t0[2]);
                                for ch in 0..tf.dim {
                                    out[ch * n_out + oi] = tf.values[ch * n_tile + ti];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let field = |values, extent, stride| EmbeddingField {
        values,
        dim: cfg.embed_dim,
        extent,
        stride,
        origin: [0.0; 3],
    };
    Ok(ImageEmbedding {
        global: field(gv, ge, gs),
        local: field(lv, le, ls),
        image: e,
    })
}

/// Anchor embeddings of one template point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub global: Vec<f32>,
    pub local: Vec<f32>,
}

impl Anchor {
    /// Embeddings interpolated at `p` and renormalized. A zero interpolant
    /// stays zero.
    pub fn at(emb: &ImageEmbedding, p: &Point) -> Result<Anchor> {
        if !emb.image.contains(p) {
            return Err(Error::shape(format!(
                "template point {p:?} outside the image"
            )));
        }
        let unit = |f: &EmbeddingField| {
            let mut v = f.interpolate(p);
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            v
        };
        Ok(Anchor {
            global: unit(&emb.global),
            local: unit(&emb.local),
        })
    }
}

/// A labeled image with cached anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub names: Vec<String>,
    pub points: Vec<Point>,
    pub anchors: Vec<Anchor>,
}

impl Template {
    pub fn new(emb: &ImageEmbedding, named: &[(String, Point)]) -> Result<Self> {
        let anchors = named
            .iter()
            .map(|(_, p)| Anchor::at(emb, p))
            .collect::<Result<_>>()?;
        Ok(Template {
            names: named.iter().map(|n| n.0.clone()).collect(),
            points: named.iter().map(|n| n.1).collect(),
            anchors,
        })
    }

    pub fn anchor(&self, name: &str) -> Option<&Anchor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.anchors[i])
    }
}

/// Which similarity maps drive the peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapChoice {
    Combined,
    GlobalOnly,
    LocalOnly,
}

impl std::str::FromStr for MapChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(MapChoice::Combined),
            "global-only" => Ok(MapChoice::GlobalOnly),
            "local-only" => Ok(MapChoice::LocalOnly),
            _ => Err(Error::config(format!(
                "unknown variant {s:?} (expected combined, global-only or local-only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub point: Point,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub point: Point,
    pub score: f64,
    pub global_peak: Peak,
    pub local_peak: Peak,
}

/// Similarity of `anchor` with every cell, upsampled to image pixels.
pub fn upsampled_similarity(
    anchor: &[f32],
    field: &EmbeddingField,
    image: Extent,
) -> Result<Vec<f32>> {
    let s = field.similarity(anchor)?;
    Ok(resample_linear_forward(
        &s,
        1,
        field.extent.dims,
        image.dims,
        field.stride,
    ))
}

/// First maximum in index order, i.e. the lowest `(z, y, x)` among ties.
fn argmax(v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn peak_of(map: &[f32], image: Extent) -> Peak {
    let (i, s) = argmax(map);
    let c = image.coords(i);
    Peak {
        point: [c[0] as f64, c[1] as f64, c[2] as f64],
        score: s as f64,
    }
}

/// Matches from precomputed upsampled maps.
pub fn match_maps(sg: &[f32], sl: &[f32], image: Extent, choice: MapChoice) -> MatchResult {
    let (global_peak, local_peak) = (peak_of(sg, image), peak_of(sl, image));
    let best = match choice {
        MapChoice::Combined => {
            let sum: Vec<f32> = sg.iter().zip(sl).map(|(a, b)| a + b).collect();
            peak_of(&sum, image)
        }
        MapChoice::GlobalOnly => global_peak,
        MapChoice::LocalOnly => local_peak,
    };
    MatchResult {
        point: best.point,
        score: best.score,
        global_peak,
        local_peak,
    }
}

/// Peak of the upsampled similarity fields of `anchor` over `query`.
pub fn match_point(
    anchor: &Anchor,
    query: &ImageEmbedding,
    choice: MapChoice,
) -> Result<MatchResult> {
    let sg = match choice {
        MapChoice::LocalOnly => vec![0.0; query.image.len()],
        _ => upsampled_similarity(&anchor.global, &query.global, query.image)?,
    };
    let sl = match choice {
        MapChoice::GlobalOnly => vec![0.0; query.image.len()],
        _ => upsampled_similarity(&anchor.local, &query.local, query.image)?,
    };
    Ok(match_maps(&sg, &sl, query.image, choice))
}

/// [`match_point`], suppressed when the score falls below `threshold`.
pub fn match_with_threshold(
    anchor: &Anchor,
    query: &ImageEmbedding,
    choice: MapChoice,
    threshold: f64,
) -> Result<Option<MatchResult>> {
    let m = match_point(anchor, query, choice)?;
    Ok((m.score >= threshold).then_some(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn field(values: Vec<f32>, dim: usize, sizes: &[usize], stride: [usize; 3]) -> EmbeddingField {
        EmbeddingField {
            values,
            dim,
            extent: Extent::from_sizes(sizes).unwrap(),
            stride,
            origin: [0.0; 3],
        }
    }

    #[test]
    fn single_tile_equals_forward() {
        let cfg = EncoderConfig::desk_2d();
        let p = init_params(&cfg, 0).unwrap();
        let img = Grid::from_fn(Extent::from_sizes(&[32, 40]).unwrap(), |[_, y, x]| {
            ((x * y) % 7) as f32 / 7.0
        });
        let emb = embed_image(&cfg, &p, &img, &Tiling::whole()).unwrap();
        let (g, l) = forward(&cfg, &p, &img).unwrap();
        assert_eq!(emb.global, g);
        assert_eq!(emb.local, l);
    }

    #[test]
    fn orthogonal_anchor_scores_zero_and_is_rejected() {
        let image = Extent::from_sizes(&[8, 8]).unwrap();
        let mut gv = vec![0.0; 2 * 4];
        gv[..4].fill(1.0);
        let mut lv = vec![0.0; 2 * 16];
        lv[..16].fill(1.0);
        let q = ImageEmbedding {
            global: field(gv, 2, &[2, 2], [1, 4, 4]),
            local: field(lv, 2, &[4, 4], [1, 2, 2]),
            image,
        };
        let a = Anchor {
            global: vec![0.0, 1.0],
            local: vec![0.0, 1.0],
        };
        let m = match_point(&a, &q, MapChoice::Combined).unwrap();
        assert!(m.score.abs() < 1e-6);
        assert_eq!(m.point, [0.0; 3]);
        assert!(
            match_with_threshold(&a, &q, MapChoice::Combined, DEFAULT_THRESHOLD)
                .unwrap()
                .is_none()
        );
    }

    #[test]
    fn ties_resolve_to_lowest_coordinate() {
        let e = Extent::from_sizes(&[3, 3]).unwrap();
        let mut s = vec![0.0; 9];
        s[5] = 1.0;
        s[7] = 1.0;
        let m = match_maps(&s, &vec![0.0; 9], e, MapChoice::Combined);
        assert_eq!(m.point, [0.0, 1.0, 2.0]);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!(
            "local-only".parse::<MapChoice>().unwrap(),
            MapChoice::LocalOnly
        );
        assert!("both".parse::<MapChoice>().is_err());
    }
}
