//! Landmark metrics, template selection and benchmark / sweep harnesses.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grid::Point;
use crate::infer::{embed_image, match_point, ImageEmbedding, MapChoice, Template, Tiling};
use crate::net::{EncoderConfig, Params};
use crate::phantom::{landmark_set, Phantom};
use crate::tensor_file::write_atomic;
use crate::trainer::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialError {
    pub px: f64,
    pub mm: f64,
}

/// Euclidean distance between predicted and true points, in pixels and in
/// millimetres.
pub fn radial_errors(pred: &[Point], gt: &[Point], spacing: &Point) -> Result<Vec<RadialError>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} landmarks",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (mut px, mut mm) = (0.0, 0.0);
            for a in 0..3 {
                let d = p[a] - g[a];
                px += d * d;
                mm += (d * spacing[a]).powi(2);
            }
            RadialError {
                px: px.sqrt(),
                mm: mm.sqrt(),
            }
        })
        .collect())
}

/// Closed axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitBox {
    pub lo: Point,
    pub hi: Point,
}

impl HitBox {
    pub fn around(center: &Point, half_width: f64, rank: usize) -> Self {
        let mut lo = *center;
        let mut hi = *center;
        for a in 3 - rank..3 {
            lo[a] -= half_width;
            hi[a] += half_width;
        }
        HitBox { lo, hi }
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

/// Fraction of points that fall inside their box (boundary inclusive).
pub fn box_accuracy(pred: &[Point], boxes: &[HitBox]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("box accuracy of no predictions".into()));
    }
    if pred.len() != boxes.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} boxes",
            pred.len(),
            boxes.len()
        )));
    }
    let hits = pred
        .iter()
        .zip(boxes)
        .filter(|(p, b)| b.contains(p))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Min-max normalises every column of one landmark matrix to `[0, 1]`;
/// constant columns map to 0.
pub fn normalize_landmarks(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, Vec::len);
    let mut out = m.to_vec();
    for c in 0..cols {
        let lo = m.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = m.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        for r in out.iter_mut() {
            r[c] = if hi > lo {
                (r[c] - lo) / (hi - lo)
            } else {
                0.0
            };
        }
    }
    out
}

/// Index of the image whose normalised landmarks are closest (squared
/// Frobenius) to the mean normalised landmarks; the lowest index wins ties.
pub fn select_template(landmarks: &[Vec<Vec<f64>>]) -> Result<usize> {
    if landmarks.is_empty() {
        return Err(Error::Empty("template selection over no images".into()));
    }
    let shape = (landmarks[0].len(), landmarks[0].first().map_or(0, Vec::len));
    if landmarks
        .iter()
        .any(|m| m.len() != shape.0 || m.iter().any(|r| r.len() != shape.1))
    {
        return Err(Error::shape("landmark matrices differ in shape"));
    }
    let norm: Vec<_> = landmarks.iter().map(|m| normalize_landmarks(m)).collect();
    let n = norm.len() as f64;
    let mut mean = vec![vec![0.0; shape.1]; shape.0];
    for m in &norm {
        for (mr, r) in mean.iter_mut().zip(m) {
            for (a, b) in mr.iter_mut().zip(r) {
                *a += b / n;
            }
        }
    }
    let mut best = (0, f64::INFINITY);
    for (i, m) in norm.iter().enumerate() {
        let d: f64 = m
            .iter()
            .zip(&mean)
            .flat_map(|(r, mr)| r.iter().zip(mr).map(|(a, b)| (a - b).powi(2)))
            .sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub query: String,
    pub landmark: String,
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    pub error_px: f64,
    pub error_mm: f64,
    pub score: f64,
    pub hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mre_px: f64,
    pub std_px: f64,
    pub max_px: f64,
    pub mre_mm: f64,
    pub std_mm: f64,
    pub max_mm: f64,
    pub accuracy: f64,
}

impl Summary {
    pub fn of(rows: &[BenchmarkRow]) -> Result<Summary> {
        if rows.is_empty() {
            return Err(Error::Empty("benchmark with no rows".into()));
        }
        let n = rows.len() as f64;
        let stats = |f: &dyn Fn(&BenchmarkRow) -> f64| {
            let mean = rows.iter().map(f).sum::<f64>() / n;
            let var = rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
            let max = rows.iter().map(f).fold(0.0, f64::max);
            (mean, var.sqrt(), max)
        };
        let (mre_px, std_px, max_px) = stats(&|r| r.error_px);
        let (mre_mm, std_mm, max_mm) = stats(&|r| r.error_mm);
        Ok(Summary {
            count: rows.len(),
            mre_px,
            std_px,
            max_px,
            mre_mm,
            std_mm,
            max_mm,
            accuracy: rows.iter().filter(|r| r.hit).count() as f64 / n,
        })
    }
}

/// Deterministic benchmark output; timings are kept in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub variant: MapChoice,
    pub template: String,
    pub summary: Summary,
    pub rows: Vec<BenchmarkRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub embed_ms: f64,
    pub match_ms: f64,
    pub queries: usize,
}

/// Embeds a set of images, in parallel but with results in input order.
pub fn embed_all(
    encoder: &EncoderConfig,
    params: &Params,
    images: &[&Phantom],
    tiling: &Tiling,
) -> Result<Vec<ImageEmbedding>> {
    images
        .par_iter()
        .map(|p| embed_image(encoder, params, &p.image, tiling))
        .collect()
}

/// Evaluation inputs with embeddings already computed.
pub struct Prepared<'a> {
    pub template_name: String,
    pub template: Template,
    pub queries: Vec<(String, &'a Phantom, ImageEmbedding)>,
    pub embed_ms: f64,
}

pub fn prepare<'a>(
    encoder: &EncoderConfig,
    params: &Params,
    template: (&str, &Phantom),
    queries: &[(String, &'a Phantom)],
    tiling: &Tiling,
) -> Result<Prepared<'a>> {
    let start = Instant::now();
    let temb = embed_image(encoder, params, &template.1.image, tiling)?;
    let named: Vec<(String, Point)> = template
        .1
        .landmarks
        .iter()
        .map(|l| (l.name.clone(), l.position))
        .collect();
    let tpl = Template::new(&temb, &named)?;
    let imgs: Vec<&Phantom> = queries.iter().map(|q| q.1).collect();
    let embs = embed_all(encoder, params, &imgs, tiling)?;
    let queries = queries
        .iter()
        .zip(embs)
        .map(|((n, p), e)| (n.clone(), *p, e))
        .collect();
    Ok(Prepared {
        template_name: template.0.to_string(),
        template: tpl,
        queries,
        embed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Matches every template landmark in every query with the given maps.
pub fn evaluate(
    prep: &Prepared,
    variant: MapChoice,
    box_half_width: f64,
) -> Result<(BenchmarkReport, Timing)> {
    let start = Instant::now();
    let per_query: Vec<Vec<BenchmarkRow>> = prep
        .queries
        .par_iter()
        .map(|(name, ph, emb)| {
            let mut rows = vec![];
            for (k, lname) in prep.template.names.iter().enumerate() {
                let gt = ph
                    .landmark(lname)
                    .ok_or_else(|| Error::shape(format!("query {name} has no landmark {lname}")))?;
                let m = match_point(&prep.template.anchors[k], emb, variant)?;
                let err = radial_errors(&[m.point], &[gt.position], &ph.spacing)?[0];
                let hb = HitBox::around(&gt.position, box_half_width, ph.rank());
                rows.push(BenchmarkRow {
                    query: name.clone(),
                    landmark: lname.clone(),
                    pred: emb.image.project(&m.point),
                    gt: emb.image.project(&gt.position),
                    error_px: err.px,
                    error_mm: err.mm,
                    score: m.score,
                    hit: hb.contains(&m.point),
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<BenchmarkRow> = per_query.into_iter().flatten().collect();
    let summary = Summary::of(&rows)?;
    Ok((
        BenchmarkReport {
            variant,
            template: prep.template_name.clone(),
            summary,
            rows,
        },
        Timing {
            embed_ms: prep.embed_ms,
            match_ms: start.elapsed().as_secs_f64() * 1e3,
            queries: prep.queries.len(),
        },
    ))
}

/// Embeds template and queries, then evaluates one variant.
pub fn run_benchmark(
    encoder: &EncoderConfig,
    params: &Params,
    template: (&str, &Phantom),
    queries: &[(String, &Phantom)],
    variant: MapChoice,
    box_half_width: f64,
    tiling: &Tiling,
) -> Result<(BenchmarkReport, Timing)> {
    let prep = prepare(encoder, params, template, queries, tiling)?;
    evaluate(&prep, variant, box_half_width)
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record([
            "query", "landmark", "pred", "gt", "error_px", "error_mm", "score", "hit",
        ])?;
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        for r in &self.rows {
            w.write_record([
                r.query.clone(),
                r.landmark.clone(),
                join(&r.pred),
                join(&r.gt),
                r.error_px.to_string(),
                r.error_mm.to_string(),
                r.score.to_string(),
                r.hit.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Writes `<stem>.json` and `<stem>.csv` atomically.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.json")), &self.to_json()?)?;
        write_atomic(&dir.join(format!("{stem}.csv")), &self.rows_csv()?)
    }
}

/// Result of training and evaluating one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub params: Params,
    pub template_index: usize,
    pub reports: Vec<BenchmarkReport>,
    pub losses: Vec<f64>,
}

/// Trains on the first `train_count` phantoms, picks the template among
/// them and benchmarks the held-out rest for each variant.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    phantoms: &[Phantom],
    variants: &[MapChoice],
    out: Option<&Path>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train, test) = phantoms.split_at(cfg.data.train_count.min(phantoms.len()));
    if test.is_empty() {
        return Err(Error::Empty("no held-out phantoms".into()));
    }
    let mut trainer = Trainer::new(cfg.encoder.clone(), cfg.augment.clone(), cfg.train.clone())?;
    let losses = trainer
        .run(train, out)?
        .into_iter()
        .map(|l| l.total)
        .collect();
    let ti = select_template(&landmark_set(train)?)?;
    let queries: Vec<(String, &Phantom)> = test
        .iter()
        .enumerate()
        .map(|(k, p)| (format!("phantom-{:04}", cfg.data.train_count + k), p))
        .collect();
    let tiling = Tiling {
        tile: cfg.eval.tile.clone(),
    };
    let prep = prepare(
        &cfg.encoder,
        &trainer.params,
        (&format!("phantom-{ti:04}"), &train[ti]),
        &queries,
        &tiling,
    )?;
    let reports = variants
        .iter()
        .map(|&v| evaluate(&prep, v, cfg.eval.box_half_width).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(ExperimentOutcome {
        params: trainer.params,
        template_index: ti,
        reports,
        losses,
    })
}

/// Parameters a sweep may vary.
pub const SWEEP_PARAMS: &[&str] = &[
    "embed_dim",
    "patch_size",
    "n_pos",
    "n_neg",
    "n_rand_g",
    "n_cand_l",
    "tau",
    "learning_rate",
];

pub fn apply_sweep_value(cfg: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    let as_count = || -> Result<usize> {
        if value < 1.0 || value.fract() != 0.0 {
            return Err(Error::config(format!(
                "{param} needs a positive integer, got {value}"
            )));
        }
        Ok(value as usize)
    };
    match param {
        "embed_dim" => cfg.encoder.embed_dim = as_count()?,
        "patch_size" => cfg.augment.patch_size = vec![as_count()?; cfg.encoder.dim],
        "n_pos" => cfg.train.n_pos = as_count()?,
        "n_neg" => cfg.train.n_neg = as_count()?,
        "n_rand_g" => cfg.train.n_rand_g = as_count()?,
        "n_cand_l" => cfg.train.n_cand_l = as_count()?,
        "tau" => cfg.train.tau = value,
        "learning_rate" => cfg.train.learning_rate = value,
        _ => {
            return Err(Error::config(format!(
                "cannot sweep {param:?}; choose one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mre_px: f64,
    pub max_px: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record([self.param.as_str(), "mre_px", "max_px", "accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.value.to_string(),
                r.mre_px.to_string(),
                r.max_px.to_string(),
                r.accuracy.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Whitespace-separated columns with a `#` header, for plotting tools.
    pub fn to_dat(&self) -> String {
        let mut s = format!("# {} mre_px max_px accuracy\n", self.param);
        for r in &self.rows {
            s.push_str(&format!(
                "{} {} {} {}\n",
                r.value, r.mre_px, r.max_px, r.accuracy
            ));
        }
        s
    }
}

/// Retrains and re-evaluates `base` once per value of `param`.
pub fn run_sweep(param: &str, values: &[f64], base: &ExperimentConfig) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values".into()));
    }
    let phantoms = base.data.generate()?;
    let mut rows = vec![];
    for &v in values {
        let mut cfg = base.clone();
        apply_sweep_value(&mut cfg, param, v)?;
        let outcome = run_experiment(&cfg, &phantoms, &[cfg.eval.variant], None)?;
        let s = &outcome.reports[0].summary;
        rows.push(SweepRow {
            value: v,
            mre_px: s.mre_px,
            max_px: s.max_px,
            accuracy: s.accuracy,
        });
    }
    Ok(SweepTable {
        param: param.to_string(),
        rows,
    })
}
