use std::fs;
use std::path::{Path, PathBuf};

use anatembed::config::ExperimentConfig;
use anatembed::eval::{evaluate, prepare, run_sweep, select_template};
use anatembed::infer::{embed_image, match_point, MapChoice, Template, Tiling};
use anatembed::phantom::{generate as generate_phantom, landmark_set, load_dir, Phantom};
use anatembed::tensor_file::{self, write_atomic, TensorRecord};
use anatembed::trainer::{Checkpoint, Trainer};
use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Serialize;

use crate::{EmbedArgs, EvalArgs, GenerateArgs, MatchArgs, SweepArgs, TrainArgs};

/// Caps the rayon pool at `ANATEMBED_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ANATEMBED_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        anatembed::Error::Config(format!(
            "ANATEMBED_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| {
                let msg = e.message().to_string();
                anatembed::Error::Config(format!("{}: {msg}", p.display()))
            })?
        }
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn echo<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.toml"), toml::to_string(value)?.as_bytes())?;
    Ok(())
}

/// Accepts a checkpoint directory or a training output holding `final/`.
fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = if path.join("manifest.json").exists() {
        path.to_path_buf()
    } else if path.join("final").join("manifest.json").exists() {
        path.join("final")
    } else {
        return Err(anatembed::Error::Format {
            path: path.to_path_buf(),
            reason: "no checkpoint manifest".into(),
        }
        .into());
    };
    Ok(Checkpoint::load(&dir)?)
}

fn tiling(tile: &[usize]) -> Tiling {
    Tiling {
        tile: tile.to_vec(),
    }
}

fn phantom_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_suffix(".json").unwrap_or(&name).to_string()
}

fn parse_variants(s: &str) -> Result<Vec<MapChoice>> {
    if s == "all" {
        return Ok(vec![
            MapChoice::Combined,
            MapChoice::GlobalOnly,
            MapChoice::LocalOnly,
        ]);
    }
    Ok(vec![s.parse::<MapChoice>()?])
}

fn variant_name(v: MapChoice) -> &'static str {
    match v {
        MapChoice::Combined => "combined",
        MapChoice::GlobalOnly => "global-only",
        MapChoice::LocalOnly => "local-only",
    }
}

#[derive(Serialize)]
struct GenerateEcho<'a> {
    seed: u64,
    count: usize,
    dim: usize,
    size: &'a [usize],
    variation: f64,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    if a.count == 0 {
        bail!(anatembed::Error::Config(
            "--count must be at least 1".into()
        ));
    }
    fs::create_dir_all(&a.out)?;
    for k in 0..a.count {
        let p = generate_phantom(a.seed + k as u64, a.dim, &a.size, a.variation)?;
        p.save(&a.out, &format!("phantom-{k:04}"))?;
    }
    echo(
        &a.out,
        &GenerateEcho {
            seed: a.seed,
            count: a.count,
            dim: a.dim,
            size: &a.size,
            variation: a.variation,
        },
    )?;
    info!("wrote {} phantoms to {}", a.count, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    iterations: u64,
    final_loss: Option<f64>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = open_checkpoint(path)?;
            // the run continues under the checkpoint's settings; only the
            // iteration budget may come from --config
            let iterations = match a.config {
                Some(_) => cfg.train.iterations,
                None => ck.manifest.train.iterations,
            };
            cfg.encoder = ck.manifest.encoder.clone();
            cfg.augment = ck.manifest.augment.clone();
            cfg.train = ck.manifest.train.clone();
            cfg.train.iterations = iterations;
            let mut t = Trainer::from_checkpoint(ck)?;
            t.train.iterations = iterations;
            t
        }
        None => {
            cfg.encoder.validate()?;
            cfg.augment.validate(cfg.encoder.dim)?;
            cfg.train.validate()?;
            Trainer::new(cfg.encoder.clone(), cfg.augment.clone(), cfg.train.clone())?
        }
    };
    let data: Vec<Phantom> = match &a.data {
        Some(dir) => load_dir(dir)?.into_iter().map(|(_, p)| p).collect(),
        None => {
            let mut all = cfg.data.generate()?;
            all.truncate(cfg.data.train_count);
            all
        }
    };
    if data.is_empty() {
        bail!(anatembed::Error::Empty("no training phantoms".into()));
    }
    echo(&a.out, &cfg)?;
    info!(
        "training on {} phantoms for {} iterations",
        data.len(),
        trainer.train.iterations
    );
    let losses = trainer.run(&data, Some(&a.out))?;
    let summary = TrainSummary {
        checkpoint: a.out.join("final"),
        iterations: trainer.next_iteration,
        final_loss: losses.last().map(|l| l.total),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct EmbedDescription {
    image: PathBuf,
    image_size: Vec<usize>,
    embed_dim: usize,
    global_stride: Vec<usize>,
    local_stride: Vec<usize>,
    /// Record order in the tensor file.
    records: [&'static str; 2],
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let ck = open_checkpoint(&a.checkpoint)?;
    let p = Phantom::load(&a.image)?;
    let emb = embed_image(&ck.manifest.encoder, &ck.params, &p.image, &tiling(&a.tile))?;
    let record = |f: &anatembed::net::EmbeddingField| {
        let mut shape = vec![f.dim];
        shape.extend(f.extent.sizes());
        TensorRecord::f32(shape, f.values.clone())
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    tensor_file::save(&a.out, &[record(&emb.global), record(&emb.local)])?;
    let rank = emb.image.rank;
    let desc = EmbedDescription {
        image: a.image.clone(),
        image_size: emb.image.sizes(),
        embed_dim: emb.global.dim,
        global_stride: emb.global.stride[3 - rank..].to_vec(),
        local_stride: emb.local.stride[3 - rank..].to_vec(),
        records: ["global", "local"],
    };
    write_atomic(
        &a.out.with_extension("json"),
        &serde_json::to_vec_pretty(&desc)?,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct MatchLine {
    query_id: String,
    landmark: String,
    point: Vec<f64>,
    score: f64,
    matched: bool,
}

pub fn match_points(a: &MatchArgs) -> Result<()> {
    let ck = open_checkpoint(&a.checkpoint)?;
    let encoder = &ck.manifest.encoder;
    let choice: MapChoice = a.variant.parse()?;
    let template = Phantom::load(&a.template)?;
    let tiles = tiling(&a.tile);
    let temb = embed_image(encoder, &ck.params, &template.image, &tiles)?;
    let extent = template.extent();
    let named: Vec<(String, anatembed::grid::Point)> = match (&a.point, &a.landmark) {
        (Some(p), _) => vec![("point".into(), extent.lift(p)?)],
        (None, Some(name)) if name == "all" => template
            .landmarks
            .iter()
            .map(|l| (l.name.clone(), l.position))
            .collect(),
        (None, Some(name)) => {
            let l = template.landmark(name).ok_or_else(|| {
                anyhow!(anatembed::Error::Config(format!(
                    "template has no landmark {name:?}"
                )))
            })?;
            vec![(l.name.clone(), l.position)]
        }
        (None, None) => unreachable!("clap requires --point or --landmark"),
    };
    let tpl = Template::new(&temb, &named)?;
    for qpath in &a.query {
        let q = Phantom::load(qpath)?;
        let qemb = embed_image(encoder, &ck.params, &q.image, &tiles)?;
        for (name, anchor) in tpl.names.iter().zip(&tpl.anchors) {
            let m = match_point(anchor, &qemb, choice)?;
            let line = MatchLine {
                query_id: phantom_id(qpath),
                landmark: name.clone(),
                point: qemb.image.project(&m.point),
                score: m.score,
                matched: m.score >= a.threshold,
            };
            println!("{}", serde_json::to_string(&line)?);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    template_dir: &'a Path,
    query_dir: &'a Path,
    template: &'a str,
    variants: Vec<&'static str>,
    box_half_width: f64,
    tile: &'a [usize],
}

#[derive(Serialize)]
struct EvalLine<'a> {
    variant: &'static str,
    template: &'a str,
    count: usize,
    mre_px: f64,
    std_px: f64,
    max_px: f64,
    accuracy: f64,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = open_checkpoint(&a.checkpoint)?;
    let variants = parse_variants(&a.variant)?;
    let templates = load_dir(&a.template_dir)?;
    if templates.is_empty() {
        bail!(anatembed::Error::Empty(format!(
            "no phantoms in {}",
            a.template_dir.display()
        )));
    }
    let phantoms: Vec<Phantom> = templates.iter().map(|t| t.1.clone()).collect();
    let ti = select_template(&landmark_set(&phantoms)?)?;
    let (tname, tph) = &templates[ti];
    let queries = load_dir(&a.query_dir)?;
    if queries.is_empty() {
        bail!(anatembed::Error::Empty(format!(
            "no phantoms in {}",
            a.query_dir.display()
        )));
    }
    let qrefs: Vec<(String, &Phantom)> = queries.iter().map(|(n, p)| (n.clone(), p)).collect();
    let prep = prepare(
        &ck.manifest.encoder,
        &ck.params,
        (tname, tph),
        &qrefs,
        &tiling(&a.tile),
    )?;
    fs::create_dir_all(&a.report)?;
    let mut timings = vec![];
    for &v in &variants {
        let (report, timing) = evaluate(&prep, v, a.box_half_width)?;
        report.write(&a.report, &format!("report-{}", variant_name(v)))?;
        let s = &report.summary;
        let line = EvalLine {
            variant: variant_name(v),
            template: tname,
            count: s.count,
            mre_px: s.mre_px,
            std_px: s.std_px,
            max_px: s.max_px,
            accuracy: s.accuracy,
        };
        println!("{}", serde_json::to_string(&line)?);
        timings.push((variant_name(v), timing));
    }
    echo(
        &a.report,
        &EvalEcho {
            checkpoint: &a.checkpoint,
            template_dir: &a.template_dir,
            query_dir: &a.query_dir,
            template: tname,
            variants: variants.iter().map(|&v| variant_name(v)).collect(),
            box_half_width: a.box_half_width,
            tile: &a.tile,
        },
    )?;
    // wall-clock figures are the one output that differs between runs
    let timing: serde_json::Map<String, serde_json::Value> = timings
        .into_iter()
        .map(|(n, t)| Ok((n.to_string(), serde_json::to_value(t)?)))
        .collect::<Result<_>>()?;
    write_atomic(
        &a.report.join("timing.json"),
        &serde_json::to_vec_pretty(&timing)?,
    )?;
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let table = run_sweep(&a.param, &a.values, &cfg)?;
    fs::create_dir_all(&a.report)?;
    let csv = table.to_csv()?;
    write_atomic(&a.report.join(format!("sweep-{}.csv", a.param)), &csv)?;
    write_atomic(
        &a.report.join(format!("sweep-{}.dat", a.param)),
        table.to_dat().as_bytes(),
    )?;
    echo(&a.report, &cfg)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}
