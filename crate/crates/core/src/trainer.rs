//! Training loop: batch assembly, forward, sampling, loss, optimizer step
//! and checkpointing.
//!
//! Iteration `t` draws all of its randomness from `stream(seed, "train", t)`,
//! so a resumed run replays exactly the batches an uninterrupted run would.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_pair, AugmentConfig, PatchPair};
use crate::autodiff::{Graph, Tensor, Var};
use crate::contrast::{
    build_terms, loss_and_grads, sample_positives, BatchFields, FieldGeom, FusedLoss,
    PositivePairs, SamplingConfig, Term,
};
use crate::error::{Error, Result};
use crate::net::{init_params, input_tensor, record, EmbeddingField, EncoderConfig, Params};
use crate::phantom::Phantom;
use crate::rng::stream;
use crate::tensor_file::{self, TensorRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_rand_g: usize,
    pub n_cand_l: usize,
    pub delta_mm: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub no_coarse_to_fine: bool,
    pub no_global_hard: bool,
    pub no_global_diverse: bool,
    pub no_local_hard: bool,
    pub no_local_diverse: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_2d()
    }
}

impl TrainConfig {
    pub fn desk_2d() -> Self {
        TrainConfig {
            batch_size: 4,
            iterations: 2000,
            learning_rate: 1e-3,
            tau: 0.5,
            n_pos: 32,
            n_neg: 32,
            n_rand_g: 64,
            n_cand_l: 128,
            delta_mm: 3.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            log_every: 10,
            checkpoint_every: 500,
            no_coarse_to_fine: false,
            no_global_hard: false,
            no_global_diverse: false,
            no_local_hard: false,
            no_local_diverse: false,
        }
    }

    pub fn desk_3d() -> Self {
        TrainConfig {
            batch_size: 2,
            ..Self::desk_2d()
        }
    }

    /// Published counts for 2D data.
    pub fn paper_2d() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 25_000,
            learning_rate: 1e-4,
            n_pos: 100,
            n_neg: 500,
            n_rand_g: 1000,
            n_cand_l: 5000,
            optimizer: OptimizerKind::Radam,
            ..Self::desk_2d()
        }
    }

    pub fn paper_3d() -> Self {
        TrainConfig {
            batch_size: 8,
            n_cand_l: 20_000,
            ..Self::paper_2d()
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            n_rand_g: self.n_rand_g,
            n_cand_l: self.n_cand_l,
            tau: self.tau,
            delta_mm: self.delta_mm,
            coarse_to_fine: !self.no_coarse_to_fine,
            global_hard: !self.no_global_hard,
            global_diverse: !self.no_global_diverse,
            local_hard: !self.no_local_hard,
            local_diverse: !self.no_local_diverse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config(
                "batch_size, log_every and checkpoint_every must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        self.sampling().validate()
    }

    /// Short label of the enabled ablation switches.
    pub fn variant(&self) -> String {
        let flags = [
            (self.no_coarse_to_fine, "no_coarse_to_fine"),
            (self.no_global_hard, "no_global_hard"),
            (self.no_global_diverse, "no_global_diverse"),
            (self.no_local_hard, "no_local_hard"),
            (self.no_local_diverse, "no_local_diverse"),
        ];
        let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        let z: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            kind,
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// One Adam (or rectified Adam) update. `grads[i] = None` counts as a zero
/// gradient.
pub fn step_optimizer(
    params: &mut Params,
    grads: &[Option<Vec<f32>>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::shape(
            "one gradient slot per parameter tensor expected",
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    // variance rectification term; None while the variance estimate is
    // still too noisy, in which case the step is plain momentum SGD
    let rect = match state.kind {
        OptimizerKind::Adam => Some(1.0),
        OptimizerKind::Radam => {
            let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
            let b2t = BETA2.powf(t);
            let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
            (rho > 5.0).then(|| {
                (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt()
            })
        }
    };
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensors[i].data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let gk = g.as_ref().map_or(0.0, |g| g[k] as f64);
            let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * gk;
            let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let mhat = mk / bc1;
            let delta = match rect {
                Some(r) => r * mhat / ((vk / bc2).sqrt() + ADAM_EPS),
                None => mhat,
            };
            p[k] = (p[k] as f64 - lr * delta) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub global_term: f64,
    pub local_term: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub variant: String,
    pub iteration: u64,
    pub rng_state: RngState,
    pub param_names: Vec<String>,
    pub optimizer_step: u64,
}

pub const CHECKPOINT_FORMAT: &str = "anatembed-checkpoint-1";

/// Parameters plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: Params,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Writes `manifest.json`, `params.pet` and `optimizer.pet` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        tensor_file::save(&dir.join("params.pet"), &self.params.to_records())?;
        let mut recs = vec![];
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            recs.push(TensorRecord::f32(vec![m.len()], m.clone()));
            recs.push(TensorRecord::f32(vec![v.len()], v.clone()));
        }
        tensor_file::save(&dir.join("optimizer.pet"), &recs)?;
        let mut json = serde_json::to_vec_pretty(&self.manifest)?;
        json.push(b'\n');
        tensor_file::write_atomic(&dir.join("manifest.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                dir,
                format!("unknown checkpoint format {:?}", manifest.format),
            ));
        }
        let params = Params::from_records(
            &manifest.encoder,
            tensor_file::load(&dir.join("params.pet"))?,
        )?;
        if params.names != manifest.param_names {
            return Err(Error::format(
                dir,
                "parameter names do not match the encoder layout",
            ));
        }
        let recs = tensor_file::load(&dir.join("optimizer.pet"))?;
        if recs.len() != 2 * params.tensors.len() {
            return Err(Error::format(
                dir,
                "optimizer state does not match the parameters",
            ));
        }
        let mut m = vec![];
        let mut v = vec![];
        for (i, r) in recs.into_iter().enumerate() {
            let want = params.tensors[i / 2].len();
            let data = r
                .into_f32()
                .filter(|d| d.len() == want)
                .ok_or_else(|| Error::format(dir, "optimizer tensor has the wrong type or size"))?;
            if i % 2 == 0 {
                m.push(data);
            } else {
                v.push(data);
            }
        }
        let optimizer = OptimizerState {
            kind: manifest.train.optimizer,
            step: manifest.optimizer_step,
            m,
            v,
        };
        Ok(Checkpoint {
            manifest,
            params,
            optimizer,
        })
    }
}

/// Mutable training state.
pub struct Trainer {
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
    pub next_iteration: u64,
}

/// Loss-log writer: `iteration,L_g,L_l,wall_ms`.
pub struct LossLog {
    file: fs::File,
    start: Instant,
}

impl LossLog {
    /// Opens `path`, writing a header when the file is new or empty.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "iteration,L_g,L_l,wall_ms")?;
        }
        Ok(LossLog {
            file,
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, iteration: u64, loss: &LossValue) -> Result<()> {
        writeln!(
            self.file,
            "{iteration},{},{},{}",
            loss.global_term,
            loss.local_term,
            self.start.elapsed().as_millis()
        )?;
        Ok(())
    }
}

impl Trainer {
    pub fn new(encoder: EncoderConfig, augment: AugmentConfig, train: TrainConfig) -> Result<Self> {
        encoder.validate()?;
        augment.validate(encoder.dim)?;
        encoder.check_extent(&augment.patch_size)?;
        train.validate()?;
        let params = init_params(&encoder, train.seed)?;
        let optimizer = OptimizerState::new(train.optimizer, &params);
        Ok(Trainer {
            encoder,
            augment,
            train,
            params,
            optimizer,
            next_iteration: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let m = ck.manifest;
        if m.rng_state.seed != m.train.seed {
            return Err(Error::config(
                "checkpoint rng seed disagrees with its train config",
            ));
        }
        Ok(Trainer {
            encoder: m.encoder,
            augment: m.augment,
            train: m.train,
            params: ck.params,
            optimizer: ck.optimizer,
            next_iteration: m.rng_state.next_iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.into(),
                encoder: self.encoder.clone(),
                augment: self.augment.clone(),
                train: self.train.clone(),
                variant: self.train.variant(),
                iteration: self.next_iteration,
                rng_state: RngState {
                    seed: self.train.seed,
                    next_iteration: self.next_iteration,
                },
                param_names: self.params.names.clone(),
                optimizer_step: self.optimizer.step,
            },
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Runs one iteration on `data` and returns its loss.
    pub fn step(&mut self, data: &[Phantom]) -> Result<LossValue> {
        let t = self.next_iteration;
        let (loss, grads) = self.loss_and_grads(data, t)?;
        step_optimizer(
            &mut self.params,
            &grads,
            &mut self.optimizer,
            self.train.learning_rate,
        )?;
        self.next_iteration += 1;
        Ok(loss)
    }

    /// Draws iteration `t`'s batch and returns the loss with per-parameter
    /// gradients, without updating anything.
    pub fn loss_and_grads(
        &self,
        data: &[Phantom],
        t: u64,
    ) -> Result<(LossValue, Vec<Option<Vec<f32>>>)> {
        let batch = self.draw_batch(data, t)?;
        let (loss, grads) = batch_loss(
            &self.encoder,
            &self.params,
            &self.train.sampling(),
            &batch,
            data,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                batch_seed: crate::rng::derive_seed(self.train.seed, "train", t),
                images: batch.images.clone(),
            });
        }
        Ok((loss, grads))
    }

    /// The images, patch pairs and positives of iteration `t`.
    pub fn draw_batch(&self, data: &[Phantom], t: u64) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Empty("training data".into()));
        }
        let mut rng = stream(self.train.seed, "train", t);
        let b = self.train.batch_size;
        let images: Vec<usize> = if b <= data.len() {
            index::sample(&mut rng, data.len(), b).into_vec()
        } else {
            (0..b).map(|_| rng.gen_range(0..data.len())).collect()
        };
        let mut pairs = vec![];
        let mut positives = vec![];
        for &i in &images {
            let pair = sample_pair(&data[i], &self.augment, &mut rng)?;
            positives.push(sample_positives(&pair, self.train.n_pos, &mut rng)?);
            pairs.push(pair);
        }
        Ok(Batch {
            images,
            pairs,
            positives,
            selection_seed: rng.gen(),
        })
    }

    /// Trains until `self.train.iterations`, logging and checkpointing under
    /// `out` when given. Returns the loss of every iteration run.
    pub fn run(&mut self, data: &[Phantom], out: Option<&Path>) -> Result<Vec<LossValue>> {
        let mut log = match out {
            Some(dir) => Some(LossLog::open(&dir.join("loss.csv"))?),
            None => None,
        };
        let mut losses = vec![];
        while (self.next_iteration as usize) < self.train.iterations {
            let loss = self.step(data)?;
            losses.push(loss);
            let done = self.next_iteration;
            if let Some(log) = log.as_mut() {
                if done % self.train.log_every as u64 == 0 {
                    log.write(done, &loss)?;
                }
            }
            if let Some(dir) = out {
                if done % self.train.checkpoint_every as u64 == 0 {
                    self.checkpoint().save(&checkpoint_dir(dir, done))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("final"))?;
        }
        Ok(losses)
    }
}

pub fn checkpoint_dir(out: &Path, iteration: u64) -> PathBuf {
    out.join(format!("checkpoint-{iteration:06}"))
}

/// One iteration's sampled inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<usize>,
    pub pairs: Vec<PatchPair>,
    pub positives: Vec<PositivePairs>,
    /// Seeds negative selection, so selection is reproducible apart from
    /// the pair sampling.
    pub selection_seed: u64,
}

/// Encoder outputs of a batch with the graph that produced them.
pub struct BatchForward {
    graph: Graph,
    params: Vec<Var>,
    global_vars: Vec<Var>,
    local_vars: Vec<Var>,
    pub global: Vec<EmbeddingField>,
    pub local: Vec<EmbeddingField>,
    pub geom_global: Vec<FieldGeom>,
    pub geom_local: Vec<FieldGeom>,
    pub spacing: Vec<crate::grid::Point>,
}

/// Loss terms of a batch, global and local.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTerms {
    pub global: Vec<Term>,
    pub local: Vec<Term>,
}

/// Records both views of every pair on one graph.
pub fn forward_batch(
    encoder: &EncoderConfig,
    params: &Params,
    batch: &Batch,
    data: &[Phantom],
) -> Result<BatchForward> {
    let plan = encoder.plan()?;
    let mut g = Graph::new();
    let pvars: Vec<Var> = params.tensors.iter().map(|t| g.param(t.clone())).collect();
    let mut gvars = vec![];
    let mut lvars = vec![];
    for pair in &batch.pairs {
        for patch in [&pair.patch_a, &pair.patch_b] {
            let x = g.constant(input_tensor(patch));
            let h = record(encoder, &mut g, &pvars, x)?;
            gvars.push(h.global);
            lvars.push(h.local);
        }
    }
    let field = |g: &Graph, v: Var, stride| {
        EmbeddingField::from_tensor(g.value(v), encoder.dim, stride, [0.0; 3])
    };
    let gf: Vec<EmbeddingField> = gvars
        .iter()
        .map(|&v| field(&g, v, plan.global_stride()))
        .collect::<Result<_>>()?;
    let lf: Vec<EmbeddingField> = lvars
        .iter()
        .map(|&v| field(&g, v, plan.local_stride()))
        .collect::<Result<_>>()?;
    let geoms = |fields: &[EmbeddingField]| -> Vec<FieldGeom> {
        fields
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let pair = &batch.pairs[k / 2];
                let t = if k % 2 == 0 {
                    &pair.transform_a
                } else {
                    &pair.transform_b
                };
                FieldGeom::new(f, t, k / 2)
            })
            .collect()
    };
    Ok(BatchForward {
        geom_global: geoms(&gf),
        geom_local: geoms(&lf),
        spacing: batch.images.iter().map(|&i| data[i].spacing).collect(),
        graph: g,
        params: pvars,
        global_vars: gvars,
        local_vars: lvars,
        global: gf,
        local: lf,
    })
}

/// Positive and negative selection against the current fields.
pub fn select_terms(
    fwd: &BatchForward,
    batch: &Batch,
    sampling: &SamplingConfig,
) -> Result<BatchTerms> {
    let view = BatchFields {
        global: &fwd.global,
        local: &fwd.local,
        geom_global: &fwd.geom_global,
        geom_local: &fwd.geom_local,
        spacing: &fwd.spacing,
    };
    let mut rng = stream(batch.selection_seed, "negatives", 0);
    let mut terms = BatchTerms {
        global: vec![],
        local: vec![],
    };
    for (i, (pair, pos)) in batch.pairs.iter().zip(&batch.positives).enumerate() {
        let (a, b) = build_terms(&view, i, pair, pos, sampling, &mut rng)?;
        terms.global.extend(a);
        terms.local.extend(b);
    }
    Ok(terms)
}

/// Loss of fixed terms and its gradient for every parameter (`None` for
/// parameters the loss does not reach).
pub fn backprop_terms(
    mut fwd: BatchForward,
    terms: &BatchTerms,
    sampling: &SamplingConfig,
) -> Result<(LossValue, Vec<Option<Vec<f32>>>)> {
    let grefs: Vec<&EmbeddingField> = fwd.global.iter().collect();
    let lrefs: Vec<&EmbeddingField> = fwd.local.iter().collect();
    let (lg_val, g_grads) = loss_and_grads(&grefs, &terms.global, sampling.tau)?;
    let (ll_val, l_grads) = loss_and_grads(&lrefs, &terms.local, sampling.tau)?;
    let loss = LossValue {
        total: lg_val + ll_val,
        global_term: lg_val,
        local_term: ll_val,
    };
    if !loss.total.is_finite() {
        return Ok((loss, vec![None; fwd.params.len()]));
    }
    let (inputs, grads) = if sampling.coarse_to_fine {
        let mut inputs = fwd.global_vars.clone();
        inputs.extend(&fwd.local_vars);
        let mut grads = g_grads;
        grads.extend(l_grads);
        (inputs, grads)
    } else {
        (fwd.local_vars.clone(), l_grads)
    };
    let g = &mut fwd.graph;
    let node = g.custom(
        inputs,
        Tensor::scalar(loss.total as f32),
        Box::new(FusedLoss::new(grads)),
    );
    g.backward(node)?;
    let grads = fwd
        .params
        .iter()
        .map(|&v| g.grad(v).map(|t| t.data().to_vec()))
        .collect();
    Ok((loss, grads))
}

/// Forward, negative selection and backward for one batch.
pub fn batch_loss(
    encoder: &EncoderConfig,
    params: &Params,
    sampling: &SamplingConfig,
    batch: &Batch,
    data: &[Phantom],
) -> Result<(LossValue, Vec<Option<Vec<f32>>>)> {
    let fwd = forward_batch(encoder, params, batch, data)?;
    let terms = select_terms(&fwd, batch, sampling)?;
    backprop_terms(fwd, &terms, sampling)
}
