//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance binary.

use anatembed::augment::AugmentConfig;
use anatembed::autodiff::{Graph, Tensor, Var};
use anatembed::net::EncoderConfig;
use anatembed::phantom::generate;
use anatembed::rng::stream;
use anatembed::trainer::{backprop_terms, forward_batch, select_terms, TrainConfig, Trainer};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// A unit step through the whole network crosses relu kinks at 1e-3, which
/// leaves an O(h) truncation error; 1e-4 is still well above f32 noise.
pub const H_DIRECTIONAL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub rel_err: f64,
}

impl CaseResult {
    pub fn ok(&self) -> bool {
        self.rel_err < REL_TOL
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with the denominator floored so vanishing
/// gradients compare absolutely.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-3)
}

/// Builds an op on fresh input leaves and returns its output.
type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so relu kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Loss `Σ w ⊙ op(inputs)` for fixed random weights `w`.
fn eval(inputs: &[Tensor], build: &Build, w: &[f32], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let wv = g.constant(Tensor::new(g.value(out).shape().to_vec(), w.to_vec()).unwrap());
    let loss = g.dot(out, wv).unwrap();
    let val: f64 = g
        .value(out)
        .data()
        .iter()
        .zip(w)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    if !grads {
        return (val, vec![]);
    }
    g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .map(|&v| match g.grad(v) {
            Some(t) => t.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect();
    (val, gs)
}

fn check_op(name: &str, inputs: Vec<Tensor>, build: &Build, rng: &mut ChaCha8Rng) -> CaseResult {
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).len()
    };
    let w = random_vec(rng, probe, -1.0, 1.0);
    let (_, analytic) = eval(&inputs, build, &w, true);
    let mut a_all = vec![];
    let mut n_all = vec![];
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= H;
            // the step actually taken after f32 rounding
            let step = plus[i].data()[k] as f64 - minus[i].data()[k] as f64;
            let lp = eval(&plus, build, &w, false).0;
            let lm = eval(&minus, build, &w, false).0;
            n_all.push((lp - lm) / step);
            a_all.push(analytic[i][k]);
        }
    }
    CaseResult {
        name: name.to_string(),
        rel_err: rel_err(&a_all, &n_all),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

/// One randomized instance of op family `k`; `i` seeds the instance.
fn op_case(k: usize, i: u64) -> CaseResult {
    let mut rng = stream(i, "gradcheck", k as u64);
    let c = rng.gen_range(1..=3);
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let n = c * h * w;
    match k {
        0 => {
            // 2D conv, random stride and padding
            let o = rng.gen_range(1..=3);
            let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (h + 2, w + 2);
            let s = [rng.gen_range(1..=2), rng.gen_range(1..=2)];
            let p = [rng.gen_range(0..=1), rng.gen_range(0..=1)];
            let x = tensor(vec![c, h, w], random_vec(&mut rng, c * h * w, -1.0, 1.0));
            let wt = tensor(
                vec![o, c, kh, kw],
                random_vec(&mut rng, o * c * kh * kw, -1.0, 1.0),
            );
            let b = tensor(vec![o], random_vec(&mut rng, o, -1.0, 1.0));
            check_op(
                &format!("conv2d s{s:?} p{p:?} k{kh}x{kw}"),
                vec![x, wt, b],
                &move |g, v| g.conv(v[0], v[1], Some(v[2]), &s, &p).unwrap(),
                &mut rng,
            )
        }
        1 => {
            let o = rng.gen_range(1..=2);
            let d = rng.gen_range(2..=4);
            let s = [rng.gen_range(1..=2), 1, rng.gen_range(1..=2)];
            let x = tensor(
                vec![c, d, h, w],
                random_vec(&mut rng, c * d * h * w, -1.0, 1.0),
            );
            let wt = tensor(
                vec![o, c, 3, 3, 3],
                random_vec(&mut rng, o * c * 27, -1.0, 1.0),
            );
            check_op(
                &format!("conv3d s{s:?}"),
                vec![x, wt],
                &move |g, v| g.conv(v[0], v[1], None, &s, &[1, 1, 1]).unwrap(),
                &mut rng,
            )
        }
        2 => check_op(
            "relu",
            vec![tensor(vec![c, h, w], away_from_zero(&mut rng, n))],
            &|g, v| g.relu(v[0]),
            &mut rng,
        ),
        3 => check_op(
            "add",
            vec![
                tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0)),
                tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0)),
            ],
            &|g, v| g.add(v[0], v[1]).unwrap(),
            &mut rng,
        ),
        4 => {
            let c2 = rng.gen_range(1..=3);
            check_op(
                "concat_channels",
                vec![
                    tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0)),
                    tensor(vec![c2, h, w], random_vec(&mut rng, c2 * h * w, -1.0, 1.0)),
                ],
                &|g, v| g.concat_channels(v[0], v[1]).unwrap(),
                &mut rng,
            )
        }
        5 => {
            let f = [rng.gen_range(1..=3), rng.gen_range(1..=3)];
            check_op(
                &format!("upsample_nearest {f:?}"),
                vec![tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0))],
                &move |g, v| g.upsample_nearest(v[0], &f).unwrap(),
                &mut rng,
            )
        }
        6 => {
            let f = [rng.gen_range(1..=4), rng.gen_range(1..=4)];
            check_op(
                &format!("upsample_linear {f:?}"),
                vec![tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0))],
                &move |g, v| g.upsample_linear(v[0], &f).unwrap(),
                &mut rng,
            )
        }
        7 => {
            // channel vectors with norms spread over [0.1, 10]
            let c = rng.gen_range(2..=4);
            let cells = h * w;
            let mut data = random_vec(&mut rng, c * cells, -1.0, 1.0);
            for cell in 0..cells {
                let norm: f32 = (0..c)
                    .map(|ch| data[ch * cells + cell].powi(2))
                    .sum::<f32>()
                    .sqrt();
                let target = 10f32.powf(rng.gen_range(-1.0..1.0));
                for ch in 0..c {
                    data[ch * cells + cell] *= target / norm;
                }
            }
            check_op(
                "l2_normalize_channels",
                vec![tensor(vec![c, h, w], data)],
                &|g, v| g.l2_normalize_channels(v[0], 1e-8).unwrap(),
                &mut rng,
            )
        }
        8 => check_op(
            "dot",
            vec![
                tensor(vec![n], random_vec(&mut rng, n, -1.0, 1.0)),
                tensor(vec![n], random_vec(&mut rng, n, -1.0, 1.0)),
            ],
            &|g, v| g.dot(v[0], v[1]).unwrap(),
            &mut rng,
        ),
        9 => check_op(
            "exp",
            vec![tensor(vec![n], random_vec(&mut rng, n, -2.0, 2.0))],
            &|g, v| g.exp(v[0]),
            &mut rng,
        ),
        10 => check_op(
            "log",
            vec![tensor(vec![n], random_vec(&mut rng, n, 0.5, 3.0))],
            &|g, v| g.log(v[0]),
            &mut rng,
        ),
        11 => check_op(
            "sum",
            vec![tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0))],
            &|g, v| g.sum(v[0]),
            &mut rng,
        ),
        12 => {
            let s = rng.gen_range(-3.0f32..3.0);
            check_op(
                "scale",
                vec![tensor(vec![n], random_vec(&mut rng, n, -1.0, 1.0))],
                &move |g, v| g.scale(v[0], s),
                &mut rng,
            )
        }
        _ => {
            // diamond: x feeds two branches that are summed again
            check_op(
                "diamond",
                vec![tensor(vec![c, h, w], random_vec(&mut rng, n, -1.0, 1.0))],
                &|g, v| {
                    let a = g.exp(v[0]);
                    let b = g.scale(v[0], 3.0);
                    g.add(a, b).unwrap()
                },
                &mut rng,
            )
        }
    }
}

pub const OP_FAMILIES: usize = 14;

/// 96 single-op instances cycling through every op family.
pub fn op_cases() -> Vec<CaseResult> {
    (0..96)
        .map(|i| op_case(i % OP_FAMILIES, i as u64))
        .collect()
}

/// Directional finite differences of the full contrastive loss through the
/// encoder on a two-pair batch with negative selection frozen. Checks the
/// gradient direction and one mixed direction per seed.
pub fn encoder_cases(seeds: &[u64]) -> Vec<CaseResult> {
    let encoder = EncoderConfig {
        stage_channels: vec![4, 4, 8, 8],
        fpn_channels: 8,
        embed_dim: 8,
        ..EncoderConfig::desk_2d()
    };
    let augment = AugmentConfig {
        patch_size: vec![16, 16],
        ..AugmentConfig::default()
    };
    let data: Vec<_> = (0..2)
        .map(|s| generate(s, 2, &[64, 64], 0.3).unwrap())
        .collect();
    let mut out = vec![];
    for &seed in seeds {
        let train = TrainConfig {
            batch_size: 2,
            n_pos: 4,
            n_neg: 4,
            n_rand_g: 4,
            n_cand_l: 8,
            seed,
            ..TrainConfig::desk_2d()
        };
        let sampling = train.sampling();
        let mut trainer = Trainer::new(encoder.clone(), augment.clone(), train).unwrap();
        // zero init biases put zero-padded regions exactly on the relu kink
        let mut brng = stream(seed, "gradcheck-bias", 0);
        for (name, t) in trainer
            .params
            .names
            .iter()
            .zip(trainer.params.tensors.iter_mut())
        {
            if name.ends_with("bias") {
                for v in t.data_mut() {
                    *v = brng.gen_range(-0.1..0.1);
                }
            }
        }
        let batch = trainer.draw_batch(&data, 0).unwrap();
        let fwd = forward_batch(&encoder, &trainer.params, &batch, &data).unwrap();
        let terms = select_terms(&fwd, &batch, &sampling).unwrap();
        let (_, grads) = backprop_terms(fwd, &terms, &sampling).unwrap();
        let g: Vec<f64> = grads
            .iter()
            .zip(&trainer.params.tensors)
            .flat_map(|(g, t)| match g {
                Some(g) => g.iter().map(|&x| x as f64).collect::<Vec<_>>(),
                None => vec![0.0; t.len()],
            })
            .collect();
        let loss_at = |dir: &[f64], h: f64| {
            let mut p = trainer.params.clone();
            let mut k = 0;
            for t in p.tensors.iter_mut() {
                for v in t.data_mut() {
                    *v = (*v as f64 + h * dir[k]) as f32;
                    k += 1;
                }
            }
            let fwd = forward_batch(&encoder, &p, &batch, &data).unwrap();
            backprop_terms(fwd, &terms, &sampling).unwrap().0.total
        };
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut rng = stream(seed, "gradcheck-dir", 0);
        let noise: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nnorm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mixed: Vec<f64> = g
            .iter()
            .zip(&noise)
            .map(|(a, b)| a / gnorm + b / nnorm)
            .collect();
        for (label, dir) in [
            ("gradient", g.iter().map(|x| x / gnorm).collect::<Vec<_>>()),
            ("mixed", mixed),
        ] {
            let dnorm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|x| x / dnorm).collect();
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let h = H_DIRECTIONAL;
            let numeric = (loss_at(&dir, h) - loss_at(&dir, -h)) / (2.0 * h);
            out.push(CaseResult {
                name: format!("encoder+infonce seed {seed} {label}"),
                rel_err: rel_err(&[analytic], &[numeric]),
            });
        }
    }
    out
}

/// The full 100-instance suite.
pub fn full_suite() -> Vec<CaseResult> {
    let mut all = op_cases();
    all.extend(encoder_cases(&[0, 1]));
    all
}
