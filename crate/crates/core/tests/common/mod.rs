#![allow(dead_code)]

use mmfa::data::{AugmentConfig, SynthConfig};
use mmfa::kernel::KernelSpec;
use mmfa::loss::{on_tape, LossWeights};
use mmfa::model::{ConvStage, ExtractorConfig, InputShape, MmfaModel, ModelConfig, PassOptions};
use mmfa::tape::{BnState, Mode, Param, ParamKind, ParamStore, Tape, Var};
use mmfa::tensor::Tensor;
use mmfa::trainer::TrainConfig;
use mmfa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------- oracles

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
            }
        }
    }
    out
}

pub fn naive_kernel(x: &[f64], y: &[f64], bandwidths: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    bandwidths.iter().map(|a| (-d2 / (2.0 * a)).exp()).sum::<f64>() / bandwidths.len() as f64
}

/// The three kernel double sums written out term by term.
pub fn naive_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], bandwidths: &[f64]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    for a in x {
        for b in x {
            xx += naive_kernel(a, b, bandwidths);
        }
    }
    let mut yy = 0.0;
    for a in y {
        for b in y {
            yy += naive_kernel(a, b, bandwidths);
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += naive_kernel(a, b, bandwidths);
        }
    }
    xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

pub fn naive_distances(q: &[Vec<f64>], g: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for a in q {
        for b in g {
            out.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    out
}

pub struct OracleMetrics {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid: usize,
}

/// Rank of each kept gallery entry counted directly: one plus the number of
/// kept entries strictly closer, or equally close with a lower index.
pub fn brute_rank_metrics(
    dists: &[f64],
    q_ids: &[i64],
    q_cams: &[i64],
    g_ids: &[i64],
    g_cams: &[i64],
) -> Option<OracleMetrics> {
    let ng = g_ids.len();
    let mut first_ranks = Vec::new();
    let mut aps = Vec::new();
    for q in 0..q_ids.len() {
        let row = &dists[q * ng..(q + 1) * ng];
        let kept: Vec<usize> = (0..ng)
            .filter(|&j| !(g_ids[j] == q_ids[q] && g_cams[j] == q_cams[q]))
            .collect();
        let rank_of = |j: usize| {
            1 + kept
                .iter()
                .filter(|&&o| row[o] < row[j] || (row[o] == row[j] && o < j))
                .count()
        };
        let mut rel: Vec<usize> = kept.iter().filter(|&&j| g_ids[j] == q_ids[q]).map(|&j| rank_of(j)).collect();
        if rel.is_empty() {
            continue;
        }
        rel.sort_unstable();
        first_ranks.push(rel[0]);
        let ap = rel
            .iter()
            .map(|&r| rel.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / rel.len() as f64;
        aps.push(ap);
    }
    if first_ranks.is_empty() {
        return None;
    }
    let v = first_ranks.len() as f64;
    let cmc = (1..=ng)
        .map(|k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / v)
        .collect();
    Some(OracleMetrics {
        cmc,
        map: aps.iter().sum::<f64>() / v,
        valid: first_ranks.len(),
    })
}

pub fn cmc_is_monotone(cmc: &[f64]) -> bool {
    cmc.iter().all(|&c| (0.0..=1.0).contains(&c)) && cmc.windows(2).all(|w| w[0] <= w[1])
}

// ------------------------------------------------------- finite differences

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;
pub const FD_DRAWS: u64 = 20;

/// Compares the tape gradient of a scalar built by `f` against central
/// differences over every element of every parameter. Returns the largest
/// relative error.
pub fn fd_max_error<S>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore<f64>,
    f: &dyn Fn(&mut S, &mut Tape<f64>) -> Result<Var>,
) -> Result<f64> {
    store(state).zero_grad();
    let mut tape = Tape::new();
    let loss = f(state, &mut tape)?;
    tape.backward(loss, store(state))?;
    let analytic: Vec<Vec<f64>> = store(state).iter().map(|p| p.grad.to_f64_vec()).collect();

    let eval = |state: &mut S| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(state, &mut tape)?;
        Ok(tape.value(v).item())
    };
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = nth(store(state), pi).value.data()[k];
            nth_mut(store(state), pi).value.data_mut()[k] = orig + FD_STEP;
            let up = eval(state)?;
            nth_mut(store(state), pi).value.data_mut()[k] = orig - FD_STEP;
            let down = eval(state)?;
            nth_mut(store(state), pi).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn nth(store: &ParamStore<f64>, i: usize) -> &Param<f64> {
    store.iter().nth(i).unwrap()
}

fn nth_mut(store: &mut ParamStore<f64>, i: usize) -> &mut Param<f64> {
    store.iter_mut().nth(i).unwrap()
}

fn identity(s: &mut ParamStore<f64>) -> &mut ParamStore<f64> {
    s
}

fn store_of(inputs: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        s.add(Param::new(format!("x{i}.weight"), t, ParamKind::Weight));
    }
    s
}

fn vars(tape: &mut Tape<f64>, s: &ParamStore<f64>) -> Vec<Var> {
    let ids: Vec<_> = (0..s.len()).map(|i| s.find(&format!("x{i}.weight")).unwrap()).collect();
    ids.into_iter().map(|id| tape.param(s, id)).collect()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(randn(&shape, &mut rng(seed ^ 0x5eed)));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

pub type PrimitiveOp<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>;

/// Checks a primitive over [`FD_DRAWS`] random input draws.
pub fn check_primitive(shapes: &[&[usize]], op: PrimitiveOp<'_>) -> Result<f64> {
    let mut worst = 0.0f64;
    for draw in 0..FD_DRAWS {
        let mut r = rng(1000 + draw);
        let inputs = shapes.iter().map(|s| randn(s, &mut r)).collect();
        let mut store = store_of(inputs);
        let f = |s: &mut ParamStore<f64>, tape: &mut Tape<f64>| {
            let v = vars(tape, s);
            let out = op(tape, &v, draw)?;
            if tape.value(out).is_scalar() {
                Ok(out)
            } else {
                project(tape, out, draw)
            }
        };
        worst = worst.max(fd_max_error(&mut store, identity, &f)?);
    }
    Ok(worst)
}

fn one_hot_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..k)).collect()
}

fn binary(n: usize, m: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let data = (0..n * m).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![n, m], data).unwrap()
}

fn bn_state(d: usize) -> BnState<f64> {
    let mut s = BnState::new(d, 1e-5, 0.1);
    s.running_mean = (0..d).map(|j| 0.1 * j as f64).collect();
    s.running_var = (0..d).map(|j| 0.5 + 0.25 * j as f64).collect();
    s
}

pub fn primitive_cases() -> Vec<(&'static str, Result<f64>)> {
    let spec = KernelSpec::default();
    let spec2 = spec.clone();
    let spec3 = spec.clone();
    let spec4 = spec.clone();
    vec![
        ("matmul", check_primitive(&[&[3, 4], &[4, 2]], &|t, v, _| t.matmul(v[0], v[1]))),
        ("add_row", check_primitive(&[&[3, 4], &[4]], &|t, v, _| t.add_row(v[0], v[1]))),
        ("linear", check_primitive(&[&[3, 4], &[4, 2], &[2]], &|t, v, _| t.linear(v[0], v[1], v[2]))),
        ("add", check_primitive(&[&[2, 3], &[2, 3]], &|t, v, _| t.add(v[0], v[1]))),
        ("mul", check_primitive(&[&[2, 3], &[2, 3]], &|t, v, _| t.mul(v[0], v[1]))),
        ("scale", check_primitive(&[&[5]], &|t, v, _| Ok(t.scale(v[0], -1.7)))),
        ("sum", check_primitive(&[&[2, 3]], &|t, v, _| Ok(t.sum(v[0])))),
        ("leaky_relu", check_primitive(&[&[4, 5]], &|t, v, _| Ok(t.leaky_relu(v[0], 0.01)))),
        (
            "conv2d stride 1",
            check_primitive(&[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], &|t, v, _| t.conv2d(v[0], v[1], v[2], 1)),
        ),
        (
            "conv2d stride 2",
            check_primitive(&[&[2, 2, 6, 5], &[3, 2, 3, 3], &[3]], &|t, v, _| t.conv2d(v[0], v[1], v[2], 2)),
        ),
        ("global_max_pool", check_primitive(&[&[2, 3, 4, 3]], &|t, v, _| t.global_max_pool(v[0]))),
        (
            "batch_norm train",
            check_primitive(&[&[5, 3], &[3], &[3]], &|t, v, _| {
                t.batch_norm(v[0], v[1], v[2], &mut bn_state(3), Mode::Train, false)
            }),
        ),
        (
            "batch_norm eval",
            check_primitive(&[&[5, 3], &[3], &[3]], &|t, v, _| {
                t.batch_norm(v[0], v[1], v[2], &mut bn_state(3), Mode::Eval, false)
            }),
        ),
        (
            "dropout",
            check_primitive(&[&[4, 6]], &|t, v, draw| t.dropout(v[0], 0.5, &mut rng(draw), Mode::Train)),
        ),
        (
            "identity loss",
            check_primitive(&[&[6, 4]], &|t, v, draw| on_tape::identity_loss(t, v[0], &one_hot_labels(6, 4, draw))),
        ),
        (
            "attribute loss",
            check_primitive(&[&[5, 1], &[5, 1], &[5, 1]], &|t, v, draw| {
                on_tape::attribute_loss(t, v, &binary(5, 3, draw))
            }),
        ),
        (
            "AAL",
            check_primitive(&[&[4, 1], &[4, 1], &[3, 1], &[3, 1]], &move |t, v, _| {
                on_tape::aal_loss(t, &v[..2], &v[2..], &spec)
            }),
        ),
        (
            "MDAL",
            check_primitive(&[&[4, 3], &[5, 3]], &move |t, v, _| on_tape::mdal_loss(t, v[0], v[1], &spec2)),
        ),
        (
            "MDAL single bandwidth",
            check_primitive(&[&[3, 2], &[2, 2]], &move |t, v, _| {
                on_tape::mdal_loss(t, v[0], v[1], &KernelSpec::single(1.0)?)
            }),
        ),
        (
            "total loss",
            check_primitive(&[&[4, 3], &[4, 1], &[4, 1], &[3, 1], &[3, 1], &[4, 2], &[3, 2]], &move |t, v, draw| {
                let id = on_tape::identity_loss(t, v[0], &one_hot_labels(4, 3, draw))?;
                let attr = on_tape::attribute_loss(t, &v[1..3], &binary(4, 2, draw))?;
                let aal = on_tape::aal_loss(t, &v[1..3], &v[3..5], &spec3)?;
                let mdal = on_tape::mdal_loss(t, v[5], v[6], &spec4)?;
                on_tape::total_loss(t, [id, attr, aal, mdal], &LossWeights::default())
            }),
        ),
    ]
}

pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(3, 2);
    cfg.extractor = ExtractorConfig {
        input: InputShape {
            height: 6,
            width: 4,
            channels: 2,
        },
        stages: vec![
            ConvStage {
                out_channels: 3,
                stride: 1,
            },
            ConvStage {
                out_channels: 3,
                stride: 2,
            },
        ],
        leaky_slope: 0.01,
    };
    cfg
}

/// Full two-domain objective through the whole network.
pub fn model_case() -> Result<f64> {
    let mut worst = 0.0f64;
    for draw in 0..FD_DRAWS {
        let mut model = MmfaModel::<f64>::new(tiny_model_config(), &mut rng(2000 + draw))?;
        let mut r = rng(3000 + draw);
        let src = randn(&[4, 2, 6, 4], &mut r);
        let tgt = randn(&[3, 2, 6, 4], &mut r);
        let labels = one_hot_labels(4, 3, draw);
        let attrs = binary(4, 2, draw);
        let spec = KernelSpec::default();
        let f = |m: &mut MmfaModel<f64>, tape: &mut Tape<f64>| {
            let (mut rs, mut rt) = (rng(draw), rng(draw + 77));
            let mut so = PassOptions {
                mode: Mode::Train,
                rng: &mut rs,
                update_running: false,
            };
            let mut to = PassOptions {
                mode: Mode::Train,
                rng: &mut rt,
                update_running: false,
            };
            let (s, t) = m.forward_all(tape, src.clone(), tgt.clone(), &mut so, &mut to)?;
            let id = on_tape::identity_loss(tape, s.id_logits, &labels)?;
            let attr = on_tape::attribute_loss(tape, &s.attr_logits, &attrs)?;
            let aal = on_tape::aal_loss(tape, &s.attr_logits, &t.attr_logits, &spec)?;
            let mdal = on_tape::mdal_loss(tape, s.pooled, t.pooled, &spec)?;
            on_tape::total_loss(tape, [id, attr, aal, mdal], &LossWeights::default())
        };
        worst = worst.max(fd_max_error(&mut model, MmfaModel::params_mut, &f)?);
    }
    Ok(worst)
}

// ---------------------------------------------------------------- fixtures

/// A small network and synthetic set for quick training runs.
pub fn small_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        extractor: ExtractorConfig {
            input: InputShape {
                height: 16,
                width: 8,
                channels: 3,
            },
            stages: vec![
                ConvStage {
                    out_channels: 8,
                    stride: 2,
                },
                ConvStage {
                    out_channels: 16,
                    stride: 2,
                },
            ],
            leaky_slope: 0.01,
        },
        augment: AugmentConfig {
            out_height: 16,
            out_width: 8,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_ids: 6,
        per_id: 6,
        height: 16,
        width: 8,
        seed,
        ..SynthConfig::default()
    }
}
