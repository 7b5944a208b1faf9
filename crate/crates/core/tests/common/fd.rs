//! Finite-difference checks of every differentiable operation on random
//! small instances. Objectives are random weighted sums of op outputs.

use paine_core::autograd::{
    attention_block, grad_check, BlockVars, GradCheckReport, Graph, Probe, Result, Tensor, Var,
};
use paine_core::networks::{Bound, EncoderVariant, PainePredictor};
use paine_core::ranking::{batch_loss, soft_rank, srcc_soft, LossConfig, LossVariant};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{normal_tensor, random_noise, random_prompt, rng, tiny_config, uniform_vec};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Worst case of one operation over many instances.
#[derive(Clone, Debug)]
pub struct OpSummary {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub max_mixed_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// `(seed, coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(u64, usize, f64, f64)>,
}

impl OpSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOL && self.checked > 0
    }

    /// Agreement with tiny gradients compared absolutely.
    pub fn passed_mixed(&self) -> bool {
        self.max_mixed_err < TOL && self.checked > 0
    }
}

type Check = fn(u64) -> GradCheckReport;

pub const OPS: &[(&str, Check)] = &[
    ("matmul", matmul),
    ("conv2d", conv2d),
    ("max_pool", max_pool),
    ("layer_norm", layer_norm),
    ("softmax_rows", softmax_rows),
    ("attention_block", attention),
    ("prompt_encoder_attn_pool", prompt_encoder_attn),
    ("prompt_encoder_per_token", prompt_encoder_per_token),
    ("noise_encoder", noise_encoder),
    ("score_head", score_head),
    ("full_predict", full_predict),
    ("soft_rank", soft_rank_op),
    ("srcc_soft", srcc_soft_op),
    ("batch_loss_srcc", batch_loss_srcc),
    ("batch_loss_lambdarank", batch_loss_lambdarank),
];

pub fn run(name: &'static str, check: Check, instances: usize) -> OpSummary {
    let mut s = OpSummary {
        name,
        instances,
        max_rel_err: 0.0,
        max_mixed_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for seed in 0..instances as u64 {
        let r = check(seed);
        if let Some((i, a, n)) = r.worst {
            if s.worst.is_none() || r.max_rel_err > s.max_rel_err {
                s.max_rel_err = r.max_rel_err;
                s.worst = Some((seed, i, a, n));
            }
        }
        s.max_mixed_err = s.max_mixed_err.max(r.max_mixed_err);
        s.checked += r.checked;
        s.skipped += r.skipped;
    }
    s
}

pub fn run_all(instances: usize) -> Vec<OpSummary> {
    OPS.iter().map(|&(n, c)| run(n, c, instances)).collect()
}

/// Probe of `Σ weights ⊙ build(leaves)` where the leaves are filled from `x` in order.
fn leaves_probe<B>(shapes: &[Vec<usize>], x: &[f64], weights: &Tensor, build: B) -> Result<Probe>
where
    B: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut at = 0;
    let leaves: Vec<Var> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let v = g.param(Tensor::new(s.clone(), x[at..at + n].to_vec()).unwrap());
            at += n;
            v
        })
        .collect();
    let out = build(&mut g, &leaves)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let total = g.sum(prod);
    g.backward(total)?;
    let grad = leaves
        .iter()
        .zip(shapes)
        .flat_map(|(&v, s)| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; s.iter().product()])
        })
        .collect();
    Ok(Probe {
        value: g.value(total).data()[0],
        grad,
        piece: g.piece_signature(),
    })
}

fn random_flat(r: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<f64> {
    shapes
        .iter()
        .flat_map(|s| normal_tensor(r, s, 1.0).into_data())
        .collect()
}

fn check_leaves<B>(seed: u64, shapes: Vec<Vec<usize>>, out_shape: &[usize], build: B) -> GradCheckReport
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let x0 = random_flat(&mut r, &shapes);
    check_leaves_at(&mut r, shapes, x0, out_shape, build)
}

fn check_leaves_at<B>(
    r: &mut ChaCha8Rng,
    shapes: Vec<Vec<usize>>,
    x0: Vec<f64>,
    out_shape: &[usize],
    build: B,
) -> GradCheckReport
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let w = normal_tensor(r, out_shape, 1.0);
    grad_check(|x| leaves_probe(&shapes, x, &w, |g, v| build(g, v)), &x0, H).unwrap()
}

fn matmul(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0xa1);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    check_leaves(seed, vec![vec![m, k], vec![k, n]], &[m, n], |g, v| g.matmul(v[0], v[1]))
}

fn conv2d(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0xc0);
    let (ci, co) = (r.random_range(1..3), r.random_range(1..3));
    let (h, w) = (r.random_range(3..7), r.random_range(3..7));
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    let k = 3;
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    check_leaves(
        seed,
        vec![vec![ci, h, w], vec![co, ci, k, k], vec![co]],
        &[co, ho, wo],
        |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
    )
}

fn max_pool(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0x9e);
    let (c, h, w) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
    check_leaves(seed, vec![vec![c, h, w]], &[c], |g, v| g.adaptive_max_pool_to_1(v[0]))
}

fn layer_norm(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0x1a);
    let (l, d) = (r.random_range(1..4), r.random_range(2..6));
    check_leaves(seed, vec![vec![l, d], vec![d], vec![d]], &[l, d], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    })
}

fn softmax_rows(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0x5f);
    let (l, d) = (r.random_range(1..4), r.random_range(1..6));
    check_leaves(seed, vec![vec![l, d]], &[l, d], |g, v| g.softmax_rows(v[0]))
}

fn attention(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0xa7);
    let heads = r.random_range(1..3);
    let d = heads * r.random_range(2..4);
    let l = r.random_range(1..4);
    let leaves: Vec<(&str, Vec<usize>)> = vec![
        ("input", vec![l, d]),
        ("ln1.gamma", vec![d]),
        ("ln1.beta", vec![d]),
        ("q.weight", vec![d, d]),
        ("q.bias", vec![d]),
        ("k.weight", vec![d, d]),
        ("v.weight", vec![d, d]),
        ("v.bias", vec![d]),
        ("o.weight", vec![d, d]),
        ("o.bias", vec![d]),
        ("ln2.gamma", vec![d]),
        ("ln2.beta", vec![d]),
        ("ff1.weight", vec![d, 4 * d]),
        ("ff1.bias", vec![4 * d]),
        ("ff2.weight", vec![4 * d, d]),
        ("ff2.bias", vec![d]),
    ];
    let mut x0 = normal_tensor(&mut r, &leaves[0].1, 1.0).into_data();
    for (name, shape) in &leaves[1..] {
        x0.extend(instance_values(&mut r, name, shape));
    }
    let shapes = leaves.into_iter().map(|(_, s)| s).collect();
    check_leaves_at(&mut r, shapes, x0, &[l, d], |g, v| {
        let p = BlockVars {
            ln1_gamma: v[1],
            ln1_beta: v[2],
            wq: v[3],
            bq: v[4],
            wk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gamma: v[10],
            ln2_beta: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        };
        Ok(attention_block(g, v[0], &p, heads)?.out)
    })
}

/// Finite differences over the parameters whose names start with `prefix`
/// plus an input leaf of `input_shape`.
fn check_model<B>(
    seed: u64,
    variant: EncoderVariant,
    prefix: &str,
    input_shape: Vec<usize>,
    out_shape: &[usize],
    build: B,
) -> GradCheckReport
where
    B: Fn(&mut Graph, &Bound, Var) -> Result<Var>,
{
    let cfg = tiny_config(variant);
    let base = PainePredictor::new(cfg, seed).unwrap();
    let chosen: Vec<usize> = base
        .params()
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with(prefix))
        .map(|(i, _)| i)
        .collect();
    let mut r = rng(seed ^ 0x3d);
    let mut x0: Vec<f64> = chosen
        .iter()
        .flat_map(|&i| {
            let t = &base.params().tensors()[i];
            instance_values(&mut r, &base.params().names()[i], t.shape())
        })
        .collect();
    x0.extend(normal_tensor(&mut r, &input_shape, 1.0).into_data());
    let w = normal_tensor(&mut r, out_shape, 1.0);
    let probe = |x: &[f64]| -> Result<Probe> {
        let mut model = base.clone();
        let mut at = 0;
        for &i in &chosen {
            let t = model.params_mut().tensor_mut(i);
            let n = t.len();
            t.data_mut().copy_from_slice(&x[at..at + n]);
            at += n;
        }
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let input = g.param(Tensor::new(input_shape.clone(), x[at..].to_vec())?);
        let out = build(&mut g, &bound, input)?;
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let total = g.sum(prod);
        g.backward(total)?;
        let mut grad: Vec<f64> = chosen
            .iter()
            .flat_map(|&i| {
                let v = bound.param_vars()[i];
                g.grad(v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; model.params().tensors()[i].len()])
            })
            .collect();
        grad.extend(
            g.grad(input)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; input_shape.iter().product()]),
        );
        Ok(Probe {
            value: g.value(total).data()[0],
            grad,
            piece: g.piece_signature(),
        })
    };
    grad_check(probe, &x0, H).unwrap()
}

/// Weights at variance-preserving scale, offsets near zero, gains near one,
/// so that every layer of a deep instance carries signal.
fn instance_values(r: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> Vec<f64> {
    if name.ends_with(".weight") {
        let fan_in = if shape.len() == 4 {
            shape[1] * shape[2] * shape[3]
        } else {
            shape[0]
        };
        normal_tensor(r, shape, (2.0 / fan_in as f64).sqrt()).into_data()
    } else if name.ends_with(".gamma") {
        normal_tensor(r, shape, 0.1).data().iter().map(|v| 1.0 + v).collect()
    } else {
        normal_tensor(r, shape, 0.1).into_data()
    }
}

fn net_err(e: paine_core::networks::NetworkError) -> paine_core::autograd::AutogradError {
    paine_core::autograd::AutogradError::Dimension(e.to_string())
}

fn prompt_encoder(seed: u64, variant: EncoderVariant) -> GradCheckReport {
    let cfg = tiny_config(variant);
    let s = cfg.prompt_streams[0];
    check_model(seed, variant, "prompt0.", vec![s.tok, s.d_tok], &[1, s.d_tok], |g, b, x| {
        b.encode_stream(g, 0, x).map_err(net_err)
    })
}

fn prompt_encoder_attn(seed: u64) -> GradCheckReport {
    prompt_encoder(seed, EncoderVariant::AttnPool)
}

fn prompt_encoder_per_token(seed: u64) -> GradCheckReport {
    prompt_encoder(seed, EncoderVariant::PerTokenScalar)
}

fn noise_encoder(seed: u64) -> GradCheckReport {
    let cfg = tiny_config(EncoderVariant::AttnPool);
    let width = cfg.noise_width();
    check_model(seed, EncoderVariant::AttnPool, "noise.", cfg.noise_shape.to_vec(), &[1, width], |g, b, x| {
        b.encode_noise_var(g, x).map_err(net_err)
    })
}

fn score_head(seed: u64) -> GradCheckReport {
    let cfg = tiny_config(EncoderVariant::AttnPool);
    let width = cfg.head_input_width();
    check_model(seed, EncoderVariant::AttnPool, "head.", vec![1, width], &[1, 1], |g, b, x| {
        b.score_features(g, x).map_err(net_err)
    })
}

/// Every parameter of the tiny predictor, two noises, alternating variants.
fn full_predict(seed: u64) -> GradCheckReport {
    let variant = if seed % 2 == 0 {
        EncoderVariant::AttnPool
    } else {
        EncoderVariant::PerTokenScalar
    };
    let cfg = tiny_config(variant);
    let mut r = rng(seed ^ 0xf0);
    let prompt = random_prompt(&mut r, &cfg);
    let noises: Vec<_> = (0..2).map(|_| random_noise(&mut r, &cfg)).collect();
    let weights = uniform_vec(&mut r, 2, -1.0, 1.0);
    // the input slot is a dummy scalar added to the output
    check_model(seed, variant, "", vec![1, 1], &[1, 1], |g, b, x| {
        let p = b.encode_prompt(g, &prompt).map_err(net_err)?;
        let mut total = x;
        for (n, &w) in noises.iter().zip(&weights) {
            let e = b.encode_noise(g, n).map_err(net_err)?;
            let s = b.score(g, p, e).map_err(net_err)?;
            let s = g.scale(s, w);
            total = g.add(total, s)?;
        }
        Ok(total)
    })
}

fn ranking_probe(value: f64, grad: Vec<f64>, piece: u64) -> Result<Probe> {
    Ok(Probe { value, grad, piece })
}

fn soft_rank_op(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0x50);
    let n = r.random_range(2..12);
    let eps = [1e-2, 0.1, 1.0][seed as usize % 3];
    // spread comparable to eps so that pools form
    let x0 = uniform_vec(&mut r, n, -3.0 * eps * n as f64, 3.0 * eps * n as f64);
    let w = uniform_vec(&mut r, n, -1.0, 1.0);
    grad_check(
        |x| {
            let sr = soft_rank(x, eps).unwrap();
            let v = sr.values.iter().zip(&w).map(|(a, b)| a * b).sum();
            ranking_probe(v, sr.vjp(&w), sr.piece())
        },
        &x0,
        H,
    )
    .unwrap()
}

fn srcc_soft_op(seed: u64) -> GradCheckReport {
    let mut r = rng(seed ^ 0x5c);
    // two-point correlations are identically ±1
    let n = r.random_range(3..12);
    let eps = [1e-2, 0.1, 1.0][seed as usize % 3];
    let x0 = uniform_vec(&mut r, n, -eps * n as f64, eps * n as f64);
    let t = uniform_vec(&mut r, n, -1.0, 1.0);
    grad_check(
        |x| {
            let s = srcc_soft(x, &t, eps).unwrap();
            ranking_probe(s.value, s.grad, s.piece)
        },
        &x0,
        H,
    )
    .unwrap()
}

fn batch_loss_op(seed: u64, variant: LossVariant) -> GradCheckReport {
    let mut r = rng(seed ^ 0xb1);
    let groups = r.random_range(1..4);
    let per = r.random_range(2..7);
    let n = groups * per;
    let ids: Vec<u64> = (0..n).map(|i| (i / per) as u64).collect();
    let x0 = uniform_vec(&mut r, n, -0.2, 0.2);
    let t = uniform_vec(&mut r, n, -1.0, 1.0);
    let cfg = LossConfig {
        variant,
        ..LossConfig::default()
    };
    grad_check(
        |x| {
            let o = batch_loss(x, &t, &ids, &cfg).unwrap();
            ranking_probe(o.value, o.grad, o.piece)
        },
        &x0,
        H,
    )
    .unwrap()
}

fn batch_loss_srcc(seed: u64) -> GradCheckReport {
    batch_loss_op(seed, LossVariant::Srcc)
}

fn batch_loss_lambdarank(seed: u64) -> GradCheckReport {
    batch_loss_op(seed, LossVariant::LambdaRank)
}
