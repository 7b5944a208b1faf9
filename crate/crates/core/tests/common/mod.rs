#![allow(dead_code)]

pub mod accounting;
pub mod fd;
pub mod golden;
pub mod laws;

use paine_core::autograd::{GradCheckReport, Graph, Probe, Tensor};
use paine_core::data::{mix_seed, sample_noise};
use paine_core::networks::{
    EncoderVariant, NoiseTensor, PainePredictor, PredictorConfig, PromptEmbedding, StreamDims,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7e57]))
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // sum of uniforms: bounded, roughly normal, cheap
            let u: f64 = (0..4).map(|_| rng.random::<f64>() - 0.5).sum();
            u * scale * 1.7
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A predictor small enough for exhaustive finite differences.
pub fn tiny_config(variant: EncoderVariant) -> PredictorConfig {
    PredictorConfig {
        prompt_streams: vec![StreamDims { tok: 3, d_tok: 4 }, StreamDims { tok: 2, d_tok: 6 }],
        encoder_variant: variant,
        attn_blocks: 1,
        heads: 2,
        noise_shape: [1, 16, 16],
        stage_channels: [2, 2, 2, 3],
        mlp_hidden: vec![5],
    }
}

pub fn random_prompt(rng: &mut ChaCha8Rng, cfg: &PredictorConfig) -> PromptEmbedding {
    PromptEmbedding::new(
        cfg.prompt_streams
            .iter()
            .map(|s| normal_tensor(rng, &[s.tok, s.d_tok], 1.0))
            .collect(),
    )
    .unwrap()
}

pub fn random_noise(rng: &mut ChaCha8Rng, cfg: &PredictorConfig) -> NoiseTensor {
    sample_noise(rng, cfg.noise_shape)
}

pub fn flat_params(model: &PainePredictor) -> Vec<f64> {
    model
        .params()
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

pub fn with_flat_params(model: &PainePredictor, flat: &[f64]) -> PainePredictor {
    let mut at = 0;
    let named = model
        .params()
        .iter()
        .map(|(name, t)| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec()).unwrap();
            at += n;
            (name.to_string(), out)
        })
        .collect();
    PainePredictor::from_named_tensors(model.config().clone(), named).unwrap()
}

/// `Σ_i w_i · predict(prompt, noise_i)` and its gradient w.r.t. every parameter.
pub fn predictor_probe(
    base: &PainePredictor,
    flat: &[f64],
    prompt: &PromptEmbedding,
    noises: &[NoiseTensor],
    weights: &[f64],
) -> paine_core::autograd::Result<Probe> {
    let model = with_flat_params(base, flat);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let p = bound.encode_prompt(&mut g, prompt).unwrap();
    let mut total = None;
    for (n, &w) in noises.iter().zip(weights) {
        let x = bound.encode_noise(&mut g, n).unwrap();
        let s = bound.score(&mut g, p, x).unwrap();
        let s = g.scale(s, w);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let out = g.sum(total.unwrap());
    g.backward(out)?;
    let grad = bound
        .param_vars()
        .iter()
        .zip(model.params().tensors())
        .flat_map(|(&v, t)| {
            g.grad(v)
                .map(|x| x.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    Ok(Probe {
        value: g.value(out).data()[0],
        grad,
        piece: g.piece_signature(),
    })
}

pub fn assert_grad(report: &GradCheckReport, tol: f64, what: &str) {
    assert!(
        report.max_rel_err < tol,
        "{what}: max relative error {:e} over {} coordinates ({} skipped)",
        report.max_rel_err,
        report.checked,
        report.skipped
    );
    assert!(report.checked > 0, "{what}: every coordinate was skipped");
}
