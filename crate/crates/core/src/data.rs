//! Synthetic score oracle, datasets, prompt-level splits, normalization and
//! grouped batching.
//!
//! The oracle replaces "generate an image, then score it" with a closed-form
//! score that has the same structure: the prompt fixes a score distribution
//! `(μ_p, σ_p)` and the noise decides where on it a sample lands.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::networks::{NoiseTensor, PredictorConfig, PromptEmbedding, StreamDims};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// SplitMix64 finalizer; used to derive independent per-item seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

const TAG_HIDDEN: u64 = 1;
const TAG_PROMPT: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_LABEL: u64 = 4;

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Standard-normal `[C,H,W]` noise.
pub fn sample_noise(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> NoiseTensor {
    let data = normal_vec(rng, shape.iter().product(), 1.0);
    NoiseTensor::new(Tensor::new(shape.to_vec(), data).expect("finite normal draws"))
        .expect("rank-3 shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub prompt_count: usize,
    pub noises_per_prompt: usize,
    pub prompt_streams: Vec<StreamDims>,
    pub noise_shape: [usize; 3],
    pub label_noise_std: f64,
    pub base_mean: f64,
    pub mean_spread: f64,
    pub sd_base: f64,
    pub sd_spread: f64,
    /// Number of random-convolution noise features.
    pub feature_count: usize,
    /// Reuse the same noise sequence for every prompt.
    pub shared_noises: bool,
    /// Fraction of the latent argument's variance carried by a
    /// prompt-independent noise direction; the rest is the prompt interaction.
    pub shared_noise_share: f64,
    pub master_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            prompt_count: 200,
            noises_per_prompt: 20,
            prompt_streams: vec![StreamDims { tok: 8, d_tok: 16 }, StreamDims { tok: 6, d_tok: 8 }],
            noise_shape: [1, 16, 16],
            label_noise_std: 0.1,
            base_mean: 21.8,
            mean_spread: 1.4,
            sd_base: 0.3,
            sd_spread: 0.2,
            feature_count: 4,
            shared_noises: false,
            shared_noise_share: 0.8,
            master_seed: 7,
        }
    }
}

/// The fields that determine the hidden scoring function.
#[derive(Serialize)]
struct HiddenSpec<'a> {
    prompt_streams: &'a [StreamDims],
    noise_shape: [usize; 3],
    base_mean: f64,
    mean_spread: f64,
    sd_base: f64,
    sd_spread: f64,
    feature_count: usize,
    shared_noise_share: f64,
    master_seed: u64,
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.prompt_count == 0 || self.noises_per_prompt == 0 || self.feature_count == 0 {
            return bad("counts must be positive");
        }
        if self.prompt_streams.is_empty()
            || self.prompt_streams.iter().any(|s| s.tok == 0 || s.d_tok == 0)
        {
            return bad("prompt streams must be non-empty with positive extents");
        }
        if self.noise_shape.contains(&0) {
            return bad("noise extents must be positive");
        }
        let stds = [self.label_noise_std, self.sd_base, self.sd_spread];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("standard deviations must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.shared_noise_share) {
            return bad("shared noise share must lie in [0, 1]");
        }
        if !(self.base_mean.is_finite() && self.mean_spread.is_finite()) {
            return bad("score calibration must be finite");
        }
        Ok(())
    }

    /// SHA-256 over the hidden-function parameters. Prompt counts and
    /// label noise do not change the function and are excluded.
    pub fn digest(&self) -> String {
        let spec = HiddenSpec {
            prompt_streams: &self.prompt_streams,
            noise_shape: self.noise_shape,
            base_mean: self.base_mean,
            mean_spread: self.mean_spread,
            sd_base: self.sd_base,
            sd_spread: self.sd_spread,
            feature_count: self.feature_count,
            shared_noise_share: self.shared_noise_share,
            master_seed: self.master_seed,
        };
        let text = serde_json::to_string(&spec).expect("plain struct serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// A predictor config whose input shapes match this oracle.
    pub fn matching_predictor(&self, base: PredictorConfig) -> PredictorConfig {
        PredictorConfig {
            prompt_streams: self.prompt_streams.clone(),
            noise_shape: self.noise_shape,
            ..base
        }
    }
}

/// Hidden functions of the synthetic scorer, fixed by the master seed:
///
/// * `e_p` = mean token of the first stream,
/// * `μ_p = base_mean + mean_spread·tanh(⟨u, e_p⟩)`,
/// * `σ_p = sd_base + sd_spread·logistic(⟨v, e_p⟩)`,
/// * `f(X)` the global averages of fixed random 3×3 convolutions of the
///   noise, each scaled to unit variance,
/// * `g = tanh(√(1−λ)·e_pᵀ M f(X) + √λ·⟨w, f(X)⟩)` with `λ` the shared share,
/// * `score = μ_p + σ_p·g·√3 (+ label noise)`.
#[derive(Clone, Debug)]
pub struct Oracle {
    cfg: OracleConfig,
    u: Vec<f64>,
    v: Vec<f64>,
    /// `[d0, K]`
    m: Vec<f64>,
    /// `[K]`
    shared_dir: Vec<f64>,
    /// `K` linear maps over the flattened noise.
    features: Vec<Vec<f64>>,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(&[cfg.master_seed, TAG_HIDDEN]);
        let s0 = cfg.prompt_streams[0];
        let d0 = s0.d_tok;
        let k = cfg.feature_count;
        // e_p has per-coordinate variance 1/tok; scale so projections are unit-variance
        let proj_scale = (s0.tok as f64 / d0 as f64).sqrt();
        let u = normal_vec(&mut rng, d0, proj_scale);
        let v = normal_vec(&mut rng, d0, proj_scale);
        let m = normal_vec(&mut rng, d0 * k, proj_scale / (k as f64).sqrt());
        let shared_dir = normal_vec(&mut rng, k, 1.0 / (k as f64).sqrt());
        let [c, h, w] = cfg.noise_shape;
        let features = (0..k)
            .map(|_| {
                let kernel = normal_vec(&mut rng, c * 9, 1.0);
                conv_average_map(&kernel, c, h, w)
            })
            .collect();
        Ok(Self {
            cfg,
            u,
            v,
            m,
            shared_dir,
            features,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn digest(&self) -> String {
        self.cfg.digest()
    }

    pub fn prompt_feature(&self, prompt: &PromptEmbedding) -> Vec<f64> {
        let s = &prompt.streams()[0];
        let (tok, d) = s.dims2().expect("checked stream");
        let mut e = vec![0.0; d];
        for row in s.data().chunks_exact(d) {
            e.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        e.iter_mut().for_each(|a| *a /= tok as f64);
        e
    }

    /// Ground-truth `(μ_p, σ_p)` of the prompt's score distribution.
    pub fn moments(&self, prompt: &PromptEmbedding) -> (f64, f64) {
        let e = self.prompt_feature(prompt);
        let a: f64 = self.u.iter().zip(&e).map(|(x, y)| x * y).sum();
        let b: f64 = self.v.iter().zip(&e).map(|(x, y)| x * y).sum();
        let mu = self.cfg.base_mean + self.cfg.mean_spread * a.tanh();
        let sigma = self.cfg.sd_base + self.cfg.sd_spread / (1.0 + (-b).exp());
        (mu, sigma)
    }

    pub fn noise_features(&self, noise: &NoiseTensor) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| f.iter().zip(noise.tensor().data()).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Latent position `g ∈ (−1, 1)` of this noise within the prompt's distribution.
    pub fn latent(&self, prompt: &PromptEmbedding, noise: &NoiseTensor) -> f64 {
        let e = self.prompt_feature(prompt);
        let f = self.noise_features(noise);
        let k = self.cfg.feature_count;
        let mut inter = 0.0;
        for (i, ei) in e.iter().enumerate() {
            for (j, fj) in f.iter().enumerate() {
                inter += ei * self.m[i * k + j] * fj;
            }
        }
        let shared: f64 = self.shared_dir.iter().zip(&f).map(|(a, b)| a * b).sum();
        let lam = self.cfg.shared_noise_share;
        ((1.0 - lam).sqrt() * inter + lam.sqrt() * shared).tanh()
    }

    /// Noise-free score.
    pub fn true_score(&self, prompt: &PromptEmbedding, noise: &NoiseTensor) -> f64 {
        let (mu, sigma) = self.moments(prompt);
        mu + sigma * self.latent(prompt, noise) * 3f64.sqrt()
    }

    pub fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> PromptEmbedding {
        let streams = self
            .cfg
            .prompt_streams
            .iter()
            .map(|s| {
                Tensor::new(vec![s.tok, s.d_tok], normal_vec(rng, s.tok * s.d_tok, 1.0))
                    .expect("finite normal draws")
            })
            .collect();
        PromptEmbedding::new(streams).expect("matrix streams")
    }

    /// Prompt `p` of the dataset generated with `seed`.
    pub fn prompt(&self, seed: u64, p: u64) -> PromptEmbedding {
        self.sample_prompt(&mut rng_for(&[seed, TAG_PROMPT, p]))
    }

    /// Noise `j` of prompt `p` of the dataset generated with `seed`.
    pub fn noise(&self, seed: u64, p: u64, j: u64) -> NoiseTensor {
        let p = if self.cfg.shared_noises { 0 } else { p };
        sample_noise(&mut rng_for(&[seed, TAG_NOISE, p, j]), self.cfg.noise_shape)
    }
}

/// Flattened weights `α` with `⟨α, X⟩ = mean over positions of (kernel ⋆ X)`
/// (3×3, padding 1), scaled to unit norm so that `⟨α, X⟩ ~ N(0, 1)`.
fn conv_average_map(kernel: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (y, x) = (oy + ky, ox + kx);
                        if y < 1 || x < 1 || y - 1 >= h || x - 1 >= w {
                            continue;
                        }
                        alpha[(ch * h + y - 1) * w + x - 1] += kernel[(ch * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
    }
    let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        alpha.iter_mut().for_each(|a| *a /= norm);
    }
    alpha
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Population mean and standard deviation.
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(DataError::Usage("cannot fit normalization on no scores".into()));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(DataError::DegenerateVariance(
                "training scores are constant".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn zscore_fit(train: &Dataset) -> Result<NormStats> {
    NormStats::fit(&train.scores())
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub prompt_id: u64,
    pub prompt: Arc<PromptEmbedding>,
    pub noise: NoiseTensor,
    pub score_raw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub prompt_streams: Vec<StreamDims>,
    pub noise_shape: [usize; 3],
    pub prompt_count: usize,
    pub noises_per_prompt: usize,
    pub oracle_digest: String,
    pub oracle: Option<OracleConfig>,
    pub generation_seed: Option<u64>,
    pub norm: Option<NormStats>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: Manifest,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates shapes, finiteness, per-prompt embedding identity and the
    /// prompt count recorded in the manifest.
    pub fn new(manifest: Manifest, samples: Vec<Sample>) -> Result<Self> {
        let mut first: HashMap<u64, usize> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.prompt.streams().len() != manifest.prompt_streams.len() {
                return Err(DataError::Invalid(format!("sample {i}: wrong stream count")));
            }
            for (t, d) in s.prompt.streams().iter().zip(&manifest.prompt_streams) {
                if t.shape() != [d.tok, d.d_tok] {
                    return Err(DataError::Invalid(format!(
                        "sample {i}: stream shape {:?}",
                        t.shape()
                    )));
                }
            }
            if s.noise.tensor().shape() != manifest.noise_shape {
                return Err(DataError::Invalid(format!(
                    "sample {i}: noise shape {:?}",
                    s.noise.tensor().shape()
                )));
            }
            if !s.score_raw.is_finite() {
                return Err(DataError::Invalid(format!("sample {i}: score {}", s.score_raw)));
            }
            match first.get(&s.prompt_id) {
                Some(&j) => {
                    if !Arc::ptr_eq(&samples[j].prompt, &s.prompt)
                        && *samples[j].prompt != *s.prompt
                    {
                        return Err(DataError::Invalid(format!(
                            "prompt {} has differing embeddings",
                            s.prompt_id
                        )));
                    }
                }
                None => {
                    first.insert(s.prompt_id, i);
                }
            }
        }
        if first.len() != manifest.prompt_count {
            return Err(DataError::Invalid(format!(
                "manifest lists {} prompts, samples have {}",
                manifest.prompt_count,
                first.len()
            )));
        }
        Ok(Self { manifest, samples })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score_raw).collect()
    }

    /// Prompt ids in order of first appearance.
    pub fn prompt_ids(&self) -> Vec<u64> {
        self.groups().into_iter().map(|(p, _)| p).collect()
    }

    /// `(prompt id, sample indices)` in order of first appearance.
    pub fn groups(&self) -> Vec<(u64, Vec<usize>)> {
        let mut pos: HashMap<u64, usize> = HashMap::new();
        let mut out: Vec<(u64, Vec<usize>)> = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            match pos.get(&s.prompt_id) {
                Some(&k) => out[k].1.push(i),
                None => {
                    pos.insert(s.prompt_id, out.len());
                    out.push((s.prompt_id, vec![i]));
                }
            }
        }
        out
    }

    /// The samples of the given prompts, in dataset order.
    pub fn subset(&self, prompt_ids: &BTreeSet<u64>) -> Dataset {
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| prompt_ids.contains(&s.prompt_id))
            .cloned()
            .collect();
        let present: BTreeSet<u64> = samples.iter().map(|s| s.prompt_id).collect();
        Dataset {
            manifest: Manifest {
                prompt_count: present.len(),
                ..self.manifest.clone()
            },
            samples,
        }
    }

    /// Replaces every score, keeping all inputs (used for label-shuffle controls).
    pub fn with_scores(&self, scores: &[f64]) -> Result<Dataset> {
        if scores.len() != self.samples.len() {
            return Err(DataError::Usage("one score per sample required".into()));
        }
        let samples = self
            .samples
            .iter()
            .zip(scores)
            .map(|(s, &v)| Sample {
                score_raw: v,
                ..s.clone()
            })
            .collect();
        Dataset::new(self.manifest.clone(), samples)
    }

    /// SHA-256 over the manifest shape fields and every stored value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let head = serde_json::to_string(&(
            &self.manifest.prompt_streams,
            self.manifest.noise_shape,
            &self.manifest.oracle_digest,
        ))
        .expect("plain data serializes");
        h.update(head.as_bytes());
        let mut last: Option<u64> = None;
        for s in &self.samples {
            h.update(s.prompt_id.to_le_bytes());
            if last != Some(s.prompt_id) {
                for t in s.prompt.streams() {
                    t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
                }
                last = Some(s.prompt_id);
            }
            s.noise
                .tensor()
                .data()
                .iter()
                .for_each(|v| h.update(v.to_le_bytes()));
            h.update(s.score_raw.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Generates `prompt_count × noises_per_prompt` samples. Every prompt and
/// noise has its own derived seed, so generation parallelizes without
/// affecting the result.
pub fn oracle_generate(cfg: &OracleConfig, seed: u64) -> Result<Dataset> {
    let oracle = Oracle::new(cfg.clone())?;
    let per_prompt: Vec<Vec<Sample>> = (0..cfg.prompt_count as u64)
        .into_par_iter()
        .map(|p| {
            let prompt = Arc::new(oracle.prompt(seed, p));
            (0..cfg.noises_per_prompt as u64)
                .map(|j| {
                    let noise = oracle.noise(seed, p, j);
                    let mut label_rng = rng_for(&[seed, TAG_LABEL, p, j]);
                    let z: f64 = StandardNormal.sample(&mut label_rng);
                    let score_raw = oracle.true_score(&prompt, &noise) + cfg.label_noise_std * z;
                    Sample {
                        prompt_id: p,
                        prompt: prompt.clone(),
                        noise,
                        score_raw,
                    }
                })
                .collect()
        })
        .collect();
    let manifest = Manifest {
        prompt_streams: cfg.prompt_streams.clone(),
        noise_shape: cfg.noise_shape,
        prompt_count: cfg.prompt_count,
        noises_per_prompt: cfg.noises_per_prompt,
        oracle_digest: cfg.digest(),
        oracle: Some(cfg.clone()),
        generation_seed: Some(seed),
        norm: None,
    };
    Dataset::new(manifest, per_prompt.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Shuffles prompts with `seed` and partitions them; validation and test
/// counts are rounded (at least one prompt each) and training takes the rest.
pub fn split_by_prompt(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Split> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(r.is_finite() && *r > 0.0))
        || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::Config(format!(
            "split ratios must be positive and sum to 1, got {parts:?}"
        )));
    }
    let mut ids = ds.prompt_ids();
    let total = ids.len();
    if total < 3 {
        return Err(DataError::Usage(format!(
            "{total} prompts cannot fill three splits"
        )));
    }
    ids.shuffle(&mut rng_for(&[seed, 0x5911]));
    let n_val = ((ratios.val * total as f64).round() as usize).max(1);
    let n_test = ((ratios.test * total as f64).round() as usize).max(1);
    if n_val + n_test >= total {
        return Err(DataError::Usage(format!(
            "{total} prompts leave no training prompts"
        )));
    }
    let n_train = total - n_val - n_test;
    let set = |s: &[u64]| s.iter().copied().collect::<BTreeSet<u64>>();
    Ok(Split {
        train: ds.subset(&set(&ids[..n_train])),
        val: ds.subset(&set(&ids[n_train..n_train + n_val])),
        test: ds.subset(&set(&ids[n_train + n_val..])),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub prompt_ids: Vec<u64>,
    /// Sample indices into the split, grouped by prompt.
    pub samples: Vec<usize>,
}

/// Shuffles the prompt order with `(seed, epoch)` and packs `k` consecutive
/// prompts, with all of their samples, into each batch.
pub fn grouped_batches(split: &Dataset, k: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if k == 0 {
        return Err(DataError::Config("group size k must be positive".into()));
    }
    let mut groups = split.groups();
    groups.shuffle(&mut rng_for(&[seed, 0xba7c, epoch]));
    Ok(groups
        .chunks(k)
        .map(|chunk| Batch {
            prompt_ids: chunk.iter().map(|(p, _)| *p).collect(),
            samples: chunk.iter().flat_map(|(_, s)| s.iter().copied()).collect(),
        })
        .collect())
}
