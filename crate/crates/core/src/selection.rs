//! Noise selection, the masked-noise prompt prior and the score statistics suite.
//!
//! A prompt's score is read as `S = μ_p + ζ·σ_p`: the prompt fixes the location
//! `μ_p` and spread `σ_p` of its score distribution, and the noise only decides the
//! standardized position `ζ`. [`prompt_prior`] estimates `μ_p`; nothing estimates
//! `σ_p` or `ζ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::{mix_seed, rng_for, sample_noise, OracleConfig, Oracle};
use crate::networks::{NoiseTensor, PromptEmbedding};
use crate::ranking::{descending_order, pearson};
use crate::training::{Checkpoint, ScorePredictor, TrainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

const TAG_CANDIDATE: u64 = 0x5e1e;
const TAG_UPLIFT: u64 = 0x0b1f;

#[derive(Clone, Debug)]
pub struct SelectionRequest {
    pub prompt: PromptEmbedding,
    /// Candidates drawn.
    pub n: usize,
    /// Candidates returned.
    pub b: usize,
    pub seed: u64,
}

impl SelectionRequest {
    pub fn new(prompt: PromptEmbedding, n: usize, b: usize, seed: u64) -> Result<Self> {
        if b == 0 || n < b {
            return Err(SelectionError::Usage(format!(
                "need n >= b >= 1, got n={n} b={b}"
            )));
        }
        Ok(Self { prompt, n, b, seed })
    }
}

/// Candidate `index` of the stream for `seed`. Candidates do not depend on the
/// requested count, so runs with different `n` share prefixes.
pub fn candidate_noise(seed: u64, shape: [usize; 3], index: u64) -> NoiseTensor {
    sample_noise(&mut rng_for(&[seed, TAG_CANDIDATE, index]), shape)
}

#[derive(Clone, Debug)]
pub struct Selected {
    /// Position in the candidate stream.
    pub index: usize,
    pub noise: NoiseTensor,
    pub predicted_score_raw: f64,
}

#[derive(Clone, Debug)]
pub struct SelectionResult {
    /// Nonincreasing by predicted score.
    pub selected: Vec<Selected>,
    pub checkpoint_digest: String,
    pub seed: u64,
    pub n: usize,
}

/// Scores the first `n` candidates of the stream and returns the top `b`.
pub fn select_with<P: ScorePredictor + ?Sized>(
    model: &P,
    noise_shape: [usize; 3],
    req: &SelectionRequest,
) -> Result<Vec<Selected>> {
    let noises: Vec<NoiseTensor> = (0..req.n as u64)
        .into_par_iter()
        .map(|i| candidate_noise(req.seed, noise_shape, i))
        .collect();
    let refs: Vec<&NoiseTensor> = noises.iter().collect();
    let scores = model.score_raw(&req.prompt, &refs)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SelectionError::Numeric("non-finite predicted score".into()));
    }
    Ok(descending_order(&scores)
        .into_iter()
        .take(req.b)
        .map(|i| Selected {
            index: i,
            noise: noises[i].clone(),
            predicted_score_raw: scores[i],
        })
        .collect())
}

pub fn select_noises(ckpt: &Checkpoint, req: &SelectionRequest) -> Result<SelectionResult> {
    req.prompt
        .check(ckpt.model.config())
        .map_err(|e| SelectionError::Shape(e.to_string()))?;
    let selected = select_with(ckpt, ckpt.model.config().noise_shape, req)?;
    Ok(SelectionResult {
        selected,
        checkpoint_digest: ckpt.digest(),
        seed: req.seed,
        n: req.n,
    })
}

/// Estimate of the prompt's mean score `μ_p`, in raw units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub mu_hat: f64,
}

pub fn prompt_prior(ckpt: &Checkpoint, prompt: &PromptEmbedding) -> Result<PriorEstimate> {
    prompt
        .check(ckpt.model.config())
        .map_err(|e| SelectionError::Shape(e.to_string()))?;
    let mu_hat = ckpt.prior_raw(prompt)?;
    if !mu_hat.is_finite() {
        return Err(SelectionError::Numeric("non-finite prior".into()));
    }
    Ok(PriorEstimate { mu_hat })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub prompt_id: u64,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn distribution_stats(scores_by_prompt: &[(u64, Vec<f64>)]) -> Result<Vec<PromptStats>> {
    if scores_by_prompt.is_empty() {
        return Err(SelectionError::Usage("no prompts".into()));
    }
    scores_by_prompt
        .iter()
        .map(|(id, s)| {
            if s.is_empty() {
                return Err(SelectionError::Usage(format!("prompt {id} has no scores")));
            }
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            Ok(PromptStats {
                prompt_id: *id,
                count: s.len(),
                mean,
                std: var.sqrt(),
            })
        })
        .collect()
}

/// How strongly the prompt determines the score distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEffect {
    /// Standard deviation of per-prompt means across prompts.
    pub between_sd: f64,
    /// Root-mean-square standard error of a prompt's mean.
    pub within_se: f64,
    pub ratio: f64,
}

pub fn prompt_effect(stats: &[PromptStats]) -> Result<PromptEffect> {
    if stats.len() < 2 {
        return Err(SelectionError::Usage("need at least 2 prompts".into()));
    }
    let n = stats.len() as f64;
    let grand = stats.iter().map(|s| s.mean).sum::<f64>() / n;
    let between_sd = (stats.iter().map(|s| (s.mean - grand).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut se2 = 0.0;
    for s in stats {
        if s.count < 2 {
            return Err(SelectionError::Usage(format!(
                "prompt {} needs at least 2 scores",
                s.prompt_id
            )));
        }
        let c = s.count as f64;
        // unbiased variance of the sample, divided by the sample size
        se2 += s.std * s.std * c / (c - 1.0) / c;
    }
    let within_se = (se2 / n).sqrt();
    Ok(PromptEffect {
        between_sd,
        within_se,
        ratio: between_sd / within_se,
    })
}

/// Symmetric Pearson matrix; `None` marks pairs involving a constant series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PccMatrix {
    pub size: usize,
    pub values: Vec<Option<f64>>,
}

impl PccMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }

    pub fn undefined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

pub fn pcc_matrix(series: &[Vec<f64>]) -> Result<PccMatrix> {
    if series.len() < 2 {
        return Err(SelectionError::Usage("need at least 2 series".into()));
    }
    let len = series[0].len();
    if len < 2 {
        return Err(SelectionError::Usage("series need at least 2 values".into()));
    }
    if let Some(s) = series.iter().find(|s| s.len() != len) {
        return Err(SelectionError::Shape(format!(
            "series lengths differ: {} vs {len}",
            s.len()
        )));
    }
    let size = series.len();
    let mut values = vec![None; size * size];
    for i in 0..size {
        values[i * size + i] = Some(1.0);
        for j in i + 1..size {
            let r = pearson(&series[i], &series[j]).ok();
            values[i * size + j] = r;
            values[j * size + i] = r;
        }
    }
    Ok(PccMatrix { size, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftParams {
    pub n: usize,
    pub b: usize,
    pub trials: usize,
    pub seed: u64,
}

/// True-score outcome of one (prompt, trial) draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftTrial {
    pub prompt: usize,
    pub trial: usize,
    pub selected_true: f64,
    /// Expected true score of `b` candidates drawn uniformly without replacement.
    pub random_true: f64,
    pub best_true: f64,
    pub best_predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    pub params: UpliftParams,
    pub prompt_trials: usize,
    pub mean_selected_true: f64,
    pub mean_random_true: f64,
    pub mean_best_true: f64,
    pub mean_best_predicted: f64,
    /// `(selected − random) / (best − random)` over the means.
    pub recovered_fraction: f64,
    pub mean_uplift: f64,
    pub t_statistic: f64,
    /// One-sided paired t-test of selected over random.
    pub p_value: f64,
    pub trials: Vec<UpliftTrial>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Uplift of `model`'s choices measured against `oracle`'s noise-free scores.
pub fn uplift_with<P: ScorePredictor + ?Sized>(
    model: &P,
    oracle: &Oracle,
    prompts: &[PromptEmbedding],
    params: UpliftParams,
) -> Result<UpliftReport> {
    if params.b == 0 || params.n < params.b || params.trials == 0 || prompts.is_empty() {
        return Err(SelectionError::Usage(format!(
            "need n >= b >= 1, trials >= 1 and prompts, got n={} b={} trials={} prompts={}",
            params.n,
            params.b,
            params.trials,
            prompts.len()
        )));
    }
    let shape = oracle.config().noise_shape;
    let cells: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..params.trials).map(move |t| (p, t)))
        .collect();
    let trials: Vec<UpliftTrial> = cells
        .par_iter()
        .map(|&(p, t)| {
            let prompt = &prompts[p];
            let seed = mix_seed(&[params.seed, TAG_UPLIFT, p as u64, t as u64]);
            let noises: Vec<NoiseTensor> = (0..params.n as u64)
                .map(|i| candidate_noise(seed, shape, i))
                .collect();
            let refs: Vec<&NoiseTensor> = noises.iter().collect();
            let pred = model.score_raw(prompt, &refs)?;
            let truth: Vec<f64> = refs.iter().map(|n| oracle.true_score(prompt, n)).collect();
            if pred.iter().any(|v| !v.is_finite()) {
                return Err(SelectionError::Numeric("non-finite predicted score".into()));
            }
            let by_pred = descending_order(&pred);
            let by_truth = descending_order(&truth);
            let top = |order: &[usize]| {
                order[..params.b].iter().map(|&i| truth[i]).sum::<f64>() / params.b as f64
            };
            Ok(UpliftTrial {
                prompt: p,
                trial: t,
                selected_true: top(&by_pred),
                random_true: mean(&truth),
                best_true: top(&by_truth),
                best_predicted: pred[by_pred[0]],
            })
        })
        .collect::<Result<_>>()?;

    let col = |f: fn(&UpliftTrial) -> f64| trials.iter().map(f).collect::<Vec<_>>();
    let sel = col(|t| t.selected_true);
    let rnd = col(|t| t.random_true);
    let best = col(|t| t.best_true);
    let (m_sel, m_rnd, m_best) = (mean(&sel), mean(&rnd), mean(&best));
    let gap = m_best - m_rnd;
    if gap <= 0.0 {
        return Err(SelectionError::Numeric(
            "all candidates score equally; recovered fraction undefined".into(),
        ));
    }
    let diffs: Vec<f64> = sel.iter().zip(&rnd).map(|(s, r)| s - r).collect();
    let (t_statistic, p_value) = paired_t(&diffs);
    Ok(UpliftReport {
        params,
        prompt_trials: trials.len(),
        mean_selected_true: m_sel,
        mean_random_true: m_rnd,
        mean_best_true: m_best,
        mean_best_predicted: mean(&col(|t| t.best_predicted)),
        recovered_fraction: (m_sel - m_rnd) / gap,
        mean_uplift: mean(&diffs),
        t_statistic,
        p_value,
        trials,
    })
}

/// One-sided t-test that the mean difference is positive.
fn paired_t(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    if n < 2 {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(diffs);
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if m > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NAN, f64::NAN)
        };
    }
    let t = m / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    (t, dist.sf(t))
}

/// Uplift of a checkpoint, refusing oracles other than the one it was trained on.
pub fn selection_uplift(
    ckpt: &Checkpoint,
    oracle_cfg: &OracleConfig,
    prompts: &[PromptEmbedding],
    params: UpliftParams,
) -> Result<UpliftReport> {
    let digest = oracle_cfg.digest();
    if digest != ckpt.provenance.oracle_digest {
        return Err(SelectionError::Provenance(format!(
            "oracle digest {digest} does not match the checkpoint's {}",
            ckpt.provenance.oracle_digest
        )));
    }
    for p in prompts {
        p.check(ckpt.model.config())
            .map_err(|e| SelectionError::Shape(e.to_string()))?;
    }
    let oracle = Oracle::new(oracle_cfg.clone()).map_err(TrainError::from)?;
    uplift_with(ckpt, &oracle, prompts, params)
}
