//! AdamW, gradient clipping, the plateau scheduler, the training loop and the
//! evaluation metric suites.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{
    grouped_batches, rng_for, split_by_prompt, zscore_fit, DataError, Dataset, NormStats, Oracle,
    SplitRatios,
};
use crate::networks::{NetworkError, NoiseTensor, PainePredictor, ParamSet, PredictorConfig, PromptEmbedding};
use crate::ranking::{batch_loss, mae, ndcg_at_k, spearman, LossConfig, RankingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Improvements smaller than this do not reset the plateau and early-stop counters.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub loss: LossConfig,
    pub group_k: usize,
    pub seed: u64,
    /// Probability of replacing a sample's noise encoding by zeros during training.
    pub mask_prob: f64,
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-8,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clip_norm: 1.0,
            max_epochs: 100,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 15,
            loss: LossConfig::default(),
            group_k: 12,
            seed: 0,
            mask_prob: 0.0,
            split: SplitRatios::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps >= 0.0 && self.clip_norm > 0.0) {
            return bad("weight_decay and adam_eps must be non-negative, clip_norm positive");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be at least 1");
        }
        if self.max_epochs == 0 || self.group_k == 0 {
            return bad("max_epochs and group_k must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob must lie in [0, 1]");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW step: `θ ← θ·(1 − lr·wd)`, then `θ ← θ − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape() || state.m[i].len() != g.len() {
            return Err(TrainError::Shape(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                params.tensors()[i].shape()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] *= decay;
            if m_hat != 0.0 {
                p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
    if !params.all_finite() {
        return Err(TrainError::Numeric(format!(
            "non-finite parameter after step {}",
            state.t
        )));
    }
    Ok(())
}

/// Rescales all gradients so their joint ℓ2 norm is at most `max_norm`;
/// returns the factor applied.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(TrainError::Numeric(format!("gradient {i} is not finite")));
        }
        sq += g.sum_squares();
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok(scale)
}

/// Halves (by `factor`) the learning rate after `patience` consecutive
/// epochs without a strict improvement of the validation SRCC.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauState {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_srcc: f64) -> f64 {
        if improves(self.best, val_srcc) {
            self.best = Some(val_srcc);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_srcc: f64) -> bool {
        if improves(self.best, val_srcc) {
            self.best = Some(val_srcc);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.bad_epochs >= self.patience
    }
}

fn improves(best: Option<f64>, value: f64) -> bool {
    match best {
        None => true,
        Some(b) => value > b + IMPROVEMENT_TOL,
    }
}

/// Anything that scores (prompt, noise) pairs in raw score units.
pub trait ScorePredictor: Sync {
    fn score_raw(&self, prompt: &PromptEmbedding, noises: &[&NoiseTensor]) -> Result<Vec<f64>>;
    fn prior_raw(&self, prompt: &PromptEmbedding) -> Result<f64>;
}

/// A predictor plus the normalization needed to report raw units.
#[derive(Clone, Copy, Debug)]
pub struct NormalizedModel<'a> {
    pub model: &'a PainePredictor,
    pub norm: NormStats,
}

impl ScorePredictor for NormalizedModel<'_> {
    fn score_raw(&self, prompt: &PromptEmbedding, noises: &[&NoiseTensor]) -> Result<Vec<f64>> {
        Ok(self
            .model
            .predict_many(prompt, noises)?
            .into_iter()
            .map(|z| self.norm.invert(z))
            .collect())
    }

    fn prior_raw(&self, prompt: &PromptEmbedding) -> Result<f64> {
        Ok(self.norm.invert(self.model.predict_prior(prompt)?))
    }
}

/// The noise-free oracle used as a predictor: an upper bound for every metric.
impl ScorePredictor for Oracle {
    fn score_raw(&self, prompt: &PromptEmbedding, noises: &[&NoiseTensor]) -> Result<Vec<f64>> {
        Ok(noises.iter().map(|n| self.true_score(prompt, n)).collect())
    }

    fn prior_raw(&self, prompt: &PromptEmbedding) -> Result<f64> {
        Ok(self.moments(prompt).0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_srcc: f64,
    pub dataset_digest: String,
    pub oracle_digest: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PainePredictor,
    pub norm: NormStats,
    pub train: TrainConfig,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn scorer(&self) -> NormalizedModel<'_> {
        NormalizedModel {
            model: &self.model,
            norm: self.norm,
        }
    }

    /// SHA-256 over parameter names and their f32 values plus the normalization.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.model.params().iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        h.update(self.norm.mean.to_le_bytes());
        h.update(self.norm.std.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// The train/val/test partition this checkpoint was trained with.
    pub fn split(&self, ds: &Dataset) -> Result<crate::data::Split> {
        Ok(split_by_prompt(ds, self.train.split, self.train.seed)?)
    }
}

impl ScorePredictor for Checkpoint {
    fn score_raw(&self, prompt: &PromptEmbedding, noises: &[&NoiseTensor]) -> Result<Vec<f64>> {
        self.scorer().score_raw(prompt, noises)
    }

    fn prior_raw(&self, prompt: &PromptEmbedding) -> Result<f64> {
        self.scorer().prior_raw(prompt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    /// 0 when predictions or targets are constant (see `global_degenerate`).
    pub srcc_global: f64,
    pub srcc_macro: f64,
    pub mae_raw: f64,
    pub ndcg3_macro: f64,
    pub global_degenerate: bool,
    /// Prompts left out of the macro SRCC (fewer than 2 samples or constant series).
    pub skipped_prompts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorMetrics {
    pub srcc: f64,
    pub mae: f64,
    pub mape: f64,
}

/// Raw-unit predictions for every sample, grouped by prompt in split order.
fn predict_groups<P: ScorePredictor + ?Sized>(
    model: &P,
    split: &Dataset,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let groups = split.groups();
    groups
        .par_iter()
        .map(|(_, idx)| {
            let samples = split.samples();
            let noises: Vec<&NoiseTensor> = idx.iter().map(|&i| &samples[i].noise).collect();
            let preds = model.score_raw(&samples[idx[0]].prompt, &noises)?;
            let targets = idx.iter().map(|&i| samples[i].score_raw).collect();
            Ok((preds, targets))
        })
        .collect()
}

/// Spearman, with degenerate inputs mapped to `None`.
fn spearman_opt(p: &[f64], t: &[f64]) -> Result<Option<f64>> {
    match spearman(p, t) {
        Ok(v) => Ok(Some(v)),
        Err(RankingError::DegenerateVariance(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn evaluate<P: ScorePredictor + ?Sized>(model: &P, split: &Dataset) -> Result<MetricBundle> {
    if split.is_empty() {
        return Err(TrainError::Usage("cannot evaluate an empty split".into()));
    }
    let groups = predict_groups(model, split)?;
    let all_p: Vec<f64> = groups.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let all_t: Vec<f64> = groups.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let global = spearman_opt(&all_p, &all_t)?;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let mut ndcg_sum = 0.0;
    for (p, t) in &groups {
        if p.len() >= 2 {
            if let Some(r) = spearman_opt(p, t)? {
                macro_sum += r;
                macro_n += 1;
            }
        }
        ndcg_sum += ndcg_at_k(p, t, 3)?;
    }
    Ok(MetricBundle {
        srcc_global: global.unwrap_or(0.0),
        srcc_macro: if macro_n > 0 {
            macro_sum / macro_n as f64
        } else {
            0.0
        },
        mae_raw: mae(&all_p, &all_t)?,
        ndcg3_macro: ndcg_sum / groups.len() as f64,
        global_degenerate: global.is_none(),
        skipped_prompts: groups.len() - macro_n,
    })
}

/// Prompt-level accuracy of the masked-noise prior against each prompt's mean score.
pub fn evaluate_prior<P: ScorePredictor + ?Sized>(model: &P, split: &Dataset) -> Result<PriorMetrics> {
    let groups = split.groups();
    if groups.len() < 2 {
        return Err(TrainError::Usage(format!(
            "prior evaluation needs at least 2 prompts, split has {}",
            groups.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = groups
        .par_iter()
        .map(|(_, idx)| {
            let s = split.samples();
            let truth = idx.iter().map(|&i| s[i].score_raw).sum::<f64>() / idx.len() as f64;
            Ok((model.prior_raw(&s[idx[0]].prompt)?, truth))
        })
        .collect::<Result<_>>()?;
    let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    if truth.iter().any(|t| *t == 0.0) {
        return Err(TrainError::Numeric("a prompt's mean score is zero; MAPE undefined".into()));
    }
    let n = pairs.len() as f64;
    let mape = pairs.iter().map(|(p, t)| ((p - t) / t).abs()).sum::<f64>() / n * 100.0;
    Ok(PriorMetrics {
        srcc: spearman_opt(&pred, &truth)?.unwrap_or(0.0),
        mae: mae(&pred, &truth)?,
        mape,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricBundle,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_srcc: f64,
    pub stop_reason: StopReason,
}

struct GroupPass {
    graph: Graph,
    preds: Var,
    params: Vec<Var>,
    values: Vec<f64>,
}

/// Builds the forward graph for one prompt's samples.
fn forward_group(
    model: &PainePredictor,
    split: &Dataset,
    idx: &[usize],
    masked: &[bool],
) -> Result<GroupPass> {
    let samples = split.samples();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let prompt = bound.encode_prompt(&mut g, &samples[idx[0]].prompt)?;
    let mut outs = Vec::with_capacity(idx.len());
    for (&i, &m) in idx.iter().zip(masked) {
        let n = if m {
            bound.masked_noise(&mut g)
        } else {
            bound.encode_noise(&mut g, &samples[i].noise)?
        };
        outs.push(bound.score(&mut g, prompt, n)?);
    }
    let params = bound.param_vars().to_vec();
    let preds = g.concat_rows(&outs).map_err(NetworkError::from)?;
    let values = g.value(preds).data().to_vec();
    Ok(GroupPass {
        graph: g,
        preds,
        params,
        values,
    })
}

fn backward_group(mut pass: GroupPass, upstream: &[f64], params: &ParamSet) -> Result<Vec<Tensor>> {
    let seed = Tensor::new(vec![upstream.len(), 1], upstream.to_vec())
        .map_err(|e| TrainError::Numeric(e.to_string()))?;
    pass.graph
        .backward_with(pass.preds, &seed)
        .map_err(NetworkError::from)?;
    Ok(pass
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| {
            pass.graph
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// One optimizer step on a batch; returns the batch loss value.
fn train_batch(
    model: &mut PainePredictor,
    state: &mut OptimState,
    split: &Dataset,
    norm: &NormStats,
    groups: &[Vec<usize>],
    masks: &[Vec<bool>],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let passes: Vec<GroupPass> = groups
        .par_iter()
        .zip(masks.par_iter())
        .map(|(idx, m)| forward_group(model, split, idx, m))
        .collect::<Result<_>>()?;
    let samples = split.samples();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut ids = Vec::new();
    for (gi, (p, idx)) in passes.iter().zip(groups).enumerate() {
        preds.extend_from_slice(&p.values);
        targets.extend(idx.iter().map(|&i| norm.apply(samples[i].score_raw)));
        ids.extend(std::iter::repeat_n(gi as u64, idx.len()));
    }
    let loss = batch_loss(&preds, &targets, &ids, &cfg.loss)?;
    let mut offsets = Vec::with_capacity(groups.len());
    let mut at = 0;
    for idx in groups {
        offsets.push(at);
        at += idx.len();
    }
    let params = model.params();
    let per_group: Vec<Vec<Tensor>> = passes
        .into_par_iter()
        .zip(offsets.par_iter().zip(groups.par_iter()))
        .map(|(pass, (&o, idx))| backward_group(pass, &loss.grad[o..o + idx.len()], params))
        .collect::<Result<_>>()?;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for group_grads in &per_group {
        for (acc, g) in grads.iter_mut().zip(group_grads) {
            acc.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
    }
    clip_global_norm(&mut grads, cfg.clip_norm)?;
    adamw_step(model.params_mut(), &grads, state, lr, cfg)?;
    Ok(loss.value)
}

pub fn train(
    dataset: &Dataset,
    pred_cfg: &PredictorConfig,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    train_with(dataset, pred_cfg, train_cfg, |_| {})
}

/// Training loop; `on_epoch` sees every epoch record as soon as it is complete.
pub fn train_with(
    dataset: &Dataset,
    pred_cfg: &PredictorConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    pred_cfg.validate()?;
    let m = dataset.manifest();
    if m.prompt_streams != pred_cfg.prompt_streams || m.noise_shape != pred_cfg.noise_shape {
        return Err(TrainError::Shape(
            "dataset shapes do not match the predictor config".into(),
        ));
    }
    let split = split_by_prompt(dataset, cfg.split, cfg.seed)?;
    let norm = zscore_fit(&split.train)?;
    let mut model = PainePredictor::new(pred_cfg.clone(), cfg.seed)?;
    let mut state = OptimState::new(model.params());
    let mut plateau = PlateauState::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut early = EarlyStopState::new(cfg.early_stop_patience);
    let mut best: Option<(usize, f64, PainePredictor)> = None;
    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let group_of: HashMap<u64, Vec<usize>> = split.train.groups().into_iter().collect();
    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        let batches = grouped_batches(&split.train, cfg.group_k, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let groups: Vec<Vec<usize>> = batch
                .prompt_ids
                .iter()
                .map(|p| group_of[p].clone())
                .collect();
            let masks: Vec<Vec<bool>> = groups
                .iter()
                .enumerate()
                .map(|(gi, idx)| {
                    if cfg.mask_prob == 0.0 {
                        return vec![false; idx.len()];
                    }
                    let mut rng = rng_for(&[cfg.seed, 0x3a5c, epoch as u64, bi as u64, gi as u64]);
                    idx.iter().map(|_| rng.random::<f64>() < cfg.mask_prob).collect()
                })
                .collect();
            loss_sum += train_batch(
                &mut model, &mut state, &split.train, &norm, &groups, &masks, lr, cfg,
            )?;
        }
        let val = evaluate(
            &NormalizedModel {
                model: &model,
                norm,
            },
            &split.val,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val,
            lr,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| val.srcc_global > b.1) {
            best = Some((epoch, val.srcc_global, model.clone()));
        }
        plateau.step(val.srcc_global);
        if early.step(val.srcc_global) {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, best_val_srcc, best_model) = best.expect("at least one epoch runs");
    let checkpoint = Checkpoint {
        model: best_model,
        norm,
        train: cfg.clone(),
        provenance: Provenance {
            seed: cfg.seed,
            best_epoch,
            best_val_srcc,
            dataset_digest: dataset.digest(),
            oracle_digest: m.oracle_digest.clone(),
        },
    };
    Ok((
        checkpoint,
        TrainReport {
            history,
            best_epoch,
            best_val_srcc,
            stop_reason,
        },
    ))
}
