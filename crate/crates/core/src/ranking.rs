//! Ranks, differentiable soft ranks and the ranking losses and metrics built on them.
//!
//! Soft ranks are the Euclidean projection of `s / eps` onto the permutahedron
//! spanned by `(1, …, n)`. The projection reduces to one sort plus a
//! pool-adjacent-violators pass, and its Jacobian is block-constant over the
//! pools, so the backward rule is a per-pool centering of the upstream gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Fnv;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankingError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
}

pub type Result<T> = std::result::Result<T, RankingError>;

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(RankingError::Numeric(format!("{what}[{i}] = {}", xs[i]))),
        None => Ok(()),
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(RankingError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Indices ordering `s` from largest to smallest; ties keep index order.
pub fn descending_order(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx
}

/// Ascending ranks in `1..=n`; tied values share the mean of their positions.
pub fn hard_rank(s: &[f64]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(RankingError::Usage("cannot rank an empty list".into()));
    }
    check_finite(s, "input")?;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    let mut ranks = vec![0.0; s.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s[idx[j + 1]] == s[idx[i]] {
            j += 1;
        }
        // positions i..=j are 0-based, ranks are 1-based
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Soft ranks of one vector, with what the backward rule needs.
#[derive(Clone, Debug)]
pub struct SoftRank {
    pub values: Vec<f64>,
    eps: f64,
    /// `order[k]` is the input index at descending position `k`.
    order: Vec<usize>,
    /// Half-open pool ranges over descending positions.
    pools: Vec<(usize, usize)>,
}

impl SoftRank {
    /// Vector-Jacobian product: gradient w.r.t. the scores given the
    /// gradient w.r.t. the soft ranks.
    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for &(a, b) in &self.pools {
            let members = &self.order[a..b];
            let mean = members.iter().map(|&i| upstream[i]).sum::<f64>() / (b - a) as f64;
            for &i in members {
                out[i] = (upstream[i] - mean) / self.eps;
            }
        }
        out
    }

    /// Identifies the sort order and pooling pattern; the map is affine
    /// within one piece.
    pub fn piece(&self) -> u64 {
        let mut h = Fnv::new();
        self.order.iter().for_each(|&i| h.write_u64(i as u64));
        self.pools.iter().for_each(|&(_, b)| h.write_u64(b as u64));
        h.finish()
    }

    pub fn pool_count(&self) -> usize {
        self.pools.len()
    }
}

/// Projection of `s / eps` onto the permutahedron of `(1, …, n)`, oriented so
/// that larger scores receive larger ranks. Small `eps` approaches hard
/// ranks; large `eps` collapses every rank to `(n + 1) / 2`.
pub fn soft_rank(s: &[f64], eps: f64) -> Result<SoftRank> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(RankingError::Config(format!("soft rank eps must be positive, got {eps}")));
    }
    if s.is_empty() {
        return Err(RankingError::Usage("cannot rank an empty list".into()));
    }
    check_finite(s, "input")?;
    let n = s.len();
    let order = descending_order(s);
    // measured from the maximum
    let top = s[order[0]];
    let z: Vec<f64> = order.iter().map(|&i| (s[i] - top) / eps).collect();
    // isotonic (non-increasing) fit of z - (n, n-1, …, 1)
    let mut blocks: Vec<(f64, usize, usize)> = Vec::with_capacity(n); // (sum, start, end)
    for (k, &zk) in z.iter().enumerate() {
        let mut cur = (zk - (n - k) as f64, k, k + 1);
        while let Some(&(psum, pstart, pend)) = blocks.last() {
            let pmean = psum / (pend - pstart) as f64;
            let cmean = cur.0 / (cur.2 - cur.1) as f64;
            if pmean > cmean {
                break;
            }
            blocks.pop();
            cur = (psum + cur.0, pstart, cur.2);
        }
        blocks.push(cur);
    }
    let mut values = vec![0.0; n];
    let mut pools = Vec::with_capacity(blocks.len());
    for &(_, a, b) in &blocks {
        // z - mean(z - w) over the pool, measured from the pool's first member
        let head = s[order[a]];
        let d: Vec<f64> = order[a..b].iter().map(|&i| s[i] - head).collect();
        let d_mean = d.iter().sum::<f64>() / d.len() as f64;
        let w_mean = n as f64 - (a + b - 1) as f64 / 2.0;
        for (&i, di) in order[a..b].iter().zip(&d) {
            values[i] = (di - d_mean) / eps + w_mean;
        }
        pools.push((a, b));
    }
    Ok(SoftRank {
        values,
        eps,
        order,
        pools,
    })
}

/// Value and gradient (w.r.t. predictions) of a differentiable correlation.
#[derive(Clone, Debug)]
pub struct Srcc {
    pub value: f64,
    pub grad: Vec<f64>,
    pub piece: u64,
}

/// Pearson correlation between soft ranks of `pred` and hard ranks of `target`.
/// Targets are constants, so the gradient only flows into `pred`.
///
/// Fails with [`RankingError::DegenerateVariance`] for groups of fewer than
/// two items or with constant targets; callers skip such groups.
pub fn srcc_soft(pred: &[f64], target: &[f64], eps: f64) -> Result<Srcc> {
    check_len(pred, target)?;
    if pred.len() < 2 {
        return Err(RankingError::DegenerateVariance("fewer than two items".into()));
    }
    let tr = hard_rank(target)?;
    let tm = tr.iter().sum::<f64>() / tr.len() as f64;
    let tc: Vec<f64> = tr.iter().map(|t| t - tm).collect();
    let nt = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nt == 0.0 {
        return Err(RankingError::DegenerateVariance("constant targets".into()));
    }
    let sr = soft_rank(pred, eps)?;
    let rm = sr.values.iter().sum::<f64>() / sr.values.len() as f64;
    let rc: Vec<f64> = sr.values.iter().map(|r| r - rm).collect();
    let nr2: f64 = rc.iter().map(|v| v * v).sum();
    if nr2 <= f64::MIN_POSITIVE {
        // all predictions identical: correlation undefined, treated as 0 with no signal
        return Ok(Srcc {
            value: 0.0,
            grad: vec![0.0; pred.len()],
            piece: sr.piece(),
        });
    }
    let nr = nr2.sqrt();
    let rho = rc.iter().zip(&tc).map(|(a, b)| a * b).sum::<f64>() / (nr * nt);
    let d_rank: Vec<f64> = rc
        .iter()
        .zip(&tc)
        .map(|(r, t)| t / (nr * nt) - rho * r / nr2)
        .collect();
    Ok(Srcc {
        value: rho,
        grad: sr.vjp(&d_rank),
        piece: sr.piece(),
    })
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    if pred.is_empty() {
        return Err(RankingError::Usage("mean absolute error of nothing".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "srcc")]
    Srcc,
    #[serde(rename = "lambdarank")]
    LambdaRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub soft_rank_eps: f64,
    pub ndcg_k: usize,
    pub lambdarank_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::Srcc,
            soft_rank_eps: 1e-2,
            ndcg_k: 3,
            lambdarank_sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.soft_rank_eps > 0.0) {
            return Err(RankingError::Config("soft_rank_eps must be positive".into()));
        }
        if self.ndcg_k == 0 {
            return Err(RankingError::Config("ndcg_k must be at least 1".into()));
        }
        if !(self.lambdarank_sigma > 0.0) {
            return Err(RankingError::Config("lambdarank_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Batch objective with its gradient w.r.t. every prediction.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Differentiable value whose gradient is `grad`.
    pub value: f64,
    pub grad: Vec<f64>,
    /// Value for logs: equals `value` for the SRCC variant and
    /// `MAE + 1 − mean NDCG@k` for LambdaRank.
    pub report: f64,
    pub groups: usize,
    pub skipped_groups: usize,
    pub piece: u64,
}

/// Sample indices per group, groups in order of first appearance.
pub fn group_indices(group_ids: &[u64]) -> Vec<Vec<usize>> {
    let mut seen: Vec<u64> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &g) in group_ids.iter().enumerate() {
        match seen.iter().position(|&s| s == g) {
            Some(k) => groups[k].push(i),
            None => {
                seen.push(g);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

fn is_degenerate(target: &[f64]) -> bool {
    target.len() < 2 || target.iter().all(|&t| t == target[0])
}

/// `MAE + mean over groups of (1 − srcc_soft)` or `MAE + LambdaRank surrogate`.
///
/// The LambdaRank surrogate is the |ΔNDCG|-weighted pairwise logistic loss;
/// with the pair weights held fixed its gradient is exactly
/// [`lambdarank_grads`], averaged over groups.
pub fn batch_loss(
    preds: &[f64],
    targets: &[f64],
    group_ids: &[u64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_len(preds, targets)?;
    if preds.len() != group_ids.len() {
        return Err(RankingError::LengthMismatch(preds.len(), group_ids.len()));
    }
    if preds.is_empty() {
        return Err(RankingError::Usage("empty batch".into()));
    }
    check_finite(preds, "prediction")?;
    check_finite(targets, "target")?;
    let n = preds.len() as f64;
    let mae_value = mae(preds, targets)?;
    let mut grad: Vec<f64> = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let groups = group_indices(group_ids);
    let valid: Vec<&Vec<usize>> = groups
        .iter()
        .filter(|g| !is_degenerate(&g.iter().map(|&i| targets[i]).collect::<Vec<_>>()))
        .collect();
    let skipped = groups.len() - valid.len();
    let mut h = Fnv::new();
    let mut rank_value = 0.0;
    let mut rank_report = 0.0;
    let gcount = valid.len() as f64;
    for g in &valid {
        let p: Vec<f64> = g.iter().map(|&i| preds[i]).collect();
        let t: Vec<f64> = g.iter().map(|&i| targets[i]).collect();
        match cfg.variant {
            LossVariant::Srcc => {
                let s = srcc_soft(&p, &t, cfg.soft_rank_eps)?;
                rank_value += (1.0 - s.value) / gcount;
                for (&i, gi) in g.iter().zip(&s.grad) {
                    grad[i] -= gi / gcount;
                }
                h.write_u64(s.piece);
            }
            LossVariant::LambdaRank => {
                let sur = lambdarank_surrogate(&p, &t, cfg.ndcg_k, cfg.lambdarank_sigma)?;
                rank_value += sur.value / gcount;
                rank_report += (1.0 - ndcg_at_k(&p, &t, cfg.ndcg_k)?) / gcount;
                for (&i, gi) in g.iter().zip(&sur.grad) {
                    grad[i] += gi / gcount;
                }
                descending_order(&p).iter().for_each(|&i| h.write_u64(i as u64));
            }
        }
    }
    let value = mae_value + rank_value;
    let report = match cfg.variant {
        LossVariant::Srcc => value,
        LossVariant::LambdaRank => mae_value + rank_report,
    };
    Ok(LossOutput {
        value,
        grad,
        report,
        groups: groups.len(),
        skipped_groups: skipped,
        piece: h.finish(),
    })
}

/// Relevance on `[0, 5]` by min-max scaling; constant targets map to 0.
pub fn scaled_relevance(target: &[f64]) -> Vec<f64> {
    let lo = target.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        target.iter().map(|t| 5.0 * (t - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; target.len()]
    }
}

fn discount(pos: usize, k: usize) -> f64 {
    if pos < k {
        1.0 / ((pos + 2) as f64).log2()
    } else {
        0.0
    }
}

fn ideal_dcg(gains: &[f64], k: usize) -> f64 {
    let mut sorted = gains.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().enumerate().map(|(p, g)| g * discount(p, k)).sum()
}

/// NDCG@k of the ordering induced by `pred`, with exp2 gains on
/// `[0, 5]`-scaled targets. A list without any gain scores 1.
pub fn ndcg_at_k(pred: &[f64], target: &[f64], k: usize) -> Result<f64> {
    check_len(pred, target)?;
    if k == 0 {
        return Err(RankingError::Config("ndcg cutoff must be at least 1".into()));
    }
    if pred.is_empty() {
        return Err(RankingError::Usage("ndcg of an empty list".into()));
    }
    check_finite(pred, "prediction")?;
    check_finite(target, "target")?;
    let gains: Vec<f64> = scaled_relevance(target).iter().map(|r| r.exp2() - 1.0).collect();
    let idcg = ideal_dcg(&gains, k);
    if idcg == 0.0 {
        return Ok(1.0);
    }
    let dcg: f64 = descending_order(pred)
        .iter()
        .enumerate()
        .map(|(p, &i)| gains[i] * discount(p, k))
        .sum();
    Ok(dcg / idcg)
}

struct Surrogate {
    value: f64,
    grad: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn lambdarank_surrogate(pred: &[f64], target: &[f64], k: usize, sigma: f64) -> Result<Surrogate> {
    check_len(pred, target)?;
    if pred.len() < 2 {
        return Err(RankingError::Usage("lambdarank needs at least two items".into()));
    }
    if k == 0 {
        return Err(RankingError::Config("ndcg cutoff must be at least 1".into()));
    }
    check_finite(pred, "prediction")?;
    check_finite(target, "target")?;
    let n = pred.len();
    let rel = scaled_relevance(target);
    let gains: Vec<f64> = rel.iter().map(|r| r.exp2() - 1.0).collect();
    let idcg = ideal_dcg(&gains, k);
    let mut grad = vec![0.0; n];
    if idcg == 0.0 {
        return Ok(Surrogate { value: 0.0, grad });
    }
    let mut pos = vec![0; n];
    for (p, &i) in descending_order(pred).iter().enumerate() {
        pos[i] = p;
    }
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if rel[i] <= rel[j] {
                continue;
            }
            let delta = ((gains[i] - gains[j]) * (discount(pos[i], k) - discount(pos[j], k))).abs()
                / idcg;
            let margin = sigma * (pred[i] - pred[j]);
            value += delta * softplus(-margin);
            let lambda = -sigma / (1.0 + margin.exp()) * delta;
            grad[i] += lambda;
            grad[j] -= lambda;
        }
    }
    Ok(Surrogate { value, grad })
}

/// LambdaRank gradients: for every pair with `rel_i > rel_j`,
/// `λ = −σ / (1 + exp(σ(s_i − s_j))) · |ΔNDCG@k(i ↔ j)|` is added to `i`
/// and subtracted from `j`.
pub fn lambdarank_grads(pred: &[f64], target: &[f64], k: usize, sigma: f64) -> Result<Vec<f64>> {
    Ok(lambdarank_surrogate(pred, target, k, sigma)?.grad)
}

/// Sample Pearson correlation. Either series being constant is an error.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    if x.len() < 2 {
        return Err(RankingError::Usage("pearson needs at least two pairs".into()));
    }
    check_finite(x, "x")?;
    check_finite(y, "y")?;
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return Err(RankingError::DegenerateVariance("constant series".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson on tie-averaged hard ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    pearson(&hard_rank(x)?, &hard_rank(y)?)
}
