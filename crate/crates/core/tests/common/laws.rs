//! Soft-rank laws measured over many random vectors.

use paine_core::ranking::{hard_rank, soft_rank};
use rand::Rng;

use super::rng;

#[derive(Clone, Debug, Default)]
pub struct SoftRankLaws {
    pub vectors: usize,
    /// Largest `|Σ r − n(n+1)/2|`.
    pub sum_err: f64,
    /// Largest distance of any rank outside `[1, n]`.
    pub bound_err: f64,
    /// Largest `|r − hard rank|` at a vanishing `eps`.
    pub limit_err: f64,
    /// Vectors whose shifted soft ranks differ in any bit.
    pub translation_mismatches: usize,
    /// Largest gap between the two-item closed form and a grid search.
    pub pair_err: f64,
}

impl SoftRankLaws {
    pub fn passed(&self) -> bool {
        self.sum_err <= 1e-9
            && self.bound_err <= 1e-9
            && self.limit_err <= 1e-3
            && self.translation_mismatches == 0
            && self.pair_err <= 1e-6
    }
}

const EPS_CHOICES: [f64; 5] = [1e-3, 1e-2, 0.1, 1.0, 10.0];

/// `r₁` of the projection of `z` onto the segment `{(a, 3 − a) : a ∈ [1, 2]}`.
pub fn pair_closed_form(z: [f64; 2]) -> f64 {
    ((z[0] - z[1] + 3.0) / 2.0).clamp(1.0, 2.0)
}

/// Same projection by exhaustive search over a grid on `[1, 2]`, refined once
/// around the best point.
pub fn pair_grid_search(z: [f64; 2]) -> f64 {
    let cost = |a: f64| (a - z[0]).powi(2) + (3.0 - a - z[1]).powi(2);
    let best_on = |lo: f64, hi: f64, steps: usize| {
        (0..=steps)
            .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .unwrap()
    };
    let coarse = best_on(1.0, 2.0, 10_000);
    best_on((coarse - 1e-4).max(1.0), (coarse + 1e-4).min(2.0), 10_000)
}

pub fn soft_rank_laws(vectors: usize, seed: u64) -> SoftRankLaws {
    let mut r = rng(seed);
    let mut out = SoftRankLaws {
        vectors,
        ..Default::default()
    };
    for v in 0..vectors {
        let n = r.random_range(1..=64usize);
        let eps = EPS_CHOICES[v % EPS_CHOICES.len()];
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let ranks = soft_rank(&s, eps).unwrap().values;
        let nf = n as f64;
        let sum: f64 = ranks.iter().sum();
        out.sum_err = out.sum_err.max((sum - nf * (nf + 1.0) / 2.0).abs());
        for &x in &ranks {
            out.bound_err = out.bound_err.max(1.0 - x).max(x - nf);
        }

        let hard = hard_rank(&s).unwrap();
        let tiny = soft_rank(&s, 1e-12).unwrap().values;
        for (a, b) in tiny.iter().zip(&hard) {
            out.limit_err = out.limit_err.max((a - b).abs());
        }

        // dyadic scores and an integer shift are represented exactly
        let d: Vec<f64> = (0..n)
            .map(|_| r.random_range(-4096i64..=4096) as f64 / 1024.0)
            .collect();
        let shift = r.random_range(-1000i64..=1000) as f64;
        let dyadic_eps = [0.25, 0.5, 1.0, 2.0][v % 4];
        let base = soft_rank(&d, dyadic_eps).unwrap().values;
        let moved: Vec<f64> = d.iter().map(|x| x + shift).collect();
        let moved = soft_rank(&moved, dyadic_eps).unwrap().values;
        if base.iter().zip(&moved).any(|(a, b)| a.to_bits() != b.to_bits()) {
            out.translation_mismatches += 1;
        }

        let pair = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let pair_eps = EPS_CHOICES[(v / 5) % EPS_CHOICES.len()];
        let got = soft_rank(&pair, pair_eps).unwrap().values[0];
        let z = [pair[0] / pair_eps, pair[1] / pair_eps];
        let closed = pair_closed_form(z);
        let grid = pair_grid_search(z);
        out.pair_err = out.pair_err.max((got - closed).abs()).max((closed - grid).abs());
    }
    out
}
