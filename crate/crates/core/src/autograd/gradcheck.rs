use super::{AutogradError, Graph, Result, Tensor, Var};

/// One evaluation of a scalar objective: value, reverse-mode gradient and
/// the smooth-region fingerprint from [`Graph::piece_signature`].
#[derive(Clone, Debug)]
pub struct Probe {
    pub value: f64,
    pub grad: Vec<f64>,
    pub piece: u64,
}

/// Denominator floor of [`GradCheckReport::max_mixed_err`].
pub const MIXED_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Relative error with the denominator floor raised to [`MIXED_FLOOR`]:
    /// an absolute comparison for gradients below the floor.
    pub max_mixed_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a kink (ReLU gate, pooling winner, ...).
    pub skipped: usize,
    /// `(coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, f64, f64)>,
}

/// Compares reverse-mode gradients against central differences
/// `(f(x+h·e_i) − f(x−h·e_i)) / 2h`, coordinate by coordinate.
///
/// Relative error uses the denominator `max(|a|, |b|, 1e-8)`. Coordinates
/// whose probes land in a different piece of a piecewise-smooth function
/// are skipped and counted.
pub fn grad_check<F>(mut f: F, x0: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    let base = f(x0)?;
    if !base.value.is_finite() || base.grad.iter().any(|g| !g.is_finite()) {
        return Err(AutogradError::Numeric("objective is not finite at x0".into()));
    }
    if base.grad.len() != x0.len() {
        return Err(AutogradError::Dimension(format!(
            "gradient has {} entries for {} parameters",
            base.grad.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_mixed_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(AutogradError::Numeric(format!(
                "objective not finite near coordinate {i}"
            )));
        }
        if plus.piece != base.piece || minus.piece != base.piece {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let analytic = base.grad[i];
        let scale = numeric.abs().max(analytic.abs());
        let diff = (numeric - analytic).abs();
        let err = diff / scale.max(1e-8);
        report.max_mixed_err = report.max_mixed_err.max(diff / scale.max(MIXED_FLOOR));
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, analytic, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Evaluates `build` on a graph whose single trainable leaf holds `x` with
/// the given shape, then back-propagates the scalar it returns.
pub fn graph_probe<B>(shape: &[usize], x: &[f64], build: B) -> Result<Probe>
where
    B: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.param(Tensor::new(shape.to_vec(), x.to_vec())?);
    let out = build(&mut g, leaf)?;
    g.backward(out)?;
    let grad = g
        .grad(leaf)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    Ok(Probe {
        value: g.value(out).data()[0],
        grad,
        piece: g.piece_signature(),
    })
}
