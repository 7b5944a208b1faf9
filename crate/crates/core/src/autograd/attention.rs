use super::{AutogradError, Graph, Result, Var};

/// Graph handles for one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Row-stochastic `[L,L]` attention matrix of each head.
    pub weights: Vec<Var>,
}

/// Multi-head self-attention with residual, then a ReLU feed-forward with
/// residual; both sublayers see a layer-normalized input. No positional
/// information is injected, so the block is row-permutation equivariant.
pub fn attention_block(
    g: &mut Graph,
    seq: Var,
    p: &BlockVars,
    heads: usize,
) -> Result<AttentionOutput> {
    let (_, d) = g.value(seq).dims2().ok_or_else(|| {
        AutogradError::Dimension(format!(
            "attention input must be [L,d], got {:?}",
            g.shape(seq)
        ))
    })?;
    if heads == 0 || d % heads != 0 {
        return Err(AutogradError::Config(format!(
            "{heads} heads do not divide model width {d}"
        )));
    }
    let dh = d / heads;
    let h = g.layer_norm(seq, p.ln1_gamma, p.ln1_beta)?;
    let q = g.linear(h, p.wq, p.bq)?;
    let k = g.matmul(h, p.wk)?;
    let v = g.linear(h, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        weights.push(attn);
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let proj = g.linear(merged, p.wo, p.bo)?;
    let x1 = g.add(seq, proj)?;
    let h2 = g.layer_norm(x1, p.ln2_gamma, p.ln2_beta)?;
    let f = g.linear(h2, p.w1, p.b1)?;
    let f = g.relu(f);
    let f = g.linear(f, p.w2, p.b2)?;
    let out = g.add(x1, f)?;
    Ok(AttentionOutput { out, weights })
}
