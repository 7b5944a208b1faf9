use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderVariant, PredictorConfig};
use super::{NetworkError, Result};
use crate::autograd::{attention_block, BlockVars, Graph, Tensor, Var};

/// Index into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in a fixed storage order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        ParamId(self.tensors.len() - 1)
    }

    /// A standalone set, e.g. for exercising optimizers.
    pub fn from_named(named: Vec<(String, Tensor)>) -> Self {
        let mut set = Self::default();
        for (name, t) in named {
            set.push(name, t);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable access; clones only if a graph still shares the tensor.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ln1: LinearIds,
    q: LinearIds,
    k: ParamId,
    v: LinearIds,
    o: LinearIds,
    ln2: LinearIds,
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Clone, Debug)]
enum PromptIds {
    AttnPool { token: ParamId, blocks: Vec<BlockIds> },
    PerToken { mlp1: LinearIds, mlp2: ParamId },
}

#[derive(Clone, Copy, Debug)]
struct StageIds {
    down: ConvIds,
    res1: ConvIds,
    res2: ConvIds,
}

#[derive(Clone, Debug)]
struct Layout {
    prompts: Vec<PromptIds>,
    stages: Vec<StageIds>,
    head: Vec<LinearIds>,
}

/// Per-stream token matrices `[tok, d_tok]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    streams: Vec<Arc<Tensor>>,
}

impl PromptEmbedding {
    pub fn new(streams: Vec<Tensor>) -> Result<Self> {
        for (i, s) in streams.iter().enumerate() {
            if s.dims2().is_none() {
                return Err(NetworkError::Dimension(format!(
                    "prompt stream {i} must be a [tok, d_tok] matrix, got {:?}",
                    s.shape()
                )));
            }
        }
        Ok(Self {
            streams: streams.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn streams(&self) -> &[Arc<Tensor>] {
        &self.streams
    }

    pub fn check(&self, cfg: &PredictorConfig) -> Result<()> {
        if self.streams.len() != cfg.prompt_streams.len() {
            return Err(NetworkError::Dimension(format!(
                "{} prompt streams given, config has {}",
                self.streams.len(),
                cfg.prompt_streams.len()
            )));
        }
        for (i, (s, dims)) in self.streams.iter().zip(&cfg.prompt_streams).enumerate() {
            if s.shape() != [dims.tok, dims.d_tok] {
                return Err(NetworkError::Dimension(format!(
                    "stream {i} has shape {:?}, expected [{}, {}]",
                    s.shape(),
                    dims.tok,
                    dims.d_tok
                )));
            }
        }
        Ok(())
    }
}

/// Initial noise `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTensor(Arc<Tensor>);

impl NoiseTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(NetworkError::Dimension(format!(
                "noise must be [C,H,W], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(Arc::new(t)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shared(&self) -> Arc<Tensor> {
        self.0.clone()
    }

    pub fn check(&self, cfg: &PredictorConfig) -> Result<()> {
        if self.0.shape() != cfg.noise_shape {
            return Err(NetworkError::Dimension(format!(
                "noise shape {:?}, expected {:?}",
                self.0.shape(),
                cfg.noise_shape
            )));
        }
        Ok(())
    }
}

/// Prompt encoders (one per stream), noise encoder and score head.
#[derive(Clone, Debug)]
pub struct PainePredictor {
    config: PredictorConfig,
    params: ParamSet,
    layout: Layout,
}

/// Deterministic parameter initializer.
struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut ParamSet,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params
            .push(name, Tensor::from_parts(shape.to_vec(), data))
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.params.push(name, Tensor::full(shape, v))
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> LinearIds {
        LinearIds {
            w: self.uniform(format!("{name}.weight"), &[inputs, outputs], inputs),
            b: self.constant(format!("{name}.bias"), &[outputs], 0.0),
        }
    }

    fn linear_no_bias(&mut self, name: &str, inputs: usize, outputs: usize) -> ParamId {
        self.uniform(format!("{name}.weight"), &[inputs, outputs], inputs)
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> LinearIds {
        LinearIds {
            w: self.constant(format!("{name}.gamma"), &[width], 1.0),
            b: self.constant(format!("{name}.beta"), &[width], 0.0),
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize) -> ConvIds {
        ConvIds {
            w: self.uniform(format!("{name}.weight"), &[c_out, c_in, 3, 3], c_in * 9),
            b: self.constant(format!("{name}.bias"), &[c_out], 0.0),
        }
    }
}

impl PainePredictor {
    /// Fresh model: weights uniform in `±√(1/fan_in)`, biases and the summary
    /// token zero, layer-norm gains one. Parameters are stored in the order of
    /// [`PredictorConfig::layers`].
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
        };
        let mut prompts = Vec::new();
        for (si, s) in config.prompt_streams.iter().enumerate() {
            let d = s.d_tok;
            prompts.push(match config.encoder_variant {
                EncoderVariant::AttnPool => {
                    let token = init.constant(format!("prompt{si}.token"), &[1, d], 0.0);
                    let blocks = (0..config.attn_blocks)
                        .map(|bi| {
                            let p = format!("prompt{si}.block{bi}");
                            BlockIds {
                                ln1: init.layer_norm(&format!("{p}.ln1"), d),
                                q: init.linear(&format!("{p}.q"), d, d),
                                k: init.linear_no_bias(&format!("{p}.k"), d, d),
                                v: init.linear(&format!("{p}.v"), d, d),
                                o: init.linear(&format!("{p}.o"), d, d),
                                ln2: init.layer_norm(&format!("{p}.ln2"), d),
                                ff1: init.linear(&format!("{p}.ff1"), d, 4 * d),
                                ff2: init.linear(&format!("{p}.ff2"), 4 * d, d),
                            }
                        })
                        .collect();
                    PromptIds::AttnPool { token, blocks }
                }
                EncoderVariant::PerTokenScalar => PromptIds::PerToken {
                    mlp1: init.linear(&format!("prompt{si}.mlp1"), d, d),
                    mlp2: init.linear_no_bias(&format!("prompt{si}.mlp2"), d, 1),
                },
            });
        }
        let mut stages = Vec::new();
        let mut c_in = config.noise_shape[0];
        for (i, &c) in config.stage_channels.iter().enumerate() {
            stages.push(StageIds {
                down: init.conv(&format!("noise.stage{i}.down"), c_in, c),
                res1: init.conv(&format!("noise.stage{i}.res1"), c, c),
                res2: init.conv(&format!("noise.stage{i}.res2"), c, c),
            });
            c_in = c;
        }
        let mut head = Vec::new();
        let mut width = config.head_input_width();
        for (i, &h) in config.mlp_hidden.iter().enumerate() {
            head.push(init.linear(&format!("head.fc{i}"), width, h));
            width = h;
        }
        head.push(init.linear(&format!("head.fc{}", config.mlp_hidden.len()), width, 1));
        Ok(Self {
            config,
            params,
            layout: Layout {
                prompts,
                stages,
                head,
            },
        })
    }

    /// Rebuilds a model from stored tensors, which must match the names and
    /// shapes a fresh model of `config` would have.
    pub fn from_named_tensors(config: PredictorConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(NetworkError::Dimension(format!(
                "{} tensors supplied, model has {} parameters",
                named.len(),
                model.params.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.params.names[i] {
                return Err(NetworkError::Dimension(format!(
                    "parameter {i} is '{name}', expected '{}'",
                    model.params.names[i]
                )));
            }
            if t.shape() != model.params.tensors[i].shape() {
                return Err(NetworkError::Dimension(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.tensors[i].shape()
                )));
            }
            model.params.tensors[i] = Arc::new(t);
        }
        Ok(model)
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound<'_> {
        let vars = self.params.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound { model: self, vars }
    }

    /// Score in normalized units. With `mask_noise` the noise-encoder output
    /// is replaced by zeros, which turns the prediction into a per-prompt prior.
    pub fn predict(&self, prompt: &PromptEmbedding, noise: &NoiseTensor, mask_noise: bool) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let p = bound.encode_prompt(&mut g, prompt)?;
        let n = if mask_noise {
            noise.check(&self.config)?;
            bound.masked_noise(&mut g)
        } else {
            bound.encode_noise(&mut g, noise)?
        };
        let out = bound.score(&mut g, p, n)?;
        finite_scalar(&g, out)
    }

    /// Prior in normalized units; no noise is involved at all.
    pub fn predict_prior(&self, prompt: &PromptEmbedding) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let p = bound.encode_prompt(&mut g, prompt)?;
        let n = bound.masked_noise(&mut g);
        let out = bound.score(&mut g, p, n)?;
        finite_scalar(&g, out)
    }

    /// Scores several noises for one prompt, encoding the prompt once.
    pub fn predict_many(&self, prompt: &PromptEmbedding, noises: &[&NoiseTensor]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let p = bound.encode_prompt(&mut g, prompt)?;
        noises
            .iter()
            .map(|noise| {
                let n = bound.encode_noise(&mut g, noise)?;
                let out = bound.score(&mut g, p, n)?;
                finite_scalar(&g, out)
            })
            .collect()
    }
}

fn finite_scalar(g: &Graph, v: Var) -> Result<f64> {
    let value = g.value(v).data()[0];
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NetworkError::Numeric(format!("prediction is {value}")))
    }
}

/// A predictor whose parameters are recorded on a particular graph.
pub struct Bound<'m> {
    model: &'m PainePredictor,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn block_vars(&self, b: &BlockIds) -> BlockVars {
        BlockVars {
            ln1_gamma: self.var(b.ln1.w),
            ln1_beta: self.var(b.ln1.b),
            wq: self.var(b.q.w),
            bq: self.var(b.q.b),
            wk: self.var(b.k),
            wv: self.var(b.v.w),
            bv: self.var(b.v.b),
            wo: self.var(b.o.w),
            bo: self.var(b.o.b),
            ln2_gamma: self.var(b.ln2.w),
            ln2_beta: self.var(b.ln2.b),
            w1: self.var(b.ff1.w),
            b1: self.var(b.ff1.b),
            w2: self.var(b.ff2.w),
            b2: self.var(b.ff2.b),
        }
    }

    /// Encodes one stream `c[tok, d]` into a `[1, d]` row.
    pub fn encode_stream(&self, g: &mut Graph, stream: usize, c: Var) -> Result<Var> {
        let dims = self.model.config.prompt_streams[stream];
        if g.shape(c) != [dims.tok, dims.d_tok] {
            return Err(NetworkError::Dimension(format!(
                "stream {stream} has shape {:?}, expected [{}, {}]",
                g.shape(c),
                dims.tok,
                dims.d_tok
            )));
        }
        match &self.model.layout.prompts[stream] {
            PromptIds::AttnPool { token, blocks } => {
                let mut seq = g.concat_rows(&[c, self.var(*token)])?;
                for b in blocks {
                    let bv = self.block_vars(b);
                    seq = attention_block(g, seq, &bv, self.model.config.heads)?.out;
                }
                Ok(g.slice_rows(seq, dims.tok, 1)?)
            }
            PromptIds::PerToken { mlp1, mlp2 } => {
                let h = g.linear(c, self.var(mlp1.w), self.var(mlp1.b))?;
                let h = g.relu(h);
                let logits = g.matmul(h, self.var(*mlp2))?;
                let logits = g.reshape(logits, &[1, dims.tok])?;
                let weights = g.softmax_rows(logits)?;
                Ok(g.matmul(weights, c)?)
            }
        }
    }

    /// All prompt streams, encoded and concatenated in stream order: `[1, Σd]`.
    pub fn encode_prompt(&self, g: &mut Graph, prompt: &PromptEmbedding) -> Result<Var> {
        prompt.check(&self.model.config)?;
        let mut parts = Vec::with_capacity(prompt.streams.len());
        for (i, s) in prompt.streams.iter().enumerate() {
            let c = g.constant(s.clone());
            parts.push(self.encode_stream(g, i, c)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(g.concat_cols(&parts)?)
        }
    }

    /// Four stride-2 stages with residual blocks, then spatial max pooling: `[1, C4]`.
    pub fn encode_noise_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x) != self.model.config.noise_shape {
            return Err(NetworkError::Dimension(format!(
                "noise shape {:?}, expected {:?}",
                g.shape(x),
                self.model.config.noise_shape
            )));
        }
        let mut h = x;
        for s in &self.model.layout.stages {
            let d = g.conv2d(h, self.var(s.down.w), self.var(s.down.b), 2, 1)?;
            let d = g.relu(d);
            let r = g.conv2d(d, self.var(s.res1.w), self.var(s.res1.b), 1, 1)?;
            let r = g.relu(r);
            let r = g.conv2d(r, self.var(s.res2.w), self.var(s.res2.b), 1, 1)?;
            let sum = g.add(d, r)?;
            h = g.relu(sum);
        }
        let pooled = g.adaptive_max_pool_to_1(h)?;
        let width = self.model.config.noise_width();
        Ok(g.reshape(pooled, &[1, width])?)
    }

    pub fn encode_noise(&self, g: &mut Graph, noise: &NoiseTensor) -> Result<Var> {
        noise.check(&self.model.config)?;
        let x = g.constant(noise.shared());
        self.encode_noise_var(g, x)
    }

    /// Zero row standing in for the noise-encoder output.
    pub fn masked_noise(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[1, self.model.config.noise_width()]))
    }

    /// MLP over `[prompt ‖ noise]`, returning a `[1, 1]` prediction.
    pub fn score(&self, g: &mut Graph, prompt: Var, noise: Var) -> Result<Var> {
        let x = g.concat_cols(&[prompt, noise])?;
        self.score_features(g, x)
    }

    pub fn score_features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let expect = self.model.config.head_input_width();
        if g.shape(x) != [1, expect] {
            return Err(NetworkError::Dimension(format!(
                "score head input {:?}, expected [1, {expect}]",
                g.shape(x)
            )));
        }
        let head = &self.model.layout.head;
        let mut h = x;
        for (i, l) in head.iter().enumerate() {
            h = g.linear(h, self.var(l.w), self.var(l.b))?;
            if i + 1 < head.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
