use serde::{Deserialize, Serialize};

use super::{NetworkError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub tok: usize,
    pub d_tok: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    /// Learnable summary token appended to the sequence, then self-attention blocks.
    AttnPool,
    /// Per-token MLP logits, softmax-weighted average of the token rows.
    PerTokenScalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub prompt_streams: Vec<StreamDims>,
    pub encoder_variant: EncoderVariant,
    pub attn_blocks: usize,
    pub heads: usize,
    /// `(C, H, W)` of the initial noise.
    pub noise_shape: [usize; 3],
    pub stage_channels: [usize; 4],
    pub mlp_hidden: Vec<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            prompt_streams: vec![
                StreamDims { tok: 77, d_tok: 768 },
                StreamDims {
                    tok: 77,
                    d_tok: 1280,
                },
            ],
            encoder_variant: EncoderVariant::AttnPool,
            attn_blocks: 2,
            heads: 16,
            noise_shape: [4, 32, 32],
            stage_channels: [64, 128, 256, 512],
            mlp_hidden: vec![512, 256],
        }
    }
}

impl PredictorConfig {
    /// The default architecture with per-token scalar pooling, narrower
    /// convolution stages and head, sized for small prompt streams and CPU
    /// training.
    pub fn reduced() -> Self {
        Self {
            encoder_variant: EncoderVariant::PerTokenScalar,
            heads: 4,
            noise_shape: [1, 16, 16],
            stage_channels: [8, 8, 16, 16],
            mlp_hidden: vec![128, 64],
            prompt_streams: vec![StreamDims { tok: 8, d_tok: 16 }, StreamDims { tok: 6, d_tok: 8 }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.prompt_streams.is_empty() {
            return bad("at least one prompt stream is required".into());
        }
        for (i, s) in self.prompt_streams.iter().enumerate() {
            if s.tok == 0 || s.d_tok == 0 {
                return bad(format!("stream {i} has an empty extent"));
            }
            if self.heads == 0 || s.d_tok % self.heads != 0 {
                return bad(format!(
                    "{} heads do not divide stream {i} width {}",
                    self.heads, s.d_tok
                ));
            }
        }
        if self.attn_blocks == 0 {
            return bad("attn_blocks must be at least 1".into());
        }
        let [c, h, w] = self.noise_shape;
        if c == 0 {
            return bad("noise needs at least one channel".into());
        }
        if h < 16 || w < 16 {
            return bad(format!("noise spatial extent {h}x{w} is below 16x16"));
        }
        if self.stage_channels.contains(&0) || self.mlp_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn prompt_width(&self) -> usize {
        self.prompt_streams.iter().map(|s| s.d_tok).sum()
    }

    pub fn noise_width(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn head_input_width(&self) -> usize {
        self.prompt_width() + self.noise_width()
    }

    /// Spatial extents after each stride-2 stage.
    pub fn stage_extents(&self) -> [(usize, usize); 4] {
        let mut hw = (self.noise_shape[1], self.noise_shape[2]);
        let mut out = [(0, 0); 4];
        for slot in &mut out {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
            *slot = hw;
        }
        out
    }

    /// Every parameterized or FLOP-carrying layer of the predictor, in
    /// parameter-storage order.
    pub fn layers(&self) -> Result<Vec<NamedLayer>> {
        self.validate()?;
        let mut out = Vec::new();
        let mut push = |name: String, spec: LayerSpec| out.push(NamedLayer { name, spec });
        for (si, s) in self.prompt_streams.iter().enumerate() {
            let d = s.d_tok;
            match self.encoder_variant {
                EncoderVariant::AttnPool => {
                    let rows = s.tok + 1;
                    push(format!("prompt{si}.token"), LayerSpec::Token { width: d });
                    for bi in 0..self.attn_blocks {
                        let p = format!("prompt{si}.block{bi}");
                        push(format!("{p}.ln1"), LayerSpec::LayerNorm { width: d });
                        push(format!("{p}.q"), LayerSpec::linear(d, d, rows));
                        push(format!("{p}.k"), LayerSpec::linear_no_bias(d, d, rows));
                        push(format!("{p}.v"), LayerSpec::linear(d, d, rows));
                        push(
                            format!("{p}.attn"),
                            LayerSpec::Attention {
                                seq_len: rows,
                                width: d,
                            },
                        );
                        push(format!("{p}.o"), LayerSpec::linear(d, d, rows));
                        push(format!("{p}.ln2"), LayerSpec::LayerNorm { width: d });
                        push(format!("{p}.ff1"), LayerSpec::linear(d, 4 * d, rows));
                        push(format!("{p}.ff2"), LayerSpec::linear(4 * d, d, rows));
                    }
                }
                EncoderVariant::PerTokenScalar => {
                    push(format!("prompt{si}.mlp1"), LayerSpec::linear(d, d, s.tok));
                    push(
                        format!("prompt{si}.mlp2"),
                        LayerSpec::linear_no_bias(d, 1, s.tok),
                    );
                    push(
                        format!("prompt{si}.pool"),
                        LayerSpec::WeightedSum {
                            items: s.tok,
                            width: d,
                        },
                    );
                }
            }
        }
        let mut c_in = self.noise_shape[0];
        for (i, (&c, &(h, w))) in self
            .stage_channels
            .iter()
            .zip(self.stage_extents().iter())
            .enumerate()
        {
            let conv = |c_in| LayerSpec::Conv2d {
                c_in,
                c_out: c,
                kh: 3,
                kw: 3,
                h_out: h,
                w_out: w,
            };
            push(format!("noise.stage{i}.down"), conv(c_in));
            push(format!("noise.stage{i}.res1"), conv(c));
            push(format!("noise.stage{i}.res2"), conv(c));
            c_in = c;
        }
        let mut width = self.head_input_width();
        for (i, &h) in self.mlp_hidden.iter().enumerate() {
            push(format!("head.fc{i}"), LayerSpec::linear(width, h, 1));
            width = h;
        }
        push(
            format!("head.fc{}", self.mlp_hidden.len()),
            LayerSpec::linear(width, 1, 1),
        );
        Ok(out)
    }
}

/// Accounting unit. FLOP conventions: a linear map `m→n` costs `2mn` per
/// row; a convolution `2·C_out·C_in·kh·kw·H'·W'`; attention core products
/// `2·L²·d` for the scores plus `2·L²·d` for the value mixing. Elementwise
/// work (activations, normalization, softmax) is not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
        #[serde(default = "one")]
        rows: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        h_out: usize,
        w_out: usize,
    },
    Attention {
        seq_len: usize,
        width: usize,
    },
    LayerNorm {
        width: usize,
    },
    Token {
        width: usize,
    },
    WeightedSum {
        items: usize,
        width: usize,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn linear(inputs: usize, outputs: usize, rows: usize) -> Self {
        LayerSpec::Linear {
            inputs,
            outputs,
            rows,
            bias: true,
        }
    }

    /// Linear map whose output feeds a softmax directly, so a bias would be
    /// a per-row constant with no effect.
    pub fn linear_no_bias(inputs: usize, outputs: usize, rows: usize) -> Self {
        LayerSpec::Linear {
            inputs,
            outputs,
            rows,
            bias: false,
        }
    }

    pub fn params(&self) -> u64 {
        let u = |v: usize| v as u64;
        match *self {
            LayerSpec::Linear {
                inputs,
                outputs,
                bias,
                ..
            } => u(inputs) * u(outputs) + if bias { u(outputs) } else { 0 },
            LayerSpec::Conv2d {
                c_in, c_out, kh, kw, ..
            } => u(c_out) * u(c_in) * u(kh) * u(kw) + u(c_out),
            LayerSpec::Attention { .. } | LayerSpec::WeightedSum { .. } => 0,
            LayerSpec::LayerNorm { width } => 2 * u(width),
            LayerSpec::Token { width } => u(width),
        }
    }

    pub fn flops(&self) -> u64 {
        let u = |v: usize| v as u64;
        match *self {
            LayerSpec::Linear {
                inputs,
                outputs,
                rows,
                ..
            } => 2 * u(inputs) * u(outputs) * u(rows),
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kh,
                kw,
                h_out,
                w_out,
            } => 2 * u(c_out) * u(c_in) * u(kh) * u(kw) * u(h_out) * u(w_out),
            LayerSpec::Attention { seq_len, width } => 4 * u(seq_len) * u(seq_len) * u(width),
            LayerSpec::WeightedSum { items, width } => 2 * u(items) * u(width),
            LayerSpec::LayerNorm { .. } | LayerSpec::Token { .. } => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accounting {
    pub params: u64,
    pub flops: u64,
    pub layers: Vec<LayerCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

pub fn account_layers(layers: &[NamedLayer]) -> Accounting {
    let layers: Vec<LayerCount> = layers
        .iter()
        .map(|l| LayerCount {
            name: l.name.clone(),
            params: l.spec.params(),
            flops: l.spec.flops(),
        })
        .collect();
    Accounting {
        params: layers.iter().map(|l| l.params).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    }
}

/// Analytic parameter and FLOP totals at batch size 1.
pub fn count_params_flops(config: &PredictorConfig) -> Result<Accounting> {
    Ok(account_layers(&config.layers()?))
}
