//! Parameter and FLOP totals enumerated straight from the architecture.

use paine_core::networks::{EncoderVariant, PredictorConfig, StreamDims};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_config(r: &mut ChaCha8Rng) -> PredictorConfig {
    let heads = r.random_range(1..=4);
    let streams = (0..r.random_range(1..=3))
        .map(|_| StreamDims {
            tok: r.random_range(1..=10),
            d_tok: heads * r.random_range(1..=6),
        })
        .collect();
    PredictorConfig {
        prompt_streams: streams,
        encoder_variant: if r.random_bool(0.5) {
            EncoderVariant::AttnPool
        } else {
            EncoderVariant::PerTokenScalar
        },
        attn_blocks: r.random_range(1..=3),
        heads,
        noise_shape: [r.random_range(1..=4), r.random_range(16..=40), r.random_range(16..=40)],
        stage_channels: [(); 4].map(|_| r.random_range(1..=16)),
        mlp_hidden: (0..r.random_range(0..=3)).map(|_| r.random_range(1..=32)).collect(),
    }
}

/// Totals enumerated directly from the architecture description.
pub fn enumerated(cfg: &PredictorConfig) -> (u64, u64) {
    let u = |v: usize| v as u64;
    let (mut params, mut flops) = (0u64, 0u64);
    for s in &cfg.prompt_streams {
        let (t, d) = (u(s.tok), u(s.d_tok));
        match cfg.encoder_variant {
            EncoderVariant::AttnPool => {
                let l = t + 1;
                params += d;
                let block_params = 2 * d // ln1
                    + (d * d + d) // q
                    + d * d // k
                    + (d * d + d) // v
                    + (d * d + d) // o
                    + 2 * d // ln2
                    + (4 * d * d + 4 * d) // ff1
                    + (4 * d * d + d); // ff2
                let block_flops = 4 * (2 * d * d * l) + 4 * l * l * d + 2 * (2 * d * 4 * d * l);
                params += u(cfg.attn_blocks) * block_params;
                flops += u(cfg.attn_blocks) * block_flops;
            }
            EncoderVariant::PerTokenScalar => {
                params += (d * d + d) + d;
                flops += 2 * d * d * t + 2 * d * t + 2 * t * d;
            }
        }
    }
    let (mut c_in, mut h, mut w) = (u(cfg.noise_shape[0]), u(cfg.noise_shape[1]), u(cfg.noise_shape[2]));
    for &c in &cfg.stage_channels {
        let c = u(c);
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
        params += (c * c_in * 9 + c) + 2 * (c * c * 9 + c);
        flops += 2 * c * c_in * 9 * h * w + 2 * (2 * c * c * 9 * h * w);
        c_in = c;
    }
    let mut width = u(cfg.prompt_streams.iter().map(|s| s.d_tok).sum::<usize>()) + c_in;
    for &hw in cfg.mlp_hidden.iter().chain(std::iter::once(&1)) {
        params += width * u(hw) + u(hw);
        flops += 2 * width * u(hw);
        width = u(hw);
    }
    (params, flops)
}
