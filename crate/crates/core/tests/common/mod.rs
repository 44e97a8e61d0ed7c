#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use hybrid_encoder::config::{EncoderConfig, ModelConfig};
use hybrid_encoder::{RunConfig, SyntheticSpec};

pub fn tiny_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: vocab,
        max_seq_len: 16,
        ..EncoderConfig::default()
    }
}

pub fn tiny_model(vocab: usize, degree: usize) -> ModelConfig {
    let enc = tiny_encoder(vocab);
    ModelConfig {
        unet: enc.clone(),
        anet: enc.clone(),
        uanet: enc.clone(),
        cross: EncoderConfig { segments: true, ..enc },
        degree,
        ..ModelConfig::default()
    }
}

/// A corpus and model small enough to train in well under a second per stage.
pub fn tiny_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data = SyntheticSpec {
        n_topics: 4,
        n_users: 100,
        n_ads: 60,
        interactions_per_user: 2,
        vocab_size: 120,
        seed,
        ..SyntheticSpec::default()
    };
    cfg.model = tiny_model(0, 2);
    cfg.train.global_steps = 6;
    cfg.train.local_steps = 6;
    cfg.train.batch_size = 8;
    cfg.train.pool_size = 20;
    cfg.candidates = 20;
    cfg.top_n = 5;
    cfg
}
