//! Run configuration: a flat `key=value` file with dotted section prefixes.
//!
//! ```text
//! # comments start with '#'
//! seed=0
//! unet.n_layers=2
//! uanet.n_layers=1
//! model.degree=3
//! serve.candidates=100
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::SyntheticSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Filled from the corpus vocabulary when zero.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Add a learned segment embedding: 0 up to the first [SEP], 1 after.
    pub segments: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 0,
            max_seq_len: 64,
            dropout: 0.0,
            segments: false,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{name}: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return err("dimensions must be >= 1".into());
        }
        if self.vocab_size == 0 {
            return err("vocab_size must be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub unet: EncoderConfig,
    pub anet: EncoderConfig,
    pub uanet: EncoderConfig,
    pub cross: EncoderConfig,
    /// Number of disentangled ad embeddings per ad.
    pub degree: usize,
    /// Multiplier on the attentive-pooling logits of the ranking head.
    pub pool_scale: f64,
    /// Draw every encoder's initial weights from one stream, so that equally
    /// shaped encoders start from the same backbone.
    pub shared_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: EncoderConfig::default(),
            anet: EncoderConfig::default(),
            uanet: EncoderConfig::default(),
            cross: EncoderConfig {
                segments: true,
                ..EncoderConfig::default()
            },
            degree: 3,
            pool_scale: 0.125,
            shared_init: true,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(mut self, vocab: usize) -> Self {
        for enc in [&mut self.unet, &mut self.anet, &mut self.uanet, &mut self.cross] {
            enc.vocab_size = vocab;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate("unet")?;
        self.anet.validate("anet")?;
        self.uanet.validate("uanet")?;
        self.cross.validate("cross")?;
        if self.degree == 0 {
            return Err(Error::Config("model.degree must be >= 1".into()));
        }
        if self.unet.d_model != self.anet.d_model {
            return Err(Error::Config(format!(
                "unet.d_model {} != anet.d_model {}: retrieval embeddings must share a space",
                self.unet.d_model, self.anet.d_model
            )));
        }
        if self.uanet.d_model != self.anet.d_model {
            return Err(Error::Config(format!(
                "uanet.d_model {} != anet.d_model {}",
                self.uanet.d_model, self.anet.d_model
            )));
        }
        Ok(())
    }

    /// Interaction-network cost relative to the user network, in layers.
    pub fn epsilon(&self) -> f64 {
        self.uanet.n_layers as f64 / self.unet.n_layers.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Softmax cross-entropy of the positive against its negatives.
    Softmax,
    /// Positive score minus the summed negative scores, as a loss.
    Margin,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "margin" => Ok(Self::Margin),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

impl Objective {
    fn as_str(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Margin => "margin",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_negatives: usize,
    pub pool_size: usize,
    pub batch_size: usize,
    pub global_steps: usize,
    pub local_steps: usize,
    pub lr_global: f64,
    pub lr_local: f64,
    pub objective: Objective,
    /// Let local-stage gradients reach the ad network (forces a store rebuild).
    pub finetune_anet: bool,
    /// Also train the cross-encoder baseline with the same two stages.
    pub train_cross: bool,
    /// Cross-encoder steps per stage, taken from the front of the same
    /// batch schedule the hybrid model sees.
    pub cross_global_steps: usize,
    pub cross_local_steps: usize,
    /// Start the cross encoder from the trained user network.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_negatives: 4,
            pool_size: 200,
            batch_size: 32,
            global_steps: 500,
            local_steps: 1000,
            lr_global: 1e-3,
            lr_local: 1e-3,
            objective: Objective::Softmax,
            finetune_anet: false,
            train_cross: true,
            cross_global_steps: 300,
            cross_local_steps: 300,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_negatives == 0 {
            return Err(Error::Config("train.n_negatives must be >= 1".into()));
        }
        if self.pool_size <= self.n_negatives {
            return Err(Error::Config(format!(
                "train.pool_size {} must exceed train.n_negatives {}",
                self.pool_size, self.n_negatives
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    Hnsw,
}

impl FromStr for IndexMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "hnsw" => Ok(Self::Hnsw),
            other => Err(Error::Config(format!("unknown index mode `{other}`"))),
        }
    }
}

impl IndexMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Hnsw => "hnsw",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            mode: IndexMode::Exact,
            m: 16,
            ef_construction: 200,
            ef_search: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub candidates: usize,
    pub top_n: usize,
    pub hit_ns: Vec<usize>,
    /// Cap on evaluated interactions; zero evaluates all of them.
    pub eval_limit: usize,
    pub data: SyntheticSpec,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            index: IndexConfig::default(),
            candidates: 100,
            top_n: 10,
            hit_ns: vec![1, 3, 5, 10, 20],
            eval_limit: 0,
            data: SyntheticSpec::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// A corpus and model that train end to end in about a minute: the
    /// preset the runnable examples start from.
    pub fn small() -> Self {
        let mut cfg = Self::default();
        cfg.data = SyntheticSpec {
            n_topics: 8,
            n_users: 800,
            n_ads: 400,
            vocab_size: 1000,
            ..SyntheticSpec::default()
        };
        for enc in [
            &mut cfg.model.unet,
            &mut cfg.model.anet,
            &mut cfg.model.uanet,
            &mut cfg.model.cross,
        ] {
            enc.d_model = 32;
            enc.d_ffn = 64;
            enc.max_seq_len = 48;
        }
        cfg.model.pool_scale = 1.0 / 32f64.sqrt();
        cfg.train.global_steps = 150;
        cfg.train.local_steps = 300;
        cfg.train.cross_global_steps = 100;
        cfg.train.cross_local_steps = 100;
        cfg.train.pool_size = 50;
        cfg.candidates = 50;
        cfg
    }

    /// Applies `key=value` strings in order.
    pub fn with_overrides<I, S>(mut self, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for kv in pairs {
            let kv = kv.as_ref();
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`{kv}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Sets one dotted key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some((section, field)) = key.split_once('.') {
            let enc = match section {
                "unet" => Some(&mut self.model.unet),
                "anet" => Some(&mut self.model.anet),
                "uanet" => Some(&mut self.model.uanet),
                "cross" => Some(&mut self.model.cross),
                _ => None,
            };
            if let Some(enc) = enc {
                match field {
                    "n_layers" => enc.n_layers = parse(key, value)?,
                    "d_model" => enc.d_model = parse(key, value)?,
                    "n_heads" => enc.n_heads = parse(key, value)?,
                    "d_ffn" => enc.d_ffn = parse(key, value)?,
                    "vocab_size" => enc.vocab_size = parse(key, value)?,
                    "max_seq_len" => enc.max_seq_len = parse(key, value)?,
                    "dropout" => enc.dropout = parse(key, value)?,
                    "segments" => enc.segments = parse_bool(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                return Ok(());
            }
        }
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.degree" => self.model.degree = parse(key, value)?,
            "model.pool_scale" => self.model.pool_scale = parse(key, value)?,
            "model.shared_init" => self.model.shared_init = parse_bool(key, value)?,
            "train.n_negatives" => t.n_negatives = parse(key, value)?,
            "train.pool_size" => t.pool_size = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.global_steps" => t.global_steps = parse(key, value)?,
            "train.local_steps" => t.local_steps = parse(key, value)?,
            "train.lr_global" => t.lr_global = parse(key, value)?,
            "train.lr_local" => t.lr_local = parse(key, value)?,
            "train.objective" => t.objective = value.parse()?,
            "train.finetune_anet" => t.finetune_anet = parse_bool(key, value)?,
            "train.cross_global_steps" => t.cross_global_steps = parse(key, value)?,
            "train.cross_local_steps" => t.cross_local_steps = parse(key, value)?,
            "train.warm_start" => t.warm_start = parse_bool(key, value)?,
            "train.train_cross" => t.train_cross = parse_bool(key, value)?,
            "index.mode" => self.index.mode = value.parse()?,
            "index.m" => self.index.m = parse(key, value)?,
            "index.ef_construction" => self.index.ef_construction = parse(key, value)?,
            "index.ef_search" => self.index.ef_search = parse(key, value)?,
            "serve.candidates" => self.candidates = parse(key, value)?,
            "serve.top_n" => self.top_n = parse(key, value)?,
            "eval.hit_ns" => {
                self.hit_ns = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "eval.limit" => self.eval_limit = parse(key, value)?,
            "data.n_topics" => d.n_topics = parse(key, value)?,
            "data.n_users" => d.n_users = parse(key, value)?,
            "data.n_ads" => d.n_ads = parse(key, value)?,
            "data.vocab_size" => d.vocab_size = parse(key, value)?,
            "data.tokens_per_page" => d.tokens_per_page = parse(key, value)?,
            "data.pages_per_user" => d.pages_per_user = parse(key, value)?,
            "data.interactions_per_user" => d.interactions_per_user = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.ad_tokens" => d.ad_tokens = parse(key, value)?,
            "data.interest_rate" => d.interest_rate = parse(key, value)?,
            "data.train_fraction" => d.train_fraction = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "paths.data_dir" => self.data_dir = PathBuf::from(value),
            "paths.out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical serialization; `from_kv_str(to_kv_string())` is the identity.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        for (name, e) in [
            ("unet", &self.model.unet),
            ("anet", &self.model.anet),
            ("uanet", &self.model.uanet),
            ("cross", &self.model.cross),
        ] {
            kv(&format!("{name}.n_layers"), e.n_layers.to_string());
            kv(&format!("{name}.d_model"), e.d_model.to_string());
            kv(&format!("{name}.n_heads"), e.n_heads.to_string());
            kv(&format!("{name}.d_ffn"), e.d_ffn.to_string());
            kv(&format!("{name}.vocab_size"), e.vocab_size.to_string());
            kv(&format!("{name}.max_seq_len"), e.max_seq_len.to_string());
            kv(&format!("{name}.dropout"), e.dropout.to_string());
            kv(&format!("{name}.segments"), e.segments.to_string());
        }
        kv("model.degree", self.model.degree.to_string());
        kv("model.pool_scale", self.model.pool_scale.to_string());
        kv("model.shared_init", self.model.shared_init.to_string());
        let t = &self.train;
        kv("train.n_negatives", t.n_negatives.to_string());
        kv("train.pool_size", t.pool_size.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.global_steps", t.global_steps.to_string());
        kv("train.local_steps", t.local_steps.to_string());
        kv("train.lr_global", t.lr_global.to_string());
        kv("train.lr_local", t.lr_local.to_string());
        kv("train.objective", t.objective.as_str().to_string());
        kv("train.finetune_anet", t.finetune_anet.to_string());
        kv("train.train_cross", t.train_cross.to_string());
        kv("train.cross_global_steps", t.cross_global_steps.to_string());
        kv("train.cross_local_steps", t.cross_local_steps.to_string());
        kv("train.warm_start", t.warm_start.to_string());
        kv("index.mode", self.index.mode.as_str().to_string());
        kv("index.m", self.index.m.to_string());
        kv("index.ef_construction", self.index.ef_construction.to_string());
        kv("index.ef_search", self.index.ef_search.to_string());
        kv("serve.candidates", self.candidates.to_string());
        kv("serve.top_n", self.top_n.to_string());
        kv(
            "eval.hit_ns",
            self.hit_ns.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        kv("eval.limit", self.eval_limit.to_string());
        let d = &self.data;
        kv("data.n_topics", d.n_topics.to_string());
        kv("data.n_users", d.n_users.to_string());
        kv("data.n_ads", d.n_ads.to_string());
        kv("data.vocab_size", d.vocab_size.to_string());
        kv("data.tokens_per_page", d.tokens_per_page.to_string());
        kv("data.pages_per_user", d.pages_per_user.to_string());
        kv("data.interactions_per_user", d.interactions_per_user.to_string());
        kv("data.noise", d.noise.to_string());
        kv("data.ad_tokens", d.ad_tokens.to_string());
        kv("data.interest_rate", d.interest_rate.to_string());
        kv("data.train_fraction", d.train_fraction.to_string());
        kv("data.seed", d.seed.to_string());
        kv("paths.data_dir", self.data_dir.display().to_string());
        kv("paths.out_dir", self.out_dir.display().to_string());
        s
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex_digest(self.to_kv_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.top_n == 0 || self.candidates < self.top_n {
            return Err(Error::Config(format!(
                "need 1 <= serve.top_n ({}) <= serve.candidates ({})",
                self.top_n, self.candidates
            )));
        }
        if self.hit_ns.is_empty() || self.hit_ns.contains(&0) {
            return Err(Error::Config("eval.hit_ns must be positive".into()));
        }
        if self.model.degree == 0 {
            return Err(Error::Config("model.degree must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_scale() {
        let c = RunConfig::default();
        assert_eq!(c.model.unet.n_layers, 2);
        assert_eq!(c.model.unet.d_model, 64);
        assert_eq!(c.model.unet.n_heads, 4);
        assert_eq!(c.model.unet.d_ffn, 128);
        assert_eq!(c.candidates, 100);
        assert_eq!(c.hit_ns, [1, 3, 5, 10, 20]);
        assert_eq!(c.train.pool_size, 200);
        assert_eq!(c.train.n_negatives, 4);
    }

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.set("uanet.n_layers", "1").unwrap();
        c.set("eval.hit_ns", "1,2").unwrap();
        c.set("train.objective", "margin").unwrap();
        let back = RunConfig::from_kv_str(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_kv_str("nope=1").is_err());
        assert!(RunConfig::from_kv_str("unet.n_layers=two").is_err());
        assert!(RunConfig::from_kv_str("just text").is_err());
        assert_eq!(
            RunConfig::from_kv_str("unet.colour=1").unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let c = RunConfig::from_kv_str("# hi\n\nseed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn d_model_mismatch_is_config_error() {
        let mut m = ModelConfig::default().with_vocab(10);
        m.uanet.d_model = 32;
        m.uanet.n_heads = 4;
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn heads_must_divide_d_model() {
        let mut e = EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        };
        e.n_heads = 5;
        assert!(e.validate("x").is_err());
    }

    #[test]
    fn epsilon_is_layer_ratio() {
        let mut m = ModelConfig::default();
        m.uanet.n_layers = 1;
        assert_eq!(m.epsilon(), 0.5);
    }
}
