//! Forward passes and latency per request as the candidate count grows.
//!
//! cargo run --release --example benchmark -- eval.limit=50

use hybrid_encoder::corpus::generate_synthetic;
use hybrid_encoder::eval::{benchmark, to_csv, EvalSettings};
use hybrid_encoder::pipeline::{train, Stage};
use hybrid_encoder::serving::{build_ad_store, Method};
use hybrid_encoder::{Result, RunConfig};

fn main() -> Result<()> {
    let mut cfg = RunConfig::small().with_overrides(std::env::args().skip(1))?;
    if cfg.eval_limit == 0 {
        cfg.eval_limit = 50;
    }
    let corpus = generate_synthetic(&cfg.data)?;
    let model = train(&corpus, &cfg, Stage::Progressive, None)?.model;
    let store = build_ad_store(&model, &corpus, &cfg.index, cfg.seed)?;
    let settings = EvalSettings::from_run(&cfg, &Method::ALL);
    let reports = benchmark(&model, &store, &corpus, &settings, &[25, 50, 100, 200])?;
    print!("{}", to_csv(&reports));
    Ok(())
}
