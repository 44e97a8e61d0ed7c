//! Hit@N of the three rankers on the held-out interactions, after the
//! global stage alone and after both stages.
//!
//! cargo run --release --example evaluate -- eval.limit=200

use hybrid_encoder::corpus::generate_synthetic;
use hybrid_encoder::eval::{evaluate_hit_at_n, to_csv, EvalSettings};
use hybrid_encoder::pipeline::{train, Stage};
use hybrid_encoder::serving::{build_ad_store, Method};
use hybrid_encoder::{Result, RunConfig};

fn main() -> Result<()> {
    let cfg = RunConfig::small().with_overrides(std::env::args().skip(1))?;
    let corpus = generate_synthetic(&cfg.data)?;
    let settings = EvalSettings::from_run(&cfg, &Method::ALL);

    let global = train(&corpus, &cfg, Stage::Global, None)?;
    let store = build_ad_store(&global.model, &corpus, &cfg.index, cfg.seed)?;
    let before = evaluate_hit_at_n(&global.model, &store, &corpus, &settings)?;
    println!("after the global stage (recall of the clicked ad: {:.3})", before.retrieval_recall);
    print!("{}", to_csv(&[before]));

    let done = train(&corpus, &cfg, Stage::Local, Some(global))?;
    let store = build_ad_store(&done.model, &corpus, &cfg.index, cfg.seed)?;
    let after = evaluate_hit_at_n(&done.model, &store, &corpus, &settings)?;
    println!("after both stages");
    print!("{}", to_csv(&[after]));
    Ok(())
}
