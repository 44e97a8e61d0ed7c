//! Serves one request three ways over the same retrieved candidates and
//! shows the forward-pass ledger of each, then checks that cached scoring
//! matches scoring from scratch.
//!
//! cargo run --release --example recommend -- serve.candidates=100

use hybrid_encoder::corpus::generate_synthetic;
use hybrid_encoder::pipeline::{train, Stage};
use hybrid_encoder::serving::{build_ad_store, Method, Recommender, UserQuery};
use hybrid_encoder::{Result, RunConfig};

fn main() -> Result<()> {
    let cfg = RunConfig::small().with_overrides(std::env::args().skip(1))?;
    let corpus = generate_synthetic(&cfg.data)?;
    let model = train(&corpus, &cfg, Stage::Progressive, None)?.model;
    let store = build_ad_store(&model, &corpus, &cfg.index, cfg.seed)?;
    let rec = Recommender::new(&model, &store, cfg.index.ef_search)?;

    let it = &corpus.eval()[0];
    let query = UserQuery::from_corpus(&corpus, corpus.user_idx(it.user)?, &model);
    println!("user {} clicked ad {}", it.user.0, it.ad.0);
    for method in Method::ALL {
        let r = rec.recommend_with(method, &query, cfg.candidates, cfg.top_n)?;
        let l = &r.ledger;
        println!(
            "{method:>8}: passes {:>3} (user {}, interaction {}, cross {})  {:.2} ms  top {:?}",
            l.passes(),
            l.unet,
            l.uanet,
            l.cross,
            l.total_ms(),
            &r.ids().iter().map(|a| a.0).take(5).collect::<Vec<_>>()
        );
    }

    let mut ctx = rec.retrieve(&query, cfg.candidates)?;
    let cached = rec.score(&mut ctx, Method::Hybrid)?;
    let worst = ctx
        .candidates
        .iter()
        .zip(&cached)
        .map(|(h, s)| Ok((rec.rank_score_from_scratch(&query, h.ad)? - s).abs()))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("cached vs from-scratch hybrid scores: max |diff| = {worst:e}");
    Ok(())
}
