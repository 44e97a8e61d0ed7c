//! Retrains the ranking head for several numbers of disentangled ad
//! embeddings on top of one set of retrieval towers.
//!
//! cargo run --release --example degree_sweep -- train.local_steps=200

use hybrid_encoder::corpus::generate_synthetic;
use hybrid_encoder::eval::{sweep_degree, sweep_table};
use hybrid_encoder::{Result, RunConfig};

fn main() -> Result<()> {
    let mut cfg = RunConfig::small().with_overrides(std::env::args().skip(1))?;
    cfg.train.train_cross = false;
    let corpus = generate_synthetic(&cfg.data)?;
    let rows = sweep_degree(&corpus, &cfg, &[1, 2, 3, 4])?;
    print!("{}", sweep_table(&rows, &[1, 3, 5]));
    Ok(())
}
