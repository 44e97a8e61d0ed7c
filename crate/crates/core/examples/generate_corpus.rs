//! Generates a synthetic topic corpus, writes it as TSV and reads it back.
//!
//! cargo run --release --example generate_corpus -- paths.data_dir=/tmp/ads data.seed=3

use hybrid_encoder::corpus::{generate_synthetic, ingest_tsv, TimeSplit};
use hybrid_encoder::{Result, RunConfig};

fn main() -> Result<()> {
    let cfg = RunConfig::small().with_overrides(std::env::args().skip(1))?;
    let corpus = generate_synthetic(&cfg.data)?;
    corpus.export_tsv(&cfg.data_dir)?;
    let back = ingest_tsv(&cfg.data_dir, TimeSplit::Fraction(cfg.data.train_fraction))?;
    println!("wrote {}", cfg.data_dir.display());
    println!(
        "users {}  ads {}  interactions {} ({} train / {} eval)  vocabulary {}",
        back.users().len(),
        back.ads().len(),
        back.interactions().len(),
        back.train().len(),
        back.eval().len(),
        back.vocab().len()
    );
    let user = &back.users()[0];
    println!("user {} first page: {}", user.id.0, user.pages[0]);
    let ad = &back.ads()[0];
    println!("ad {}: {}", ad.id.0, ad.description);
    Ok(())
}
