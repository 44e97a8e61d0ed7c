//! Recall of the HNSW index against exact search as the search beam widens.
//!
//! cargo run --release --example ann_recall -- 10000 64

use std::time::Instant;

use hybrid_encoder::ann::{recall, AnnIndex};
use hybrid_encoder::corpus::AdId;
use hybrid_encoder::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(5000);
    let dim = args.get(1).copied().unwrap_or(64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vector = |_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let items: Vec<(AdId, Vec<f64>)> = (0..n).map(|i| (AdId(i as u64), vector(i))).collect();
    let queries: Vec<Vec<f64>> = (0..100).map(&mut vector).collect();

    let t = Instant::now();
    let index = AnnIndex::hnsw(&items, 16, 200, 0)?;
    println!("built {n} x {dim} in {:.1?}", t.elapsed());
    for ef in [50, 100, 200, 400] {
        let t = Instant::now();
        let mut total = 0.0;
        for q in &queries {
            total += recall(&index.search(q, 100, ef)?, &index.exact_search(q, 100)?);
        }
        println!(
            "ef {ef:>3}: recall@100 {:.3}  ({:.2} ms/query incl. exact scan)",
            total / queries.len() as f64,
            t.elapsed().as_secs_f64() * 1e3 / queries.len() as f64
        );
    }
    Ok(())
}
