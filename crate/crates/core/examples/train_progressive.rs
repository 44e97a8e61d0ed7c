//! Trains the retrieval towers (global stage), then the ranking head
//! (local stage), printing the loss curve of each and saving a checkpoint.
//!
//! cargo run --release --example train_progressive -- train.local_steps=500

use hybrid_encoder::corpus::generate_synthetic;
use hybrid_encoder::pipeline::{train, Stage};
use hybrid_encoder::train::{TrainReport, STAGE_GLOBAL, STAGE_LOCAL};
use hybrid_encoder::{Result, RunConfig};

fn curve(report: &TrainReport, stage: &str, model: &str) {
    let losses = report.losses(stage, model);
    if losses.is_empty() {
        return;
    }
    let chunk = losses.len().div_ceil(8);
    let means: Vec<String> = losses
        .chunks(chunk)
        .map(|c| format!("{:.3}", c.iter().sum::<f64>() / c.len() as f64))
        .collect();
    println!("{stage:>6} {model:>6}: {}", means.join(" "));
}

fn main() -> Result<()> {
    let cfg = RunConfig::small().with_overrides(std::env::args().skip(1))?;
    let corpus = generate_synthetic(&cfg.data)?;
    let global = train(&corpus, &cfg, Stage::Global, None)?;
    let done = train(&corpus, &cfg, Stage::Local, Some(global))?;
    for stage in [STAGE_GLOBAL, STAGE_LOCAL] {
        for model in ["hybrid", "cross"] {
            curve(&done.report, stage, model);
        }
    }
    let path = std::env::temp_dir().join("hybrid_example.ckpt");
    done.model.save(&path)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}
