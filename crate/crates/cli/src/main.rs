use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_encoder::corpus::generate_synthetic;
use hybrid_encoder::eval::{benchmark, evaluate_hit_at_n, sweep_degree, sweep_table, to_csv, EvalSettings};
use hybrid_encoder::pipeline::{
    build_store_to_dir, load_corpus, load_serving, train_to_dir, Layout, Manifest, Stage,
};
use hybrid_encoder::serving::{parse_requests, Method, Recommender, UserQuery};
use hybrid_encoder::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "hybrid", about = "Retrieve-then-rank ads recommendation with hybrid encoders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    candidates: Option<usize>,
    #[arg(long, global = true)]
    topn: Option<usize>,
    #[arg(long, global = true)]
    degree: Option<usize>,
    /// Output directory (default: paths.out_dir, or paths.data_dir for gen-data).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic topic corpus as TSV.
    GenData,
    /// Validate a TSV corpus and print its statistics.
    Ingest,
    Train {
        #[arg(long, default_value = "progressive")]
        stage: String,
    },
    BuildStore,
    /// Batch recommendation: `user_id<TAB>page|page` lines in, JSON lines out.
    Recommend {
        #[arg(long)]
        requests: PathBuf,
        #[arg(long, default_value = "hybrid")]
        method: String,
    },
    Evaluate {
        /// Comma-separated subset of siamese,hybrid,cross.
        #[arg(long, default_value = "siamese,hybrid,cross")]
        methods: String,
    },
    SweepDegree {
        #[arg(long, default_value = "1,2,3,4")]
        degrees: String,
    },
    Benchmark {
        #[arg(long, default_value = "25,50,100,200")]
        counts: String,
    },
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} `{x}`")))
        })
        .collect()
}

fn methods(s: &str) -> Result<Vec<Method>> {
    s.split(',').map(|m| m.trim().parse()).collect()
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_overrides(&c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.candidates {
        cfg.candidates = n;
    }
    if let Some(n) = c.topn {
        cfg.top_n = n;
    }
    if let Some(k) = c.degree {
        cfg.model.degree = k;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(cfg: &RunConfig, name: &str, body: &str) -> Result<()> {
    let path = Layout::new(&cfg.out_dir).report(name);
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(&path, body)?;
    Manifest::new("report", cfg).write(&path)?;
    print!("{body}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let layout = Layout::new(&cfg.out_dir);
    match cli.command {
        Command::GenData => {
            if let Some(s) = cli.common.seed {
                cfg.data.seed = s;
            }
            let dir = cli.common.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let corpus = generate_synthetic(&cfg.data)?;
            corpus.export_tsv(&dir)?;
            let mut m = Manifest::new("corpus", &cfg);
            m.set("data_seed", cfg.data.seed.to_string());
            m.write(&dir.join("interactions.tsv"))?;
            println!(
                "wrote {} users, {} ads, {} interactions to {}",
                corpus.users().len(),
                corpus.ads().len(),
                corpus.interactions().len(),
                dir.display()
            );
        }
        Command::Ingest => {
            let corpus = load_corpus(&cfg)?;
            let summary = serde_json::json!({
                "users": corpus.users().len(),
                "ads": corpus.ads().len(),
                "interactions": corpus.interactions().len(),
                "train": corpus.train().len(),
                "eval": corpus.eval().len(),
                "vocab": corpus.vocab().len(),
            });
            println!("{summary}");
        }
        Command::Train { stage } => {
            let stage: Stage = stage.parse()?;
            let corpus = load_corpus(&cfg)?;
            let t = train_to_dir(&corpus, &cfg, stage, &layout)?;
            println!(
                "stages {} done; checkpoint {}",
                t.report.stages_done.join(","),
                layout.checkpoint().display()
            );
        }
        Command::BuildStore => {
            let corpus = load_corpus(&cfg)?;
            let store = build_store_to_dir(&corpus, &cfg, &layout)?;
            println!("stored {} ads in {}", store.len(), layout.store().display());
        }
        Command::Recommend { requests, method } => {
            let method: Method = method.parse()?;
            let corpus = load_corpus(&cfg)?;
            let (model, store) = load_serving(&corpus, &cfg, &layout)?;
            let rec = Recommender::new(&model, &store, cfg.index.ef_search)?;
            let text = fs::read_to_string(&requests)
                .map_err(|e| Error::Data(format!("{}: {e}", requests.display())))?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (user, pages) in parse_requests(&text)? {
                let query = UserQuery::from_pages(&pages, &store.vocab, &model);
                let r = rec.recommend_with(method, &query, cfg.candidates, cfg.top_n)?;
                let line = serde_json::json!({ "user": user, "result": r });
                writeln!(out, "{line}")?;
            }
        }
        Command::Evaluate { methods: m } => {
            let corpus = load_corpus(&cfg)?;
            let (model, store) = load_serving(&corpus, &cfg, &layout)?;
            let settings = EvalSettings::from_run(&cfg, &methods(&m)?);
            let report = evaluate_hit_at_n(&model, &store, &corpus, &settings)?;
            let json = serde_json::to_string_pretty(&report).expect("plain report");
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(layout.report("eval.json"), json + "\n")?;
            write_report(&cfg, "eval.csv", &to_csv(&[report]))?;
        }
        Command::SweepDegree { degrees } => {
            let corpus = load_corpus(&cfg)?;
            let rows = sweep_degree(&corpus, &cfg, &list(&degrees, "degree")?)?;
            write_report(&cfg, "sweep.csv", &sweep_table(&rows, &cfg.hit_ns))?;
        }
        Command::Benchmark { counts } => {
            let corpus = load_corpus(&cfg)?;
            let (model, store) = load_serving(&corpus, &cfg, &layout)?;
            let settings = EvalSettings::from_run(&cfg, &Method::ALL);
            let reports = benchmark(&model, &store, &corpus, &settings, &list(&counts, "candidate count")?)?;
            write_report(&cfg, "benchmark.csv", &to_csv(&reports))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
