//! Hit@N evaluation over shared candidate sets, the degree sweep, and the
//! pass/latency benchmark.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{rank_order, Hit};
use crate::config::RunConfig;
use crate::corpus::{AdId, Corpus};
use crate::error::{Error, Result};
use crate::heads::HybridModel;
use crate::serving::{build_ad_store, AdStore, Method, Recommender, UserQuery};
use crate::train::{train_stage_global, train_stage_local, TrainData, TrainReport, Targets};

/// Fixed report columns.
pub const CSV_HEADER: &str = "method,candidates,hit1,hit3,hit5,passes,mean_ms,p95_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub candidates: usize,
    pub hit_ns: Vec<usize>,
    /// Evaluate a seeded subset of this many interactions; 0 means all.
    pub limit: usize,
    pub methods: Vec<Method>,
    pub ef_search: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_run(config: &RunConfig, methods: &[Method]) -> Self {
        Self {
            candidates: config.candidates,
            hit_ns: config.hit_ns.clone(),
            limit: config.eval_limit,
            methods: methods.to_vec(),
            ef_search: config.index.ef_search,
            seed: config.seed,
        }
    }

    /// Requested cutoffs plus the three fixed report columns, ascending.
    fn cutoffs(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.hit_ns.iter().copied().chain([1, 3, 5]).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    /// `(N, Hit@N)`, ascending in N.
    pub hits: Vec<(usize, f64)>,
    pub mean_passes: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl MethodReport {
    pub fn hit(&self, n: usize) -> Option<f64> {
        self.hits.iter().find(|h| h.0 == n).map(|h| h.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub candidates: usize,
    pub interactions: usize,
    /// Share of interactions whose clicked ad was retrieved at all.
    pub retrieval_recall: f64,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn hit(&self, m: Method, n: usize) -> f64 {
        self.method(m).and_then(|r| r.hit(n)).unwrap_or(f64::NAN)
    }

    /// The report with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for m in &mut r.methods {
            m.mean_ms = 0.0;
            m.p95_ms = 0.0;
        }
        r
    }
}

/// 0-based position of `target` once `candidates` are reordered by
/// `scores`, or `None` if it was not retrieved.
pub fn rank_of(candidates: &[Hit], scores: &[f64], target: AdId) -> Option<usize> {
    let mut order: Vec<Hit> = candidates
        .iter()
        .zip(scores)
        .map(|(h, &s)| Hit { ad: h.ad, score: s })
        .collect();
    order.sort_by(rank_order);
    order.iter().position(|h| h.ad == target)
}

/// Fraction of `ranks` below each cutoff; `None` ranks count as misses.
pub fn hit_rates(ranks: &[Option<usize>], cutoffs: &[usize]) -> Vec<(usize, f64)> {
    cutoffs
        .iter()
        .map(|&n| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(p) if *p < n)).count();
            (n, hits as f64 / ranks.len().max(1) as f64)
        })
        .collect()
}

/// Nearest-rank 95th percentile.
pub fn p95(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Indices into the corpus' eval interactions that get evaluated.
pub fn eval_subset(total: usize, limit: usize, seed: u64) -> Vec<usize> {
    if limit == 0 || limit >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xe7a1);
    let mut idx = index::sample(&mut rng, total, limit).into_vec();
    idx.sort_unstable();
    idx
}

/// For each evaluated interaction, one retrieval of shared candidates,
/// then every method ranks that same set.
pub fn evaluate_hit_at_n(
    model: &HybridModel,
    store: &AdStore,
    corpus: &Corpus,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let eval = corpus.eval();
    if eval.is_empty() {
        return Err(Error::Data("no eval interactions".into()));
    }
    if settings.methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    let rec = Recommender::new(model, store, settings.ef_search)?;
    let cutoffs = settings.cutoffs();
    let subset = eval_subset(eval.len(), settings.limit, settings.seed);
    let k = settings.methods.len();
    let mut ranks = vec![Vec::with_capacity(subset.len()); k];
    let mut passes = vec![0u64; k];
    let mut times = vec![Vec::with_capacity(subset.len()); k];
    let mut retrieved = 0usize;
    let mut c_used = 0;
    for &i in &subset {
        let it = &eval[i];
        let query = UserQuery::from_corpus(corpus, corpus.user_idx(it.user)?, model);
        let t = Instant::now();
        let mut ctx = rec.retrieve(&query, settings.candidates)?;
        let retrieval_ms = t.elapsed().as_secs_f64() * 1e3;
        c_used = ctx.candidates.len();
        retrieved += usize::from(ctx.candidates.iter().any(|h| h.ad == it.ad));
        for (j, &m) in settings.methods.iter().enumerate() {
            let before = ctx.ledger.snapshot(0.0).passes();
            let t = Instant::now();
            let scores = rec.score(&mut ctx, m)?;
            times[j].push(retrieval_ms + t.elapsed().as_secs_f64() * 1e3);
            let after = ctx.ledger.snapshot(0.0).passes();
            // the shared user pass plus whatever this method added
            passes[j] += 1 + after - before;
            ranks[j].push(rank_of(&ctx.candidates, &scores, it.ad));
        }
    }
    let n = subset.len() as f64;
    let methods = settings
        .methods
        .iter()
        .enumerate()
        .map(|(j, &m)| MethodReport {
            method: m,
            hits: hit_rates(&ranks[j], &cutoffs),
            mean_passes: passes[j] as f64 / n,
            mean_ms: times[j].iter().sum::<f64>() / n,
            p95_ms: p95(&times[j]),
        })
        .collect();
    Ok(EvalReport {
        candidates: c_used,
        interactions: subset.len(),
        retrieval_recall: retrieved as f64 / n,
        methods,
    })
}

/// Transformer passes one request of `method` costs with `candidates`
/// retrieved.
pub fn standalone_passes(method: Method, candidates: usize) -> u64 {
    match method {
        Method::Siamese => 1,
        Method::Hybrid => 2,
        Method::Cross => 1 + candidates as u64,
    }
}

/// One CSV line per method and report.
pub fn to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for m in &r.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.method,
                r.candidates,
                m.hit(1).unwrap_or(f64::NAN),
                m.hit(3).unwrap_or(f64::NAN),
                m.hit(5).unwrap_or(f64::NAN),
                m.mean_passes,
                m.mean_ms,
                m.p95_ms
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub method: Method,
    pub candidates: usize,
    pub hit1: f64,
    pub hit3: f64,
    pub hit5: f64,
    pub passes: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!("report must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |m: String| Error::Parse {
                path: "<report>".into(),
                line: i + 2,
                message: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            Ok(CsvRow {
                method: f[0].parse().map_err(|e: Error| bad(e.to_string()))?,
                candidates: f[1].parse().map_err(|e| bad(format!("`{}`: {e}", f[1])))?,
                hit1: num(f[2])?,
                hit3: num(f[3])?,
                hit5: num(f[4])?,
                passes: num(f[5])?,
                mean_ms: num(f[6])?,
                p95_ms: num(f[7])?,
            })
        })
        .collect()
}

/// One degree's result in the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub degree: usize,
    pub report: EvalReport,
}

/// Trains the retrieval towers once, then for each degree trains a fresh
/// ranking head on top and evaluates siamese and hybrid on the same data.
pub fn sweep_degree(corpus: &Corpus, config: &RunConfig, degrees: &[usize]) -> Result<Vec<SweepRow>> {
    if degrees.is_empty() {
        return Err(Error::Config("empty degree list".into()));
    }
    let seed = config.seed;
    let mut base = HybridModel::init(&config.model.clone().with_vocab(corpus.vocab().len()), seed)?;
    let data = TrainData::new(corpus, &base)?;
    let targets = Targets {
        hybrid: true,
        cross: false,
    };
    let mut stage1 = TrainReport::default();
    train_stage_global(&mut base, &data, &config.train, seed, targets, &mut stage1)?;
    let settings = EvalSettings::from_run(config, &[Method::Siamese, Method::Hybrid]);
    degrees
        .iter()
        .map(|&k| {
            let mut model = base.with_degree(k, seed)?;
            let mut report = stage1.clone();
            train_stage_local(&mut model, &data, &config.train, seed, targets, &mut report)?;
            let store = build_ad_store(&model, corpus, &config.index, seed)?;
            Ok(SweepRow {
                degree: k,
                report: evaluate_hit_at_n(&model, &store, corpus, &settings)?,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow], cutoffs: &[usize]) -> String {
    let mut out = String::from("degree,method");
    for n in cutoffs {
        out.push_str(&format!(",hit{n}"));
    }
    out.push('\n');
    for row in rows {
        for m in &row.report.methods {
            out.push_str(&format!("{},{}", row.degree, m.method));
            for &n in cutoffs {
                out.push_str(&format!(",{}", m.hit(n).unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
    }
    out
}

/// Every method at each candidate count, with per-request pass counts
/// checked against the cost model of each method.
pub fn benchmark(
    model: &HybridModel,
    store: &AdStore,
    corpus: &Corpus,
    settings: &EvalSettings,
    counts: &[usize],
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(counts.len());
    for &c in counts {
        let mut per_method = Vec::new();
        // one method per pass so that no method inherits another's cache
        for &m in &settings.methods {
            let s = EvalSettings {
                candidates: c,
                methods: vec![m],
                ..settings.clone()
            };
            let r = evaluate_hit_at_n(model, store, corpus, &s)?;
            let expected = standalone_passes(m, r.candidates) as f64;
            let got = r.methods[0].mean_passes;
            if got != expected {
                return Err(Error::Invariant(format!(
                    "{m} used {got} passes per request at c={c}, expected {expected}"
                )));
            }
            per_method.push(r);
        }
        let first = per_method[0].clone();
        out.push(EvalReport {
            methods: per_method.into_iter().flat_map(|r| r.methods).collect(),
            ..first
        });
    }
    Ok(out)
}
