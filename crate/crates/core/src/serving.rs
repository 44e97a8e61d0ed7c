//! Online two-stage path: precomputed ad store, per-request user caching,
//! and forward-pass accounting.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::Instant;

use hybrid_tensor::{checkpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::ann::{rank_order, AnnIndex, Hit};
use crate::config::IndexConfig;
use crate::corpus::{special, user_sequence, AdId, Corpus, Vocabulary};
use crate::encoder::HiddenStates;
use crate::error::{Error, Result};
use crate::heads::{dot, HybridModel};

const STORE_FILE: &str = "store.bin";
const INDEX_FILE: &str = "index.bin";
const VOCAB_FILE: &str = "vocab.txt";

/// Everything the online path needs about the ad inventory: token
/// sequences, retrieval embeddings, disentangled embeddings and the index
/// over the retrieval embeddings.
#[derive(Debug, Clone)]
pub struct AdStore {
    pub d_model: usize,
    pub degree: usize,
    pub ids: Vec<AdId>,
    pub tokens: Vec<Vec<u32>>,
    pub e_a: Vec<Vec<f64>>,
    pub m_a: Vec<Tensor>,
    pub index: AnnIndex,
    pub vocab: Vocabulary,
    slot: HashMap<AdId, usize>,
}

impl AdStore {
    fn assemble(
        d_model: usize,
        degree: usize,
        ids: Vec<AdId>,
        tokens: Vec<Vec<u32>>,
        e_a: Vec<Vec<f64>>,
        m_a: Vec<Tensor>,
        index: AnnIndex,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let mut slot = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if slot.insert(id, i).is_some() {
                return Err(Error::DuplicateId(id.0));
            }
        }
        if index.ids() != ids.as_slice() {
            return Err(Error::Invariant("index and store list different ads".into()));
        }
        Ok(Self {
            d_model,
            degree,
            ids,
            tokens,
            e_a,
            m_a,
            index,
            vocab,
            slot,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slot(&self, ad: AdId) -> Result<usize> {
        self.slot.get(&ad).copied().ok_or(Error::UnknownAd(ad.0))
    }

    /// Rejects a model whose shapes differ from the ones the store was
    /// built with.
    pub fn check_model(&self, model: &HybridModel) -> Result<()> {
        if model.degree() != self.degree {
            return Err(Error::Degree {
                left: self.degree,
                right: model.degree(),
            });
        }
        if model.d_model() != self.d_model {
            return Err(Error::Dimension {
                left: self.d_model,
                right: model.d_model(),
            });
        }
        Ok(())
    }

    /// Writes `store.bin`, `index.bin` and `vocab.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tensors: Vec<(String, Tensor)> = vec![(
            "store.meta".into(),
            Tensor::new(&[2], vec![self.d_model as f64, self.degree as f64])?,
        )];
        for (i, id) in self.ids.iter().enumerate() {
            let toks = self.tokens[i].iter().map(|&t| t as f64).collect::<Vec<_>>();
            tensors.push((format!("ad/{id}/tokens"), Tensor::new(&[toks.len()], toks)?));
            tensors.push((format!("ad/{id}/e_a"), Tensor::new(&[self.d_model], self.e_a[i].clone())?));
            tensors.push((format!("ad/{id}/m_a"), self.m_a[i].clone()));
        }
        checkpoint::save(dir.join(STORE_FILE), tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        self.index.save(dir.join(INDEX_FILE))?;
        let words: Vec<&str> = (special::COUNT as u32..self.vocab.len() as u32)
            .map(|i| self.vocab.word(i).unwrap_or(""))
            .collect();
        fs::write(dir.join(VOCAB_FILE), words.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tensors = checkpoint::load(dir.join(STORE_FILE))?;
        let mut it = tensors.into_iter();
        let (name, meta) = it
            .next()
            .ok_or_else(|| Error::Data("empty store file".into()))?;
        if name != "store.meta" || meta.numel() != 2 {
            return Err(Error::Data("store file lacks its header".into()));
        }
        let (d_model, degree) = (meta.data()[0] as usize, meta.data()[1] as usize);
        let rest: Vec<(String, Tensor)> = it.collect();
        if rest.len() % 3 != 0 {
            return Err(Error::Data("store file has a truncated ad record".into()));
        }
        let n = rest.len() / 3;
        let (mut ids, mut tokens, mut e_a, mut m_a) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for rec in rest.chunks_exact(3) {
            let id = parse_ad_name(&rec[0].0, "tokens")?;
            if parse_ad_name(&rec[1].0, "e_a")? != id || parse_ad_name(&rec[2].0, "m_a")? != id {
                return Err(Error::Data(format!("store record for ad {id} is out of order")));
            }
            ids.push(id);
            tokens.push(rec[0].1.data().iter().map(|&t| t as u32).collect());
            e_a.push(rec[1].1.data().to_vec());
            let m = rec[2].1.clone();
            if m.dims2()? != (degree, d_model) {
                return Err(Error::Degree {
                    left: m.rows(),
                    right: degree,
                });
            }
            m_a.push(m);
        }
        let index = AnnIndex::load(dir.join(INDEX_FILE))?;
        let words = fs::read_to_string(dir.join(VOCAB_FILE))?
            .lines()
            .map(str::to_owned)
            .collect::<Vec<_>>();
        let vocab = Vocabulary::from_words(words);
        Self::assemble(d_model, degree, ids, tokens, e_a, m_a, index, vocab)
    }
}

fn parse_ad_name(name: &str, field: &str) -> Result<AdId> {
    name.strip_prefix("ad/")
        .and_then(|r| r.strip_suffix(&format!("/{field}")))
        .and_then(|id| id.parse().ok())
        .map(AdId)
        .ok_or_else(|| Error::Data(format!("unexpected store entry `{name}`")))
}

/// One A-Net pass per ad yields `E_a` and `M_a`; the index is built over
/// the `E_a`.
pub fn build_ad_store(model: &HybridModel, corpus: &Corpus, index: &IndexConfig, seed: u64) -> Result<AdStore> {
    let max = model.config.anet.max_seq_len;
    let tokens: Vec<Vec<u32>> = (0..corpus.ads().len()).map(|a| corpus.ad_tokens(a, max)).collect();
    let ids: Vec<AdId> = corpus.ads().iter().map(|a| a.id).collect();
    build_from_tokens(model, ids, tokens, corpus.vocab().clone(), index, seed)
}

pub fn build_from_tokens(
    model: &HybridModel,
    ids: Vec<AdId>,
    tokens: Vec<Vec<u32>>,
    vocab: Vocabulary,
    index: &IndexConfig,
    seed: u64,
) -> Result<AdStore> {
    if ids.is_empty() {
        return Err(Error::Data("no ads to store".into()));
    }
    let enc = model.encode_ads(&tokens, 128)?;
    let items: Vec<(AdId, Vec<f64>)> = ids.iter().copied().zip(enc.iter().map(|e| e.e_a.clone())).collect();
    let index = AnnIndex::build(&items, index, seed)?;
    let (e_a, m_a) = enc.into_iter().map(|e| (e.e_a, e.m_a)).unzip();
    AdStore::assemble(model.d_model(), model.degree(), ids, tokens, e_a, m_a, index, vocab)
}

/// Ranking method applied to the shared candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Siamese,
    Hybrid,
    Cross,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Siamese, Method::Hybrid, Method::Cross];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Siamese => "siamese",
            Self::Hybrid => "hybrid",
            Self::Cross => "cross",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(Self::Siamese),
            "hybrid" => Ok(Self::Hybrid),
            "cross" => Ok(Self::Cross),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Encoder pass counters and per-phase wall-clock for one request.
/// Counters are atomic so candidate scoring may fan out.
#[derive(Debug, Default)]
pub struct Ledger {
    unet: AtomicU64,
    uanet: AtomicU64,
    cross: AtomicU64,
    encode_ns: AtomicU64,
    ann_ns: AtomicU64,
    rank_ns: AtomicU64,
}

impl Ledger {
    pub fn count(&self, method: Encoder, passes: u64) {
        let c = match method {
            Encoder::User => &self.unet,
            Encoder::Interaction => &self.uanet,
            Encoder::Cross => &self.cross,
        };
        c.fetch_add(passes, AtomicOrdering::Relaxed);
    }

    fn time(&self, phase: Phase, since: Instant) {
        let ns = since.elapsed().as_nanos() as u64;
        let c = match phase {
            Phase::Encode => &self.encode_ns,
            Phase::Ann => &self.ann_ns,
            Phase::Rank => &self.rank_ns,
        };
        c.fetch_add(ns, AtomicOrdering::Relaxed);
    }

    pub fn snapshot(&self, epsilon: f64) -> LedgerSnapshot {
        let ms = |c: &AtomicU64| c.load(AtomicOrdering::Relaxed) as f64 / 1e6;
        LedgerSnapshot {
            unet: self.unet.load(AtomicOrdering::Relaxed),
            uanet: self.uanet.load(AtomicOrdering::Relaxed),
            cross: self.cross.load(AtomicOrdering::Relaxed),
            encode_ms: ms(&self.encode_ns),
            ann_ms: ms(&self.ann_ns),
            rank_ms: ms(&self.rank_ns),
            epsilon,
        }
    }
}

/// Which encoder a forward pass went through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    User,
    Interaction,
    Cross,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Encode,
    Ann,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub unet: u64,
    pub uanet: u64,
    pub cross: u64,
    pub encode_ms: f64,
    pub ann_ms: f64,
    pub rank_ms: f64,
    /// Interaction-network depth over user-network depth.
    pub epsilon: f64,
}

impl LedgerSnapshot {
    /// Transformer forward passes; ANN search is not a pass.
    pub fn passes(&self) -> u64 {
        self.unet + self.uanet + self.cross
    }

    pub fn total_ms(&self) -> f64 {
        self.encode_ms + self.ann_ms + self.rank_ms
    }
}

/// A user's token sequence sized for each encoder that reads it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserQuery {
    pub unet: Vec<u32>,
    pub uanet: Vec<u32>,
    pub cross: Vec<u32>,
}

impl UserQuery {
    pub fn from_pages(pages: &[String], vocab: &Vocabulary, model: &HybridModel) -> Self {
        let c = &model.config;
        Self {
            unet: user_sequence(pages, vocab, c.unet.max_seq_len),
            uanet: user_sequence(pages, vocab, c.uanet.max_seq_len),
            cross: user_sequence(pages, vocab, c.cross.max_seq_len),
        }
    }

    pub fn from_corpus(corpus: &Corpus, user: usize, model: &HybridModel) -> Self {
        Self::from_pages(&corpus.users()[user].pages, corpus.vocab(), model)
    }
}

/// Per-request state: the user's retrieval embedding, the retrieved
/// candidates and, once computed, the cached interaction-network states.
#[derive(Debug)]
pub struct RequestContext<'q> {
    pub query: &'q UserQuery,
    pub e_u: Vec<f64>,
    pub candidates: Vec<Hit>,
    h_ua: Option<HiddenStates>,
    pub ledger: Ledger,
}

impl RequestContext<'_> {
    pub fn cached_states(&self) -> Option<&HiddenStates> {
        self.h_ua.as_ref()
    }
}

/// One ranked ad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub ad: u64,
    pub retrieval_score: f64,
    pub rank_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecResult {
    pub method: Method,
    pub ads: Vec<Scored>,
    pub candidates: usize,
    pub ledger: LedgerSnapshot,
}

impl RecResult {
    pub fn ids(&self) -> Vec<AdId> {
        self.ads.iter().map(|s| AdId(s.ad)).collect()
    }
}

/// The online recommender over a frozen model and store.
#[derive(Debug, Clone, Copy)]
pub struct Recommender<'a> {
    pub model: &'a HybridModel,
    pub store: &'a AdStore,
    pub ef_search: usize,
}

impl<'a> Recommender<'a> {
    pub fn new(model: &'a HybridModel, store: &'a AdStore, ef_search: usize) -> Result<Self> {
        store.check_model(model)?;
        Ok(Self {
            model,
            store,
            ef_search,
        })
    }

    fn epsilon(&self) -> f64 {
        self.model.config.epsilon()
    }

    /// Encodes the user once and retrieves `c` candidates (clamped to the
    /// store size).
    pub fn retrieve<'q>(&self, query: &'q UserQuery, c: usize) -> Result<RequestContext<'q>> {
        if query.unet.is_empty() {
            return Err(Error::EmptySequence);
        }
        if c == 0 {
            return Err(Error::Config("candidate count must be >= 1".into()));
        }
        let c = if c > self.store.len() {
            log::warn!("candidate count {c} exceeds the {} stored ads; clamping", self.store.len());
            self.store.len()
        } else {
            c
        };
        let ledger = Ledger::default();
        let t = Instant::now();
        let (e_u, _) = self.model.encode_user(&query.unet)?;
        ledger.count(Encoder::User, 1);
        ledger.time(Phase::Encode, t);
        let t = Instant::now();
        let candidates = self.store.index.search(&e_u, c, self.ef_search)?;
        ledger.time(Phase::Ann, t);
        Ok(RequestContext {
            query,
            e_u,
            candidates,
            h_ua: None,
            ledger,
        })
    }

    /// Runs the interaction network at most once per request.
    pub fn cache_user_states(&self, ctx: &mut RequestContext<'_>) -> Result<()> {
        if ctx.h_ua.is_none() {
            let t = Instant::now();
            ctx.h_ua = Some(self.model.encode_user_interaction(&ctx.query.uanet)?);
            ctx.ledger.count(Encoder::Interaction, 1);
            ctx.ledger.time(Phase::Encode, t);
        }
        Ok(())
    }

    /// Scores of `method` for every candidate, in candidate order.
    pub fn score(&self, ctx: &mut RequestContext<'_>, method: Method) -> Result<Vec<f64>> {
        match method {
            Method::Siamese => Ok(ctx.candidates.iter().map(|h| h.score).collect()),
            Method::Hybrid => {
                self.cache_user_states(ctx)?;
                let t = Instant::now();
                let m_as = ctx
                    .candidates
                    .iter()
                    .map(|h| Ok(&self.store.m_a[self.store.slot(h.ad)?]))
                    .collect::<Result<Vec<_>>>()?;
                let h_ua = ctx.h_ua.as_ref().expect("cached above");
                let s = self.model.rank_scores(h_ua, &m_as)?;
                ctx.ledger.time(Phase::Rank, t);
                Ok(s)
            }
            Method::Cross => {
                let t = Instant::now();
                let ads = ctx
                    .candidates
                    .iter()
                    .map(|h| Ok(self.store.tokens[self.store.slot(h.ad)?].as_slice()))
                    .collect::<Result<Vec<_>>>()?;
                let s = self.model.cross_rel_batch(&ctx.query.cross, &ads)?;
                ctx.ledger.count(Encoder::Cross, ads.len() as u64);
                ctx.ledger.time(Phase::Rank, t);
                Ok(s)
            }
        }
    }

    /// Candidates reordered by `scores`, top `n` kept.
    pub fn top_n(&self, ctx: &RequestContext<'_>, scores: &[f64], n: usize, method: Method) -> RecResult {
        let mut order: Vec<(Hit, f64)> = ctx
            .candidates
            .iter()
            .zip(scores)
            .map(|(h, &s)| (Hit { ad: h.ad, score: s }, h.score))
            .collect();
        order.sort_by(|a, b| rank_order(&a.0, &b.0));
        order.truncate(n);
        RecResult {
            method,
            ads: order
                .into_iter()
                .map(|(h, r)| Scored {
                    ad: h.ad.0,
                    retrieval_score: r,
                    rank_score: h.score,
                })
                .collect(),
            candidates: ctx.candidates.len(),
            ledger: ctx.ledger.snapshot(self.epsilon()),
        }
    }

    fn run(&self, query: &UserQuery, c: usize, n: usize, method: Method) -> Result<RecResult> {
        if n == 0 || n > c {
            return Err(Error::Config(format!("need 1 <= top_n ({n}) <= candidates ({c})")));
        }
        if method == Method::Hybrid && std::thread::available_parallelism().map_or(1, |p| p.get()) > 1 {
            return self.run_hybrid_parallel(query, c, n);
        }
        let mut ctx = self.retrieve(query, c)?;
        let scores = self.score(&mut ctx, method)?;
        Ok(self.top_n(&ctx, &scores, n, method))
    }

    /// The user and interaction encodings are independent, so with spare
    /// cores they run side by side.
    fn run_hybrid_parallel(&self, query: &UserQuery, c: usize, n: usize) -> Result<RecResult> {
        if query.uanet.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (ctx, h_ua) = std::thread::scope(|s| {
            let side = s.spawn(|| {
                let t = Instant::now();
                let h = self.model.encode_user_interaction(&query.uanet);
                (h, t.elapsed())
            });
            let ctx = self.retrieve(query, c);
            (ctx, side.join().expect("encoder thread panicked"))
        });
        let mut ctx = ctx?;
        let (h, elapsed) = h_ua;
        ctx.h_ua = Some(h?);
        ctx.ledger.count(Encoder::Interaction, 1);
        ctx.ledger
            .encode_ns
            .fetch_add(elapsed.as_nanos() as u64, AtomicOrdering::Relaxed);
        let scores = self.score(&mut ctx, Method::Hybrid)?;
        Ok(self.top_n(&ctx, &scores, n, Method::Hybrid))
    }

    /// Retrieve `c` candidates, rank them with the hybrid head, keep `n`.
    pub fn recommend(&self, query: &UserQuery, c: usize, n: usize) -> Result<RecResult> {
        self.run(query, c, n, Method::Hybrid)
    }

    /// Same retrieval, ranked by one cross-encoder pass per candidate.
    pub fn recommend_cross_baseline(&self, query: &UserQuery, c: usize, n: usize) -> Result<RecResult> {
        self.run(query, c, n, Method::Cross)
    }

    /// Same retrieval, ranked by the retrieval score alone.
    pub fn recommend_siamese_baseline(&self, query: &UserQuery, c: usize, n: usize) -> Result<RecResult> {
        self.run(query, c, n, Method::Siamese)
    }

    pub fn recommend_with(&self, method: Method, query: &UserQuery, c: usize, n: usize) -> Result<RecResult> {
        self.run(query, c, n, method)
    }

    /// Hybrid score of one stored ad computed from scratch: fresh ad
    /// encoding, fresh interaction-network pass.
    pub fn rank_score_from_scratch(&self, query: &UserQuery, ad: AdId) -> Result<f64> {
        let slot = self.store.slot(ad)?;
        let enc = self.model.encode_ad_full(&self.store.tokens[slot])?;
        let h_ua = self.model.encode_user_interaction(&query.uanet)?;
        self.model.rank_score(&h_ua, &enc.m_a)
    }
}

/// `user id <TAB> page | page | ...` per line; blank lines skipped.
pub fn parse_requests(text: &str) -> Result<Vec<(u64, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            path: "<requests>".into(),
            line: i + 1,
            message: m.into(),
        };
        let (id, pages) = line.split_once('\t').ok_or_else(|| bad("expected `id<TAB>pages`"))?;
        let id = id.trim().parse().map_err(|_| bad("user id is not an integer"))?;
        let pages = pages.split('|').map(|p| p.trim().to_owned()).filter(|p| !p.is_empty()).collect();
        out.push((id, pages));
    }
    Ok(out)
}

/// Retrieval-score agreement of a cached embedding with its store entry.
pub fn retrieval_score(store: &AdStore, e_u: &[f64], ad: AdId) -> Result<f64> {
    Ok(dot(e_u, &store.e_a[store.slot(ad)?]))
}
