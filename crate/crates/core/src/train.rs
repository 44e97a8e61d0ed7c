//! Progressive training: global contrast learning for the retrieval towers,
//! then local contrast learning for the ranking head against negatives drawn
//! from the frozen retrieval policy's neighborhood.

use std::collections::HashMap;
use std::time::Instant;

use hybrid_tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::AnnIndex;
use crate::config::{Objective, TrainConfig};
use crate::corpus::{AdId, Corpus};
use crate::error::{Error, Result};
use crate::heads::{tape_attentive_pool, tape_rank_scores, HybridModel};

/// Token sequences and index pairs used by every training stage.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// User sequences sized for the user network.
    pub users: Vec<Vec<u32>>,
    /// User sequences sized for the interaction network.
    pub users_ua: Vec<Vec<u32>>,
    pub ads: Vec<Vec<u32>>,
    pub ad_ids: Vec<AdId>,
    /// `(user index, ad index)` of each training interaction, in time order.
    pub pairs: Vec<(usize, usize)>,
}

impl TrainData {
    pub fn new(corpus: &Corpus, model: &HybridModel) -> Result<Self> {
        let cfg = &model.config;
        let n_users = corpus.users().len();
        let users = (0..n_users).map(|u| corpus.user_tokens(u, cfg.unet.max_seq_len)).collect();
        let users_ua = (0..n_users).map(|u| corpus.user_tokens(u, cfg.uanet.max_seq_len)).collect();
        let ads: Vec<Vec<u32>> = (0..corpus.ads().len())
            .map(|a| corpus.ad_tokens(a, cfg.anet.max_seq_len))
            .collect();
        if let Some(a) = ads.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!(
                "ad {} has no in-vocabulary tokens",
                corpus.ads()[a].id
            )));
        }
        let pairs = corpus
            .train()
            .iter()
            .map(|it| Ok((corpus.user_idx(it.user)?, corpus.ad_idx(it.ad)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            users,
            users_ua,
            ads,
            ad_ids: corpus.ads().iter().map(|a| a.id).collect(),
            pairs,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub model: String,
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub stages_done: Vec<String>,
}

impl TrainReport {
    pub fn losses(&self, stage: &str, model: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.model == model)
            .map(|r| r.loss)
            .collect()
    }

    /// Line-delimited JSON records.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

pub const STAGE_GLOBAL: &str = "global";
pub const STAGE_LOCAL: &str = "local";

/// Deterministic stream for one (stage, example, epoch) triple.
pub fn example_rng(seed: u64, stage: &str, example: usize, epoch: usize) -> ChaCha8Rng {
    let tag = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(((example as u64) << 20) ^ epoch as u64);
    rng
}

/// `n` distinct ad indices drawn uniformly from `0..n_ads`, excluding
/// `positive`.
pub fn sample_global_negatives<R: Rng + ?Sized>(
    n_ads: usize,
    positive: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("need at least one negative".into()));
    }
    if n_ads < n + 1 || positive >= n_ads {
        return Err(Error::Data(format!(
            "cannot draw {n} negatives from a corpus of {n_ads} ads"
        )));
    }
    Ok(index::sample(rng, n_ads - 1, n)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect())
}

/// Uniform sample of `n` ads from a retrieved neighbor `pool` (the
/// positive removed). A pool too small after exclusion is used whole and
/// topped up with global negatives.
pub fn sample_from_pool<R: Rng + ?Sized>(
    pool: &[usize],
    positive: usize,
    n: usize,
    n_ads: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let rest: Vec<usize> = pool.iter().copied().filter(|&a| a != positive).collect();
    if rest.len() >= n {
        return Ok(index::sample(rng, rest.len(), n).into_iter().map(|i| rest[i]).collect());
    }
    log::warn!(
        "neighbor pool holds {} ads besides the positive; topping up {} global negatives",
        rest.len(),
        n - rest.len()
    );
    let mut out = rest;
    let mut taken: std::collections::HashSet<usize> = out.iter().copied().collect();
    taken.insert(positive);
    if n_ads < n + 1 {
        return Err(Error::Data(format!(
            "cannot draw {n} negatives from a corpus of {n_ads} ads"
        )));
    }
    while out.len() < n {
        let a = rng.random_range(0..n_ads);
        if taken.insert(a) {
            out.push(a);
        }
    }
    Ok(out)
}

/// Local negatives for one user: top-`pool_size` neighbors of `e_u` in
/// `index`, positive removed, `n` sampled uniformly without replacement.
pub fn sample_local_negatives<R: Rng + ?Sized>(
    e_u: &[f64],
    index: &AnnIndex,
    positive: AdId,
    pool_size: usize,
    n: usize,
    ef_search: usize,
    rng: &mut R,
) -> Result<Vec<AdId>> {
    if pool_size <= n {
        return Err(Error::Config(format!(
            "pool_size {pool_size} must exceed n {n}"
        )));
    }
    let pool: Vec<usize> = index
        .search(e_u, pool_size, ef_search.max(pool_size))?
        .iter()
        .map(|h| position(index, h.ad))
        .collect();
    let pos = index.ids().iter().position(|&a| a == positive).unwrap_or(usize::MAX);
    Ok(sample_from_pool(&pool, pos, n, index.len(), rng)?
        .into_iter()
        .map(|i| index.ids()[i])
        .collect())
}

fn position(index: &AnnIndex, ad: AdId) -> usize {
    index
        .ids()
        .iter()
        .position(|&a| a == ad)
        .expect("search returns indexed ids")
}

/// `-s_0 + log sum_j exp(s_j)` for scores with the positive first.
pub fn softmax_contrast_loss(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - scores[0])
}

/// `-s_0 + sum_{j>0} s_j`: the literal summed-negatives objective.
pub fn margin_contrast_loss(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    Ok(scores[1..].iter().sum::<f64>() - scores[0])
}

/// Tape loss over a `[1, 1 + n]` score row whose first entry is the positive.
pub fn contrast_loss(tape: &mut Tape, scores: Var, objective: Objective) -> Result<Var> {
    let c = tape.value(scores).cols();
    if c < 2 {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    match objective {
        Objective::Softmax => Ok(tape.cross_entropy(scores, 0)?),
        Objective::Margin => {
            let mut w = vec![1.0; c];
            w[0] = -1.0;
            let w = tape.constant(Tensor::new(&[1, c], w)?)?;
            let p = tape.mul(scores, w)?;
            Ok(tape.sum(p)?)
        }
    }
}

/// Siamese scores `[1, ads.len()]` of one user against candidate ads; each
/// side mean-pooled from its tower.
fn siamese_scores(tape: &mut Tape, e_u: Var, e_as: &[Var]) -> Result<Var> {
    let stacked = tape.concat(e_as, 0)?;
    let t = tape.transpose(stacked)?;
    Ok(tape.matmul(e_u, t)?)
}

fn mean_pool_rows(tape: &mut Tape, states: Var, start: usize, end: usize) -> Result<Var> {
    let s = tape.slice_rows(states, start, end)?;
    Ok(tape.mean_rows(s, &vec![true; end - start])?)
}

/// One contrastive example: user index and `[positive, negatives...]`.
#[derive(Debug, Clone)]
pub struct Example {
    pub user: usize,
    pub ads: Vec<usize>,
}

fn ensure_grads(store: &mut ParamStore, group: &[ParamId]) {
    for &id in group {
        if store.grad(id).is_none() {
            let n = store.value(id).numel();
            store.accumulate_grad(id, &vec![0.0; n]);
        }
    }
}

/// Siamese global-stage loss for a batch, averaged over examples.
pub fn siamese_batch_loss(
    tape: &mut Tape,
    model: &HybridModel,
    data: &TrainData,
    batch: &[Example],
    objective: Objective,
) -> Result<Var> {
    let user_seqs: Vec<&[u32]> = batch.iter().map(|e| data.users[e.user].as_slice()).collect();
    let users = model.unet.encode_batch(tape, &model.store, &user_seqs, None)?;
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut uniq: Vec<usize> = Vec::new();
    for e in batch {
        for &a in &e.ads {
            slot.entry(a).or_insert_with(|| {
                uniq.push(a);
                uniq.len() - 1
            });
        }
    }
    let ad_seqs: Vec<&[u32]> = uniq.iter().map(|&a| data.ads[a].as_slice()).collect();
    let ads = model.anet.encode_batch(tape, &model.store, &ad_seqs, None)?;
    let e_a = (0..uniq.len())
        .map(|i| {
            let (s, e) = ads.range(i);
            mean_pool_rows(tape, ads.states, s, e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let (s, e) = users.range(i);
        let e_u = mean_pool_rows(tape, users.states, s, e)?;
        let cands: Vec<Var> = ex.ads.iter().map(|a| e_a[slot[a]]).collect();
        let scores = siamese_scores(tape, e_u, &cands)?;
        losses.push(contrast_loss(tape, scores, objective)?);
    }
    mean_loss(tape, &losses)
}

fn mean_loss(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let all = tape.concat(losses, 1)?;
    let s = tape.sum(all)?;
    Ok(tape.scale(s, 1.0 / losses.len() as f64)?)
}

/// Ad hidden states computed once by the frozen ad network.
#[derive(Debug, Clone)]
pub struct FrozenAds {
    pub states: Vec<Tensor>,
}

impl FrozenAds {
    pub fn compute(model: &HybridModel, data: &TrainData) -> Result<Self> {
        let mut states = Vec::with_capacity(data.ads.len());
        for chunk in data.ads.chunks(256) {
            let seqs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
            for h in model.anet.hidden_states_batch(&model.store, &seqs)? {
                states.push(h.states);
            }
        }
        Ok(Self { states })
    }
}

/// Hybrid local-stage loss for a batch. Ad states come from `frozen` when
/// given, otherwise from the ad network on the tape.
pub fn hybrid_batch_loss(
    tape: &mut Tape,
    model: &HybridModel,
    data: &TrainData,
    batch: &[Example],
    frozen: Option<&FrozenAds>,
    objective: Objective,
) -> Result<Var> {
    let k = model.degree();
    let scale = model.config.pool_scale;
    let user_seqs: Vec<&[u32]> = batch.iter().map(|e| data.users_ua[e.user].as_slice()).collect();
    let users = model.uanet.encode_batch(tape, &model.store, &user_seqs, None)?;
    let theta = tape.param(&model.store, model.theta);
    let mut m_a_cache: HashMap<usize, Var> = HashMap::new();
    let live_ads = if frozen.is_none() {
        let mut uniq: Vec<usize> = batch.iter().flat_map(|e| e.ads.iter().copied()).collect();
        uniq.sort_unstable();
        uniq.dedup();
        let seqs: Vec<&[u32]> = uniq.iter().map(|&a| data.ads[a].as_slice()).collect();
        Some((uniq, model.anet.encode_batch(tape, &model.store, &seqs, None)?))
    } else {
        None
    };
    let mut losses = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let mut m_as = Vec::with_capacity(ex.ads.len());
        for &a in &ex.ads {
            let m = match m_a_cache.get(&a) {
                Some(&m) => m,
                None => {
                    let h = match (frozen, &live_ads) {
                        (Some(f), _) => tape.constant(f.states[a].clone())?,
                        (None, Some((uniq, b))) => {
                            let j = uniq.binary_search(&a).expect("collected above");
                            b.get(tape, j)?
                        }
                        (None, None) => unreachable!("one source is always present"),
                    };
                    let m = tape_attentive_pool(tape, theta, h, None, scale)?;
                    m_a_cache.insert(a, m);
                    m
                }
            };
            m_as.push(m);
        }
        let m_a = tape.concat(&m_as, 0)?;
        let h_ua = users.get(tape, i)?;
        let m_u = tape_attentive_pool(tape, m_a, h_ua, None, scale)?;
        let scores = tape_rank_scores(tape, m_u, m_a, ex.ads.len(), k)?;
        losses.push(contrast_loss(tape, scores, objective)?);
    }
    mean_loss(tape, &losses)
}

/// Cross-encoder loss for a batch; scores are the pre-sigmoid logits.
pub fn cross_batch_loss(
    tape: &mut Tape,
    model: &HybridModel,
    data: &TrainData,
    batch: &[Example],
    objective: Objective,
) -> Result<Var> {
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let ads: Vec<&[u32]> = ex.ads.iter().map(|&a| data.ads[a].as_slice()).collect();
        let logits = model.cross_logits(tape, &data.users[ex.user], &ads, None)?;
        losses.push(contrast_loss(tape, logits, objective)?);
    }
    mean_loss(tape, &losses)
}

/// Batches of example indices: successive epochs of a seeded shuffle.
fn schedule(n: usize, batch: usize, steps: usize, seed: u64, stage: &str) -> Vec<Vec<(usize, usize)>> {
    let mut rng = example_rng(seed, &format!("{stage}/order"), 0, 0);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    let mut out = Vec::with_capacity(steps);
    let mut tagged: Vec<(usize, usize)> = Vec::new();
    while out.len() < steps {
        if order.is_empty() {
            order = (0..n).collect();
            order.shuffle(&mut rng);
            order.reverse();
            epoch += 1;
        }
        tagged.push((order.pop().expect("nonempty"), epoch - 1));
        if tagged.len() == batch {
            out.push(std::mem::take(&mut tagged));
        }
    }
    out
}

/// Which models a stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub hybrid: bool,
    pub cross: bool,
}

fn optimizer(model: &HybridModel, group: Vec<ParamId>, lr: f64) -> Adam {
    Adam::new(
        &model.store,
        group,
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    )
}

fn step_with<F>(model: &mut HybridModel, adam: &mut Adam, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &HybridModel) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, model)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Invariant(format!("non-finite training loss {value}")));
    }
    tape.backward(loss)?;
    model.store.zero_grads();
    tape.accumulate_param_grads(&mut model.store);
    drop(tape);
    ensure_grads(&mut model.store, adam.group());
    adam.step(&mut model.store)?;
    model.store.zero_grads();
    Ok(value)
}

fn record(report: &mut TrainReport, stage: &str, model: &str, step: usize, loss: f64, start: Instant) {
    report.records.push(StepRecord {
        stage: stage.into(),
        model: model.into(),
        step,
        loss,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    });
}

/// Global contrast learning: the user and ad towers (and, if targeted, the
/// cross encoder) against uniformly sampled negatives. The interaction
/// network and disentangling queries are never touched.
pub fn train_stage_global(
    model: &mut HybridModel,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
    targets: Targets,
    report: &mut TrainReport,
) -> Result<()> {
    if data.pairs.is_empty() {
        return Err(Error::Data("no training interactions".into()));
    }
    let n_ads = data.ads.len();
    let batches = schedule(data.pairs.len(), config.batch_size, config.global_steps, seed, STAGE_GLOBAL);
    let examples = |batch: &[(usize, usize)]| {
        batch
            .iter()
            .map(|&(i, epoch)| {
                let (u, a) = data.pairs[i];
                let mut rng = example_rng(seed, STAGE_GLOBAL, i, epoch);
                let mut ads = vec![a];
                ads.extend(sample_global_negatives(n_ads, a, config.n_negatives, &mut rng)?);
                Ok(Example { user: u, ads })
            })
            .collect::<Result<Vec<_>>>()
    };
    if targets.hybrid {
        let mut group = model.unet.param_ids(&model.store);
        group.extend(model.anet.param_ids(&model.store));
        let mut adam = optimizer(model, group, config.lr_global);
        let start = Instant::now();
        for (step, batch) in batches.iter().enumerate() {
            let ex = examples(batch)?;
            let loss = step_with(model, &mut adam, |t, m| {
                siamese_batch_loss(t, m, data, &ex, config.objective)
            })?;
            record(report, STAGE_GLOBAL, "hybrid", step, loss, start);
        }
    }
    if targets.cross {
        if config.warm_start {
            let cross = model.cross.clone();
            model.warm_start_from_user_net(&cross)?;
        }
        let mut adam = optimizer(model, model.cross.param_ids(&model.store), config.lr_global);
        let start = Instant::now();
        for (step, batch) in batches.iter().take(config.cross_global_steps).enumerate() {
            let ex = examples(batch)?;
            let loss = step_with(model, &mut adam, |t, m| {
                cross_batch_loss(t, m, data, &ex, config.objective)
            })?;
            record(report, STAGE_GLOBAL, "cross", step, loss, start);
        }
    }
    report.stages_done.push(STAGE_GLOBAL.into());
    Ok(())
}

/// Top-`pool_size` ad indices for every training user under the frozen
/// retrieval towers, from an exact inner-product scan.
pub fn neighbor_pools(model: &HybridModel, data: &TrainData, pool_size: usize) -> Result<HashMap<usize, Vec<usize>>> {
    let ad_emb = model.encode_ads(&data.ads, 256)?;
    let items: Vec<(AdId, Vec<f64>)> = ad_emb
        .into_iter()
        .enumerate()
        .map(|(i, e)| (AdId(i as u64), e.e_a))
        .collect();
    let index = AnnIndex::exact(&items)?;
    let mut users: Vec<usize> = data.pairs.iter().map(|p| p.0).collect();
    users.sort_unstable();
    users.dedup();
    let seqs: Vec<Vec<u32>> = users.iter().map(|&u| data.users[u].clone()).collect();
    let e_u = model.encode_users(&seqs, 64)?;
    let mut pools = HashMap::with_capacity(users.len());
    for (u, q) in users.into_iter().zip(e_u) {
        let hits = index.exact_search(&q, pool_size)?;
        pools.insert(u, hits.iter().map(|h| h.ad.0 as usize).collect());
    }
    Ok(pools)
}

/// Local contrast learning: the interaction network and disentangling
/// queries (plus the ad network when `finetune_anet`) against negatives
/// sampled from each user's retrieved neighbor pool. The cross encoder, if
/// targeted, trains on the same negatives.
pub fn train_stage_local(
    model: &mut HybridModel,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
    targets: Targets,
    report: &mut TrainReport,
) -> Result<()> {
    if !report.stages_done.iter().any(|s| s == STAGE_GLOBAL) {
        return Err(Error::Invariant(
            "local stage requires a completed global stage".into(),
        ));
    }
    if data.pairs.is_empty() {
        return Err(Error::Data("no training interactions".into()));
    }
    let pools = neighbor_pools(model, data, config.pool_size)?;
    let frozen = if config.finetune_anet {
        None
    } else {
        Some(FrozenAds::compute(model, data)?)
    };
    let n_ads = data.ads.len();
    let batches = schedule(data.pairs.len(), config.batch_size, config.local_steps, seed, STAGE_LOCAL);
    let examples = |batch: &[(usize, usize)]| {
        batch
            .iter()
            .map(|&(i, epoch)| {
                let (u, a) = data.pairs[i];
                let mut rng = example_rng(seed, STAGE_LOCAL, i, epoch);
                let mut ads = vec![a];
                ads.extend(sample_from_pool(&pools[&u], a, config.n_negatives, n_ads, &mut rng)?);
                Ok(Example { user: u, ads })
            })
            .collect::<Result<Vec<_>>>()
    };
    if targets.hybrid {
        let mut group = model.uanet.param_ids(&model.store);
        group.push(model.theta);
        if config.finetune_anet {
            group.extend(model.anet.param_ids(&model.store));
        }
        let mut adam = optimizer(model, group, config.lr_local);
        let start = Instant::now();
        for (step, batch) in batches.iter().enumerate() {
            let ex = examples(batch)?;
            let loss = step_with(model, &mut adam, |t, m| {
                hybrid_batch_loss(t, m, data, &ex, frozen.as_ref(), config.objective)
            })?;
            record(report, STAGE_LOCAL, "hybrid", step, loss, start);
        }
    }
    if targets.cross {
        let mut adam = optimizer(model, model.cross.param_ids(&model.store), config.lr_local);
        let start = Instant::now();
        for (step, batch) in batches.iter().take(config.cross_local_steps).enumerate() {
            let ex = examples(batch)?;
            let loss = step_with(model, &mut adam, |t, m| {
                cross_batch_loss(t, m, data, &ex, config.objective)
            })?;
            record(report, STAGE_LOCAL, "cross", step, loss, start);
        }
    }
    report.stages_done.push(STAGE_LOCAL.into());
    Ok(())
}

/// Both stages back to back from a fresh initialization.
pub fn train_progressive(
    corpus: &Corpus,
    model_config: &crate::config::ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(HybridModel, TrainReport)> {
    let mut model = HybridModel::init(model_config, seed)?;
    let data = TrainData::new(corpus, &model)?;
    let targets = Targets {
        hybrid: true,
        cross: config.train_cross,
    };
    let mut report = TrainReport::default();
    train_stage_global(&mut model, &data, config, seed, targets, &mut report)?;
    train_stage_local(&mut model, &data, config, seed, targets, &mut report)?;
    Ok((model, report))
}
