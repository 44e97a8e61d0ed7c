//! Relevance heads over the four encoder stacks: siamese retrieval,
//! hybrid ranking with disentangled ad embeddings, and the cross encoder.

use std::path::Path;

use hybrid_tensor::{checkpoint, sigmoid, softmax_in_place, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::special;
use crate::encoder::{Encoder, HiddenStates, INIT_STD};
use crate::error::{Error, Result};

pub const THETA: &str = "hybrid.theta";
pub const CROSS_HEAD: &str = "cross.w_a";

/// Stream ids for parameter initialization, so that one component's shape
/// (e.g. the degree) never shifts another component's initial values.
const INIT_STREAMS: [(&str, u64); 6] = [
    ("unet", 1),
    ("anet", 2),
    ("uanet", 3),
    ("cross", 4),
    ("theta", 5),
    ("cross_head", 6),
];

fn init_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let stream = INIT_STREAMS
        .iter()
        .find(|(n, _)| *n == component)
        .map(|(_, s)| *s)
        .expect("known component");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Precomputed ad-side representations.
#[derive(Debug, Clone, PartialEq)]
pub struct AdEncoding {
    /// Mean-pooled retrieval embedding.
    pub e_a: Vec<f64>,
    /// Disentangled embeddings, `[degree, d_model]`.
    pub m_a: Tensor,
}

/// The full parameter set plus handles for every head.
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub unet: Encoder,
    pub anet: Encoder,
    pub uanet: Encoder,
    pub cross: Encoder,
    /// Attention queries of the disentangled ad embeddings, `[degree, d_model]`.
    pub theta: ParamId,
    /// Cross-encoder output projection, `[d_model, 1]`.
    pub w_a: ParamId,
}

impl HybridModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng = |name| init_rng(seed, if config.shared_init { "unet" } else { name });
        let unet = Encoder::init(&mut store, "unet.", &config.unet, &mut rng("unet"))?;
        let anet = Encoder::init(&mut store, "anet.", &config.anet, &mut rng("anet"))?;
        let uanet = Encoder::init(&mut store, "uanet.", &config.uanet, &mut rng("uanet"))?;
        let cross = Encoder::init(&mut store, "cross.", &config.cross, &mut rng("cross"))?;
        let d = config.anet.d_model;
        let theta = store.insert_normal(THETA, &[config.degree, d], INIT_STD, &mut init_rng(seed, "theta"))?;
        let w_a = store.insert_normal(
            CROSS_HEAD,
            &[config.cross.d_model, 1],
            INIT_STD,
            &mut init_rng(seed, "cross_head"),
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            unet,
            anet,
            uanet,
            cross,
            theta,
            w_a,
        })
    }

    /// Binds `config` to an existing parameter store (e.g. a loaded checkpoint).
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let unet = Encoder::bind(&store, "unet.", &config.unet)?;
        let anet = Encoder::bind(&store, "anet.", &config.anet)?;
        let uanet = Encoder::bind(&store, "uanet.", &config.uanet)?;
        let cross = Encoder::bind(&store, "cross.", &config.cross)?;
        let theta = store.id(THETA)?;
        let k = store.value(theta).rows();
        if k != config.degree {
            return Err(Error::Degree {
                left: k,
                right: config.degree,
            });
        }
        let w_a = store.id(CROSS_HEAD)?;
        Ok(Self {
            config: config.clone(),
            store,
            unet,
            anet,
            uanet,
            cross,
            theta,
            w_a,
        })
    }

    /// Same parameters with freshly initialized disentangling queries of
    /// another degree; every other tensor is copied unchanged.
    pub fn with_degree(&self, degree: usize, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.degree = degree;
        config.validate()?;
        let mut fresh = ParamStore::new();
        let theta = fresh.insert_normal(THETA, &[degree, self.d_model()], INIT_STD, &mut init_rng(seed, "theta"))?;
        let theta = fresh.value(theta).clone();
        let tensors = self
            .store
            .named_tensors()
            .map(|(n, t)| (n.to_owned(), if n == THETA { theta.clone() } else { t.clone() }))
            .collect();
        Self::from_store(&config, ParamStore::from_named(tensors)?)
    }

    /// Copies the user network's tensors into the encoder under `target`
    /// wherever name and shape agree; returns how many were copied.
    pub fn warm_start_from_user_net(&mut self, target: &Encoder) -> Result<usize> {
        let src = self.unet.prefix.clone();
        let pairs: Vec<(ParamId, Tensor)> = self
            .store
            .named_tensors()
            .filter_map(|(n, t)| {
                let rest = n.strip_prefix(src.as_str())?;
                let id = self.store.id(&format!("{}{rest}", target.prefix)).ok()?;
                (self.store.value(id).shape() == t.shape()).then(|| (id, t.clone()))
            })
            .collect();
        let n = pairs.len();
        for (id, t) in pairs {
            self.store.set(id, t)?;
        }
        Ok(n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::save(path, self.store.named_tensors())?)
    }

    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let store = ParamStore::from_named(checkpoint::load(path)?)?;
        Self::from_store(config, store)
    }

    pub fn degree(&self) -> usize {
        self.config.degree
    }

    pub fn d_model(&self) -> usize {
        self.config.anet.d_model
    }

    /// `(E_u, H^u)` through the user network.
    pub fn encode_user(&self, tokens: &[u32]) -> Result<(Vec<f64>, HiddenStates)> {
        let h = self.unet.hidden_states(&self.store, tokens, None)?;
        Ok((mean_pool(&h)?, h))
    }

    /// `(E_a, H^a)` through the ad network.
    pub fn encode_ad(&self, tokens: &[u32]) -> Result<(Vec<f64>, HiddenStates)> {
        let h = self.anet.hidden_states(&self.store, tokens, None)?;
        Ok((mean_pool(&h)?, h))
    }

    /// `H^{ua}`: the cached user states the ad embeddings attend over.
    pub fn encode_user_interaction(&self, tokens: &[u32]) -> Result<HiddenStates> {
        self.uanet.hidden_states(&self.store, tokens, None)
    }

    pub fn disentangle_ad(&self, h_a: &HiddenStates) -> Result<Tensor> {
        attentive_pool(self.store.value(self.theta), h_a, self.config.pool_scale)
    }

    pub fn ad_attend_user(&self, m_a: &Tensor, h_ua: &HiddenStates) -> Result<Tensor> {
        attentive_pool(m_a, h_ua, self.config.pool_scale)
    }

    pub fn encode_ad_full(&self, tokens: &[u32]) -> Result<AdEncoding> {
        let (e_a, h) = self.encode_ad(tokens)?;
        Ok(AdEncoding {
            e_a,
            m_a: self.disentangle_ad(&h)?,
        })
    }

    /// Ad encodings for many ads, stacked `chunk` sequences per pass.
    pub fn encode_ads(&self, ads: &[Vec<u32>], chunk: usize) -> Result<Vec<AdEncoding>> {
        let mut out = Vec::with_capacity(ads.len());
        for group in ads.chunks(chunk.max(1)) {
            let seqs: Vec<&[u32]> = group.iter().map(Vec::as_slice).collect();
            for h in self.anet.hidden_states_batch(&self.store, &seqs)? {
                out.push(AdEncoding {
                    e_a: mean_pool(&h)?,
                    m_a: self.disentangle_ad(&h)?,
                });
            }
        }
        Ok(out)
    }

    /// Retrieval embeddings for many users, stacked `chunk` per pass.
    pub fn encode_users(&self, users: &[Vec<u32>], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(users.len());
        for group in users.chunks(chunk.max(1)) {
            let seqs: Vec<&[u32]> = group.iter().map(Vec::as_slice).collect();
            for h in self.unet.hidden_states_batch(&self.store, &seqs)? {
                out.push(mean_pool(&h)?);
            }
        }
        Ok(out)
    }

    /// Hybrid score of one ad against cached user states.
    pub fn rank_score(&self, h_ua: &HiddenStates, m_a: &Tensor) -> Result<f64> {
        rel_rank(&self.ad_attend_user(m_a, h_ua)?, m_a)
    }

    /// Hybrid scores of many ads against the same cached user states.
    pub fn rank_scores(&self, h_ua: &HiddenStates, m_as: &[&Tensor]) -> Result<Vec<f64>> {
        rank_scores(h_ua, m_as, self.config.pool_scale)
    }

    /// `σ(H_[CLS] · W_A)` for one user/ad pair.
    pub fn cross_rel(&self, user: &[u32], ad: &[u32]) -> Result<f64> {
        let seq = cross_sequence(user, ad, self.config.cross.max_seq_len)?;
        let mut tape = Tape::inference();
        let h = self.cross.encode(&mut tape, &self.store, &seq, None, None)?;
        let cls = tape.slice_rows(h, 0, 1)?;
        let w = tape.param(&self.store, self.w_a);
        let logit = tape.matmul(cls, w)?;
        Ok(sigmoid(tape.value(logit).item()))
    }

    /// Cross scores for several candidate ads, all sequences in one stacked pass.
    pub fn cross_rel_batch(&self, user: &[u32], ads: &[&[u32]]) -> Result<Vec<f64>> {
        if ads.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference();
        let logits = self.cross_logits(&mut tape, user, ads, None)?;
        Ok(tape.value(logits).data().iter().map(|&l| sigmoid(l)).collect())
    }

    /// Cross-encoder logits `[1, ads]` on `tape`.
    pub fn cross_logits(
        &self,
        tape: &mut Tape,
        user: &[u32],
        ads: &[&[u32]],
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        let max = self.config.cross.max_seq_len;
        let seqs = ads
            .iter()
            .map(|a| cross_sequence(user, a, max))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let batch = self.cross.encode_batch(tape, &self.store, &refs, rng)?;
        let cls = batch
            .offsets
            .iter()
            .take(batch.len())
            .map(|&o| tape.slice_rows(batch.states, o, o + 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let cls = if cls.len() == 1 { cls[0] } else { tape.concat(&cls, 0)? };
        let w = tape.param(&self.store, self.w_a);
        let logits = tape.matmul(cls, w)?;
        Ok(tape.transpose(logits)?)
    }
}

/// `[CLS] user [SEP] ad`, dropping the oldest user tokens first when the
/// pair does not fit in `max_len`.
pub fn cross_sequence(user: &[u32], ad: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if user.is_empty() && ad.is_empty() {
        return Err(Error::EmptySequence);
    }
    if max_len < 3 {
        return Err(Error::Config(format!("cross max_seq_len {max_len} below 3")));
    }
    let ad = &ad[..ad.len().min(max_len - 2)];
    let room = max_len - 2 - ad.len();
    let user = &user[user.len().saturating_sub(room)..];
    let mut seq = Vec::with_capacity(user.len() + ad.len() + 2);
    seq.push(special::CLS);
    seq.extend_from_slice(user);
    seq.push(special::SEP);
    seq.extend_from_slice(ad);
    Ok(seq)
}

/// Mean of the real rows.
pub fn mean_pool(h: &HiddenStates) -> Result<Vec<f64>> {
    let d = h.states.cols();
    let mut out = vec![0.0; d];
    let mut n = 0usize;
    for row in h.real_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Each query row attends over the real rows of `h`:
/// `softmax(scale · q_i · H^T) · H`. Returns `[queries, d_model]`.
pub fn attentive_pool(queries: &Tensor, h: &HiddenStates, scale: f64) -> Result<Tensor> {
    let (k, d) = queries.dims2()?;
    if k == 0 {
        return Err(Error::Degree { left: 0, right: 1 });
    }
    if h.states.cols() != d {
        return Err(Error::Dimension {
            left: d,
            right: h.states.cols(),
        });
    }
    let rows: Vec<&[f64]> = h.real_rows().collect();
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut out = vec![0.0; k * d];
    let mut w = vec![0.0; rows.len()];
    for i in 0..k {
        let q = queries.row(i);
        for (wj, r) in w.iter_mut().zip(&rows) {
            *wj = scale * dot(q, r);
        }
        softmax_in_place(&mut w);
        let o = &mut out[i * d..(i + 1) * d];
        for (wj, r) in w.iter().zip(&rows) {
            for (x, v) in o.iter_mut().zip(r.iter()) {
                *x += wj * v;
            }
        }
    }
    Ok(Tensor::new(&[k, d], out)?)
}

/// Inner product of the retrieval embeddings.
pub fn rel_retr(e_u: &[f64], e_a: &[f64]) -> Result<f64> {
    if e_u.len() != e_a.len() {
        return Err(Error::Dimension {
            left: e_u.len(),
            right: e_a.len(),
        });
    }
    Ok(dot(e_u, e_a))
}

/// Inner product of the flattened ad-related user embeddings and
/// disentangled ad embeddings.
pub fn rel_rank(m_u: &Tensor, m_a: &Tensor) -> Result<f64> {
    let (ku, du) = m_u.dims2()?;
    let (ka, da) = m_a.dims2()?;
    if ku != ka {
        return Err(Error::Degree { left: ku, right: ka });
    }
    if du != da {
        return Err(Error::Dimension { left: du, right: da });
    }
    Ok(dot(m_u.data(), m_a.data()))
}

/// Hybrid scores of several candidates against one set of cached user
/// states, with all attention logits from a single matrix product.
pub fn rank_scores(h_ua: &HiddenStates, m_as: &[&Tensor], scale: f64) -> Result<Vec<f64>> {
    if m_as.is_empty() {
        return Ok(Vec::new());
    }
    let (k, d) = m_as[0].dims2()?;
    if h_ua.states.cols() != d {
        return Err(Error::Dimension {
            left: d,
            right: h_ua.states.cols(),
        });
    }
    let real: Vec<f64> = h_ua.real_rows().flatten().copied().collect();
    let n = real.len() / d.max(1);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mut stacked = Vec::with_capacity(m_as.len() * k * d);
    for m in m_as {
        let (km, dm) = m.dims2()?;
        if km != k {
            return Err(Error::Degree { left: km, right: k });
        }
        if dm != d {
            return Err(Error::Dimension { left: dm, right: d });
        }
        stacked.extend_from_slice(m.data());
    }
    let queries = Tensor::new(&[m_as.len() * k, d], stacked)?;
    let h = Tensor::new(&[n, d], real)?;
    let mut w = queries.matmul(&h.transpose()?)?;
    for row in w.data_mut().chunks_exact_mut(n) {
        row.iter_mut().for_each(|x| *x *= scale);
        softmax_in_place(row);
    }
    let m_u = w.matmul(&h)?;
    Ok(m_u
        .data()
        .chunks_exact(k * d)
        .zip(queries.data().chunks_exact(k * d))
        .map(|(u, a)| dot(u, a))
        .collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tape form of [`attentive_pool`] over rows selected by `mask`
/// (all rows when `None`).
pub fn tape_attentive_pool(
    tape: &mut Tape,
    queries: Var,
    states: Var,
    mask: Option<&[bool]>,
    scale: f64,
) -> Result<Var> {
    let st = tape.transpose(states)?;
    let logits = tape.matmul(queries, st)?;
    let logits = if scale == 1.0 { logits } else { tape.scale(logits, scale)? };
    let w = match mask {
        Some(m) => tape.masked_softmax_rows(logits, m)?,
        None => tape.softmax_rows(logits)?,
    };
    Ok(tape.matmul(w, states)?)
}

/// Tape form of [`rel_rank`] for `candidates` stacked blocks of `degree`
/// rows each; returns the scores as `[1, candidates]`.
pub fn tape_rank_scores(tape: &mut Tape, m_u: Var, m_a: Var, candidates: usize, degree: usize) -> Result<Var> {
    let d = tape.value(m_a).cols();
    let prod = tape.mul(m_u, m_a)?;
    let flat = tape.reshape(prod, candidates, degree * d)?;
    let ones = tape.constant(Tensor::ones(&[degree * d, 1]))?;
    let s = tape.matmul(flat, ones)?;
    Ok(tape.transpose(s)?)
}
