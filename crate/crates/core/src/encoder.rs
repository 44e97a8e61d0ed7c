//! Post-layernorm transformer encoder stack.
//!
//! Several sequences can be encoded in one pass by stacking their rows:
//! projections, feed-forward blocks and layer norms are row-wise, and
//! attention runs per sequence, so stacking changes nothing numerically
//! while feeding the matrix kernels larger operands.

use hybrid_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::EncoderConfig;
use crate::corpus::special;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// Projection weights of one attention block. Inputs multiply on the left:
/// `x · W`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Handles into a [`ParamStore`] for one encoder stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerParams>,
    /// `[2, d_model]` when the config asks for segment embeddings.
    pub seg_emb: Option<ParamId>,
}

/// Last-layer outputs of one sequence; `mask[j]` marks real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Rows of real (unmasked) tokens.
    pub fn real_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(j, _)| self.states.row(j))
    }
}

/// Hidden states of a stacked batch; sequence `i` occupies rows
/// `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone)]
pub struct BatchStates {
    pub states: Var,
    pub offsets: Vec<usize>,
}

impl BatchStates {
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, i: usize) -> (usize, usize) {
        (self.offsets[i], self.offsets[i + 1])
    }

    pub fn get(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        let (s, e) = self.range(i);
        if s == 0 && e == *self.offsets.last().unwrap_or(&0) {
            return Ok(self.states);
        }
        Ok(tape.slice_rows(self.states, s, e)?)
    }
}

fn normal<R: Rng + ?Sized>(store: &mut ParamStore, name: String, shape: &[usize], rng: &mut R) -> Result<ParamId> {
    Ok(store.insert_normal(name, shape, INIT_STD, rng)?)
}

/// Dense weights get std `1/sqrt(fan_in)`.
fn dense<R: Rng + ?Sized>(store: &mut ParamStore, name: String, shape: &[usize], rng: &mut R) -> Result<ParamId> {
    Ok(store.insert_normal(name, shape, 1.0 / (shape[0] as f64).sqrt(), rng)?)
}

fn zeros(store: &mut ParamStore, name: String, shape: &[usize]) -> Result<ParamId> {
    Ok(store.insert(name, Tensor::zeros(shape))?)
}

fn ones(store: &mut ParamStore, name: String, shape: &[usize]) -> Result<ParamId> {
    Ok(store.insert(name, Tensor::ones(shape))?)
}

impl Encoder {
    /// Registers freshly initialized parameters under `prefix` (e.g. `"unet."`).
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(prefix.trim_end_matches('.'))?;
        let (d, f) = (config.d_model, config.d_ffn);
        let p = |s: &str| format!("{prefix}{s}");
        let tok_emb = normal(store, p("tok_emb"), &[config.vocab_size, d], rng)?;
        let pos_emb = normal(store, p("pos_emb"), &[config.max_seq_len, d], rng)?;
        let emb_ln_g = ones(store, p("emb_ln.g"), &[1, d])?;
        let emb_ln_b = zeros(store, p("emb_ln.b"), &[1, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let q = |s: &str| format!("{prefix}layer{l}.{s}");
            let attn = AttentionParams {
                wq: dense(store, q("attn.wq"), &[d, d], rng)?,
                bq: zeros(store, q("attn.bq"), &[1, d])?,
                wk: dense(store, q("attn.wk"), &[d, d], rng)?,
                bk: zeros(store, q("attn.bk"), &[1, d])?,
                wv: dense(store, q("attn.wv"), &[d, d], rng)?,
                bv: zeros(store, q("attn.bv"), &[1, d])?,
                wo: dense(store, q("attn.wo"), &[d, d], rng)?,
                bo: zeros(store, q("attn.bo"), &[1, d])?,
            };
            layers.push(LayerParams {
                attn,
                ln1_g: ones(store, q("ln1.g"), &[1, d])?,
                ln1_b: zeros(store, q("ln1.b"), &[1, d])?,
                w1: dense(store, q("ffn.w1"), &[d, f], rng)?,
                b1: zeros(store, q("ffn.b1"), &[1, f])?,
                w2: dense(store, q("ffn.w2"), &[f, d], rng)?,
                b2: zeros(store, q("ffn.b2"), &[1, d])?,
                ln2_g: ones(store, q("ln2.g"), &[1, d])?,
                ln2_b: zeros(store, q("ln2.b"), &[1, d])?,
            });
        }
        let seg_emb = if config.segments {
            Some(normal(store, p("seg_emb"), &[2, d], rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            seg_emb,
        })
    }

    /// Looks up existing parameters, checking their shapes against `config`.
    pub fn bind(store: &ParamStore, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate(prefix.trim_end_matches('.'))?;
        let (d, f) = (config.d_model, config.d_ffn);
        let get = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(&name)?;
            let t = store.value(id);
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(id)
        };
        let p = |s: &str| format!("{prefix}{s}");
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let q = |s: &str| format!("{prefix}layer{l}.{s}");
            layers.push(LayerParams {
                attn: AttentionParams {
                    wq: get(q("attn.wq"), &[d, d])?,
                    bq: get(q("attn.bq"), &[1, d])?,
                    wk: get(q("attn.wk"), &[d, d])?,
                    bk: get(q("attn.bk"), &[1, d])?,
                    wv: get(q("attn.wv"), &[d, d])?,
                    bv: get(q("attn.bv"), &[1, d])?,
                    wo: get(q("attn.wo"), &[d, d])?,
                    bo: get(q("attn.bo"), &[1, d])?,
                },
                ln1_g: get(q("ln1.g"), &[1, d])?,
                ln1_b: get(q("ln1.b"), &[1, d])?,
                w1: get(q("ffn.w1"), &[d, f])?,
                b1: get(q("ffn.b1"), &[1, f])?,
                w2: get(q("ffn.w2"), &[f, d])?,
                b2: get(q("ffn.b2"), &[1, d])?,
                ln2_g: get(q("ln2.g"), &[1, d])?,
                ln2_b: get(q("ln2.b"), &[1, d])?,
            });
        }
        if store.id(&format!("{prefix}layer{}.attn.wq", config.n_layers)).is_ok() {
            return Err(Error::Config(format!(
                "checkpoint has more {prefix} layers than the configured {}",
                config.n_layers
            )));
        }
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            tok_emb: get(p("tok_emb"), &[config.vocab_size, d])?,
            pos_emb: get(p("pos_emb"), &[config.max_seq_len, d])?,
            emb_ln_g: get(p("emb_ln.g"), &[1, d])?,
            emb_ln_b: get(p("emb_ln.b"), &[1, d])?,
            layers,
            seg_emb: if config.segments {
                Some(get(p("seg_emb"), &[2, d])?)
            } else {
                None
            },
        })
    }

    /// Every parameter id of this stack.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix(&self.prefix)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfVocab {
                id: t as usize,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encodes one sequence. `mask` (default: all real) marks real tokens;
    /// padded positions never influence real ones. Dropout applies only when
    /// `rng` is given and the configured rate is positive.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[u32],
        mask: Option<&[bool]>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        if let Some(m) = mask {
            if m.len() != tokens.len() {
                return Err(Error::Dimension {
                    left: m.len(),
                    right: tokens.len(),
                });
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::EmptySequence);
            }
        }
        let batch = self.encode_stacked(tape, store, &[tokens], mask, rng)?;
        Ok(batch.states)
    }

    /// Encodes unpadded sequences in one stacked pass.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[u32]],
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<BatchStates> {
        self.encode_stacked(tape, store, seqs, None, rng)
    }

    fn encode_stacked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[u32]],
        mask: Option<&[bool]>,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<BatchStates> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut offsets = vec![0];
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            ids.extend(s.iter().map(|&t| t as usize));
            positions.extend(0..s.len());
            offsets.push(ids.len());
        }
        let tok = tape.embedding(store, self.tok_emb, &ids)?;
        let pos = tape.embedding(store, self.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(seg) = self.seg_emb {
            let mut segments = Vec::with_capacity(ids.len());
            for s in seqs {
                let sep = s.iter().position(|&t| t == special::SEP).unwrap_or(s.len());
                segments.extend((0..s.len()).map(|i| usize::from(i > sep)));
            }
            let e = tape.embedding(store, seg, &segments)?;
            x = tape.add(x, e)?;
        }
        let g = tape.param(store, self.emb_ln_g);
        let b = tape.param(store, self.emb_ln_b);
        let mut x = tape.layer_norm(x, g, b)?;
        let rate = self.config.dropout;
        for layer in &self.layers {
            let a = attention_stacked(tape, store, x, &layer.attn, self.config.n_heads, &offsets, mask)?;
            let a = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => tape.dropout(a, rate, r)?,
                _ => a,
            };
            let h = tape.add(x, a)?;
            let g = tape.param(store, layer.ln1_g);
            let b = tape.param(store, layer.ln1_b);
            let h = tape.layer_norm(h, g, b)?;
            let f = feed_forward(tape, store, h, layer)?;
            let f = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => tape.dropout(f, rate, r)?,
                _ => f,
            };
            let o = tape.add(h, f)?;
            let g = tape.param(store, layer.ln2_g);
            let b = tape.param(store, layer.ln2_b);
            x = tape.layer_norm(o, g, b)?;
        }
        Ok(BatchStates { states: x, offsets })
    }

    /// Forward-only encoding into a plain [`HiddenStates`].
    pub fn hidden_states(&self, store: &ParamStore, tokens: &[u32], mask: Option<&[bool]>) -> Result<HiddenStates> {
        let mut tape = Tape::inference();
        let v = self.encode(&mut tape, store, tokens, mask, None)?;
        Ok(HiddenStates {
            states: tape.value(v).clone(),
            mask: mask.map_or_else(|| vec![true; tokens.len()], <[bool]>::to_vec),
        })
    }

    /// Forward-only encoding of several unpadded sequences.
    pub fn hidden_states_batch(&self, store: &ParamStore, seqs: &[&[u32]]) -> Result<Vec<HiddenStates>> {
        let mut tape = Tape::inference();
        let batch = self.encode_batch(&mut tape, store, seqs, None)?;
        let all = tape.value(batch.states);
        let d = all.cols();
        (0..batch.len())
            .map(|i| {
                let (s, e) = batch.range(i);
                Ok(HiddenStates {
                    states: Tensor::new(&[e - s, d], all.data()[s * d..e * d].to_vec())?,
                    mask: vec![true; e - s],
                })
            })
            .collect()
    }
}

fn feed_forward(tape: &mut Tape, store: &ParamStore, x: Var, layer: &LayerParams) -> Result<Var> {
    let w1 = tape.param(store, layer.w1);
    let b1 = tape.param(store, layer.b1);
    let w2 = tape.param(store, layer.w2);
    let b2 = tape.param(store, layer.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, w2)?;
    Ok(tape.add_row(o, b2)?)
}

fn project(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Multi-head scaled dot-product attention of `q` rows over `k`/`v` rows.
///
/// `mask` (length = rows of `k`) marks keys that may be attended; masked
/// keys get zero weight. Logits are divided by `sqrt(d_model / n_heads)`.
pub fn mhsa(
    tape: &mut Tape,
    store: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let kv_rows = tape.value(k).rows();
    if tape.value(v).rows() != kv_rows {
        return Err(Error::Dimension {
            left: kv_rows,
            right: tape.value(v).rows(),
        });
    }
    if let Some(m) = mask {
        if m.len() != kv_rows {
            return Err(Error::Dimension {
                left: m.len(),
                right: kv_rows,
            });
        }
    }
    let qp = project(tape, store, q, params.wq, params.bq)?;
    let kp = project(tape, store, k, params.wk, params.bk)?;
    let vp = project(tape, store, v, params.wv, params.bv)?;
    let heads = attend_heads(tape, qp, kp, vp, n_heads, mask)?;
    project(tape, store, heads, params.wo, params.bo)
}

/// Per-head attention over already-projected operands; heads concatenated.
fn attend_heads(tape: &mut Tape, qp: Var, kp: Var, vp: Var, n_heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let d = tape.value(qp).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let kt = tape.transpose(kp)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = if n_heads == 1 { qp } else { tape.slice_cols(qp, s, e)? };
        let kh = if n_heads == 1 { kt } else { tape.slice_rows(kt, s, e)? };
        let vh = if n_heads == 1 { vp } else { tape.slice_cols(vp, s, e)? };
        let logits = tape.matmul(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let w = match mask {
            Some(m) => tape.masked_softmax_rows(logits, m)?,
            None => tape.softmax_rows(logits)?,
        };
        heads.push(tape.matmul(w, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        Ok(tape.concat(&heads, 1)?)
    }
}

/// Self-attention over stacked sequences: shared projections, attention
/// restricted to each sequence's own rows.
fn attention_stacked(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &AttentionParams,
    n_heads: usize,
    offsets: &[usize],
    mask: Option<&[bool]>,
) -> Result<Var> {
    if offsets.len() == 2 {
        return mhsa(tape, store, x, x, x, params, n_heads, mask);
    }
    let qp = project(tape, store, x, params.wq, params.bq)?;
    let kp = project(tape, store, x, params.wk, params.bk)?;
    let vp = project(tape, store, x, params.wv, params.bv)?;
    let mut outs = Vec::with_capacity(offsets.len() - 1);
    for w in offsets.windows(2) {
        let (s, e) = (w[0], w[1]);
        let q = tape.slice_rows(qp, s, e)?;
        let k = tape.slice_rows(kp, s, e)?;
        let v = tape.slice_rows(vp, s, e)?;
        outs.push(attend_heads(tape, q, k, v, n_heads, None)?);
    }
    let heads = tape.concat(&outs, 0)?;
    project(tape, store, heads, params.wo, params.bo)
}
