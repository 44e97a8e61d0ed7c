//! Named finite-difference checks; each returns the worst relative error
//! for one seed.

use hybrid_encoder::config::{EncoderConfig, ModelConfig, Objective};
use hybrid_encoder::corpus::AdId;
use hybrid_encoder::encoder::mhsa;
use hybrid_encoder::heads::{tape_attentive_pool, tape_rank_scores};
use hybrid_encoder::train::{
    contrast_loss, cross_batch_loss, hybrid_batch_loss, siamese_batch_loss, Example, FrozenAds, TrainData,
};
use hybrid_encoder::HybridModel;
use hybrid_tensor::gradcheck::{check, DEFAULT_STEP, DENOM_FLOOR};
use hybrid_tensor::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
pub const TOL: f64 = 1e-4;

pub type Check = fn(u64) -> f64;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element gets its own gradient.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.value(y).shape());
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn leaves<F>(seed: u64, shapes: &[&[usize]], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    check(&inputs, DEFAULT_STEP, |t, v| {
        let y = f(t, v)?;
        weighted(t, y, seed)
    })
    .unwrap()
    .max_rel_error
}

/// Tape gradients of `f` with respect to the store parameters `ids`,
/// against central differences of the forward pass.
pub fn param_check<F>(store: &ParamStore, ids: &[ParamId], f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut store = store.clone();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &store);
    tape.backward(loss).unwrap();
    store.zero_grads();
    tape.accumulate_param_grads(&mut store);
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| store.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
        .collect();
    let eval = |s: &ParamStore| {
        let mut t = Tape::inference();
        let l = f(&mut t, s);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (&id, a) in ids.iter().zip(&analytic) {
        for i in 0..a.numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + DEFAULT_STEP;
            let plus = eval(&store);
            store.value_mut(id).data_mut()[i] = orig - DEFAULT_STEP;
            let minus = eval(&store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let g = a.data()[i];
            worst = worst.max((g - numeric).abs() / g.abs().max(numeric.abs()).max(DENOM_FLOOR));
        }
    }
    worst
}

/// A one-layer model with every weight redrawn from U(-1, 1), so that no
/// path is numerically silent.
pub fn small_model(seed: u64, degree: usize) -> HybridModel {
    let enc = EncoderConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 2,
        d_ffn: 8,
        vocab_size: 14,
        max_seq_len: 10,
        ..EncoderConfig::default()
    };
    let config = ModelConfig {
        unet: enc.clone(),
        anet: enc.clone(),
        uanet: enc.clone(),
        cross: EncoderConfig { segments: true, ..enc },
        degree,
        pool_scale: 0.5,
        shared_init: false,
    };
    let mut model = HybridModel::init(&config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let shape = model.store.value(id).shape().to_vec();
        model.store.set(id, rand_tensor(&mut rng, &shape)).unwrap();
    }
    model
}

pub fn small_data(seed: u64) -> (TrainData, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut seq = |n: usize| (0..n).map(|_| rng.random_range(5..14)).collect::<Vec<u32>>();
    let users: Vec<Vec<u32>> = (0..2).map(|i| seq(3 + i)).collect();
    let ads: Vec<Vec<u32>> = (0..4).map(|i| seq(2 + i % 2)).collect();
    let data = TrainData {
        users_ua: users.clone(),
        users,
        ads,
        ad_ids: (0..4).map(AdId).collect(),
        pairs: vec![(0, 0), (1, 2)],
    };
    let batch = vec![
        Example { user: 0, ads: vec![0, 1, 3] },
        Example { user: 1, ads: vec![2, 0, 1] },
    ];
    (data, batch)
}

const MASK5: [bool; 5] = [true, false, true, true, false];

fn global_loss(seed: u64, objective: Objective) -> f64 {
    let model = small_model(seed, 2);
    let (data, batch) = small_data(seed);
    let mut ids = model.unet.param_ids(&model.store);
    ids.extend(model.anet.param_ids(&model.store));
    param_check(&model.store, &ids, |t, s| {
        let m = HybridModel::from_store(&model.config, s.clone()).unwrap();
        siamese_batch_loss(t, &m, &data, &batch, objective).unwrap()
    })
}

fn local_loss(seed: u64, objective: Objective, live_ads: bool) -> f64 {
    let model = small_model(seed, 2);
    let (data, batch) = small_data(seed);
    let frozen = FrozenAds::compute(&model, &data).unwrap();
    let mut ids = model.uanet.param_ids(&model.store);
    ids.push(model.theta);
    if live_ads {
        ids.extend(model.anet.param_ids(&model.store));
    }
    param_check(&model.store, &ids, |t, s| {
        let m = HybridModel::from_store(&model.config, s.clone()).unwrap();
        let f = (!live_ads).then_some(&frozen);
        hybrid_batch_loss(t, &m, &data, &batch, f, objective).unwrap()
    })
}

/// Every differentiable op and loss, by name.
pub fn all_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", |s| leaves(s, &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]))),
        ("transpose", |s| leaves(s, &[&[3, 4]], |t, v| t.transpose(v[0]))),
        ("add", |s| leaves(s, &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]))),
        ("sub", |s| leaves(s, &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]))),
        ("mul", |s| leaves(s, &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]))),
        ("scale", |s| leaves(s, &[&[2, 3]], |t, v| t.scale(v[0], -1.7))),
        ("add_row", |s| leaves(s, &[&[4, 3], &[1, 3]], |t, v| t.add_row(v[0], v[1]))),
        ("softmax_rows", |s| leaves(s, &[&[3, 5]], |t, v| t.softmax_rows(v[0]))),
        ("masked_softmax_rows", |s| {
            leaves(s, &[&[3, 5]], |t, v| t.masked_softmax_rows(v[0], &MASK5))
        }),
        ("layer_norm", |s| {
            leaves(s, &[&[3, 6], &[1, 6], &[1, 6]], |t, v| t.layer_norm(v[0], v[1], v[2]))
        }),
        ("gelu", |s| leaves(s, &[&[3, 4]], |t, v| t.gelu(v[0]))),
        ("sigmoid", |s| leaves(s, &[&[3, 4]], |t, v| t.sigmoid(v[0]))),
        ("mean_rows", |s| leaves(s, &[&[5, 3]], |t, v| t.mean_rows(v[0], &MASK5))),
        ("concat", |s| {
            leaves(s, &[&[2, 3], &[1, 3], &[3, 2]], |t, v| {
                let a = t.concat(&[v[0], v[1]], 0)?;
                t.concat(&[a, v[2]], 1)
            })
        }),
        ("slices_reshape", |s| {
            leaves(s, &[&[4, 6]], |t, v| {
                let a = t.slice_rows(v[0], 1, 3)?;
                let b = t.slice_cols(a, 2, 5)?;
                t.reshape(b, 3, 2)
            })
        }),
        ("cross_entropy", |s| leaves(s, &[&[1, 6]], |t, v| t.cross_entropy(v[0], 3))),
        ("embedding", |s| {
            let model = small_model(s, 1);
            let table = model.unet.tok_emb;
            param_check(&model.store, &[table], |t, st| {
                let e = t.embedding(st, table, &[3, 7, 3, 0]).unwrap();
                weighted(t, e, s).unwrap()
            })
        }),
        ("mhsa_params", |s| {
            let model = small_model(s, 1);
            let attn = model.unet.layers[0].attn.clone();
            let x = rand_tensor(&mut ChaCha8Rng::seed_from_u64(s), &[5, 4]);
            let ids = [attn.wq, attn.bq, attn.wk, attn.bk, attn.wv, attn.bv, attn.wo, attn.bo];
            param_check(&model.store, &ids, |t, st| {
                let xv = t.constant(x.clone()).unwrap();
                let y = mhsa(t, st, xv, xv, xv, &attn, 2, Some(&MASK5)).unwrap();
                weighted(t, y, s).unwrap()
            })
        }),
        ("mhsa_inputs", |s| {
            let model = small_model(s, 1);
            let attn = model.unet.layers[0].attn.clone();
            leaves(s, &[&[3, 4], &[5, 4], &[5, 4]], |t, v| {
                Ok(mhsa(t, &model.store, v[0], v[1], v[2], &attn, 2, Some(&MASK5)).unwrap())
            })
        }),
        ("encoder_stack", |s| {
            let model = small_model(s, 1);
            let ids = model.unet.param_ids(&model.store);
            param_check(&model.store, &ids, |t, st| {
                let h = model.unet.encode(t, st, &[1, 7, 9, 4, 12, 2], None, None).unwrap();
                let e = t.mean_rows(h, &[true; 6]).unwrap();
                weighted(t, e, s).unwrap()
            })
        }),
        ("attentive_pool", |s| {
            leaves(s, &[&[3, 4], &[5, 4]], |t, v| {
                Ok(tape_attentive_pool(t, v[0], v[1], Some(&MASK5), 0.7).unwrap())
            })
        }),
        ("rank_scores", |s| {
            leaves(s, &[&[6, 4], &[5, 4]], |t, v| {
                let m_u = tape_attentive_pool(t, v[0], v[1], None, 0.5).unwrap();
                Ok(tape_rank_scores(t, m_u, v[0], 3, 2).unwrap())
            })
        }),
        ("contrast_softmax", |s| {
            leaves(s, &[&[1, 5]], |t, v| Ok(contrast_loss(t, v[0], Objective::Softmax).unwrap()))
        }),
        ("contrast_margin", |s| {
            leaves(s, &[&[1, 5]], |t, v| Ok(contrast_loss(t, v[0], Objective::Margin).unwrap()))
        }),
        ("global_loss_softmax", |s| global_loss(s, Objective::Softmax)),
        ("global_loss_margin", |s| global_loss(s, Objective::Margin)),
        ("local_loss_softmax", |s| local_loss(s, Objective::Softmax, false)),
        ("local_loss_margin", |s| local_loss(s, Objective::Margin, false)),
        ("local_loss_live_ads", |s| local_loss(s, Objective::Softmax, true)),
        ("cross_loss", |s| {
            let model = small_model(s, 1);
            let (data, batch) = small_data(s);
            let ids = model.cross.param_ids(&model.store);
            param_check(&model.store, &ids, |t, st| {
                let m = HybridModel::from_store(&model.config, st.clone()).unwrap();
                cross_batch_loss(t, &m, &data, &batch, Objective::Softmax).unwrap()
            })
        }),
    ]
}
