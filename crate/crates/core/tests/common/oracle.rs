//! Scalar-loop references for the attention and scoring heads. Each
//! `*_error` function returns the worst absolute deviation over
//! `instances` random cases.

use hybrid_encoder::encoder::{mhsa, AttentionParams, HiddenStates};
use hybrid_encoder::heads::{attentive_pool, rank_scores, rel_rank};
use hybrid_encoder::HybridModel;
use hybrid_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 120;
pub const TOL: f64 = 1e-10;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::new(&[m.len(), m[0].len()], m.concat()).unwrap()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn affine(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let keep = rng.random_range(0..n);
    m[keep] = true;
    m
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `softmax(scale · q · H^T) · H` for each query row, over unmasked rows.
pub fn pool_reference(queries: &[Vec<f64>], rows: &[Vec<f64>], mask: &[bool], scale: f64) -> Vec<f64> {
    let d = rows[0].len();
    let kept: Vec<&Vec<f64>> = rows.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r).collect();
    let mut out = Vec::new();
    for q in queries {
        let logits: Vec<f64> = kept
            .iter()
            .map(|r| scale * (0..d).map(|c| q[c] * r[c]).sum::<f64>())
            .collect();
        let w = softmax(&logits);
        for c in 0..d {
            out.push(kept.iter().zip(&w).map(|(r, wj)| wj * r[c]).sum());
        }
    }
    out
}

fn states(rows: &[Vec<f64>], mask: Vec<bool>) -> HiddenStates {
    HiddenStates {
        states: to_tensor(rows),
        mask,
    }
}

pub fn mhsa_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(inst);
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..5);
        let nq = rng.random_range(1..7);
        let nk = rng.random_range(1..7);
        let q = rand_mat(&mut rng, nq, d);
        let k = rand_mat(&mut rng, nk, d);
        let v = rand_mat(&mut rng, nk, d);
        let mask = (inst % 2 == 1).then(|| random_mask(&mut rng, nk));
        let ws: Vec<Vec<Vec<f64>>> = (0..4).map(|_| rand_mat(&mut rng, d, d)).collect();
        let bs: Vec<Vec<f64>> = (0..4).map(|_| rand_mat(&mut rng, 1, d).remove(0)).collect();

        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for (i, (w, b)) in ws.iter().zip(&bs).enumerate() {
            ids.push(store.insert(format!("w{i}"), to_tensor(w)).unwrap());
            ids.push(store.insert(format!("b{i}"), Tensor::new(&[1, d], b.clone()).unwrap()).unwrap());
        }
        let params = AttentionParams {
            wq: ids[0],
            bq: ids[1],
            wk: ids[2],
            bk: ids[3],
            wv: ids[4],
            bv: ids[5],
            wo: ids[6],
            bo: ids[7],
        };
        let mut tape = Tape::inference();
        let qv = tape.constant(to_tensor(&q)).unwrap();
        let kv = tape.constant(to_tensor(&k)).unwrap();
        let vv = tape.constant(to_tensor(&v)).unwrap();
        let out = mhsa(&mut tape, &store, qv, kv, vv, &params, heads, mask.as_deref()).unwrap();

        let qp = affine(&q, &ws[0], &bs[0]);
        let kp = affine(&k, &ws[1], &bs[1]);
        let vp = affine(&v, &ws[2], &bs[2]);
        let dh = d / heads;
        let kept: Vec<usize> = (0..nk).filter(|&j| mask.as_ref().is_none_or(|m| m[j])).collect();
        let mut concat = vec![vec![0.0; d]; nq];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let logits: Vec<f64> = kept
                    .iter()
                    .map(|&j| cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&logits);
                for c in cols.clone() {
                    concat[i][c] = kept.iter().zip(&w).map(|(&j, wj)| wj * vp[j][c]).sum();
                }
            }
        }
        let want = affine(&concat, &ws[3], &bs[3]).concat();
        worst = worst.max(max_diff(tape.value(out).data(), &want));
    }
    worst
}

/// Disentangled ad embeddings: learned queries attending over ad states.
pub fn disentangle_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let d = rng.random_range(1..17);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..10);
        let scale = [1.0, 0.125, 1.0 / (d as f64).sqrt()][rng.random_range(0..3)];
        let theta = rand_mat(&mut rng, k, d);
        let h = rand_mat(&mut rng, n, d);
        let mask = random_mask(&mut rng, n);
        let got = attentive_pool(&to_tensor(&theta), &states(&h, mask.clone()), scale).unwrap();
        assert_eq!(got.shape(), &[k, d]);
        worst = worst.max(max_diff(got.data(), &pool_reference(&theta, &h, &mask, scale)));
    }
    worst
}

/// Ad embeddings attending over cached user states.
pub fn attend_user_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + inst);
        let d = rng.random_range(1..17);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..12);
        let m_a = rand_mat(&mut rng, k, d);
        let h_ua = rand_mat(&mut rng, n, d);
        let mask = random_mask(&mut rng, n);
        let got = attentive_pool(&to_tensor(&m_a), &states(&h_ua, mask.clone()), 0.25).unwrap();
        worst = worst.max(max_diff(got.data(), &pool_reference(&m_a, &h_ua, &mask, 0.25)));
    }
    worst
}

/// Rank relevance as a double sum over degree and dimension.
pub fn rel_rank_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + inst);
        let d = rng.random_range(1..17);
        let k = rng.random_range(1..5);
        let m_u = rand_mat(&mut rng, k, d);
        let m_a = rand_mat(&mut rng, k, d);
        let mut want = 0.0;
        for i in 0..k {
            for c in 0..d {
                want += m_u[i][c] * m_a[i][c];
            }
        }
        let got = rel_rank(&to_tensor(&m_u), &to_tensor(&m_a)).unwrap();
        worst = worst.max((got - want).abs());
    }
    worst
}

/// The batched scorer against pooling and relevance run per candidate.
pub fn batched_scores_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + inst);
        let d = rng.random_range(1..13);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..10);
        let c = rng.random_range(1..8);
        let h_ua = rand_mat(&mut rng, n, d);
        let mask = random_mask(&mut rng, n);
        let m_as: Vec<Vec<Vec<f64>>> = (0..c).map(|_| rand_mat(&mut rng, k, d)).collect();
        let tensors: Vec<Tensor> = m_as.iter().map(|m| to_tensor(m)).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let got = rank_scores(&states(&h_ua, mask.clone()), &refs, 0.5).unwrap();
        for (j, m_a) in m_as.iter().enumerate() {
            let m_u = pool_reference(m_a, &h_ua, &mask, 0.5);
            let want: f64 = m_u.iter().zip(m_a.concat()).map(|(x, y)| x * y).sum();
            worst = worst.max((got[j] - want).abs());
        }
    }
    worst
}

/// The model's own heads on encoder outputs, against the references.
pub fn model_heads_error(instances: u64) -> f64 {
    let config = super::tiny_model(40, 3);
    let model = HybridModel::init(&config, 7).unwrap();
    let theta: Vec<Vec<f64>> = (0..3).map(|i| model.store.value(model.theta).row(i).to_vec()).collect();
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + inst);
        let ad: Vec<u32> = (0..rng.random_range(1..8)).map(|_| rng.random_range(5..40)).collect();
        let user: Vec<u32> = (0..rng.random_range(1..12)).map(|_| rng.random_range(5..40)).collect();
        let (_, h_a) = model.encode_ad(&ad).unwrap();
        let rows: Vec<Vec<f64>> = h_a.real_rows().map(<[f64]>::to_vec).collect();
        let m_a = model.disentangle_ad(&h_a).unwrap();
        let want = pool_reference(&theta, &rows, &vec![true; rows.len()], config.pool_scale);
        worst = worst.max(max_diff(m_a.data(), &want));

        let h_ua = model.encode_user_interaction(&user).unwrap();
        let urows: Vec<Vec<f64>> = h_ua.real_rows().map(<[f64]>::to_vec).collect();
        let ma_rows: Vec<Vec<f64>> = (0..3).map(|i| m_a.row(i).to_vec()).collect();
        let m_u = model.ad_attend_user(&m_a, &h_ua).unwrap();
        let want_u = pool_reference(&ma_rows, &urows, &vec![true; urows.len()], config.pool_scale);
        worst = worst.max(max_diff(m_u.data(), &want_u));

        let score = model.rank_score(&h_ua, &m_a).unwrap();
        let want_s: f64 = want_u.iter().zip(m_a.data()).map(|(x, y)| x * y).sum();
        worst = worst.max((score - want_s).abs());
    }
    worst
}
