mod common;

use std::collections::HashSet;

use hybrid_encoder::ann::AnnIndex;
use hybrid_encoder::corpus::{generate_synthetic, AdId};
use hybrid_encoder::pipeline::{model_config, train, Stage};
use hybrid_encoder::train::{
    example_rng, margin_contrast_loss, sample_from_pool, sample_global_negatives, sample_local_negatives,
    softmax_contrast_loss, train_stage_global, train_stage_local, Targets, TrainData, TrainReport, STAGE_GLOBAL,
    STAGE_LOCAL,
};
use hybrid_encoder::{Error, HybridModel};
use hybrid_tensor::ParamStore;
use proptest::prelude::*;

proptest! {
    #[test]
    fn global_negatives_are_distinct_and_exclude_the_positive(
        n_ads in 2usize..300, pos_frac in 0.0..1.0f64, n in 1usize..20, seed in any::<u64>()
    ) {
        prop_assume!(n < n_ads);
        let positive = ((n_ads as f64 * pos_frac) as usize).min(n_ads - 1);
        let mut rng = example_rng(seed, STAGE_GLOBAL, 0, 0);
        let neg = sample_global_negatives(n_ads, positive, n, &mut rng).unwrap();
        prop_assert_eq!(neg.len(), n);
        prop_assert!(neg.iter().all(|&a| a < n_ads && a != positive));
        prop_assert_eq!(neg.iter().collect::<HashSet<_>>().len(), n);
    }

    #[test]
    fn pool_negatives_come_from_the_pool(
        pool in prop::collection::hash_set(0usize..500, 2..60), n in 1usize..10, seed in any::<u64>()
    ) {
        let pool: Vec<usize> = pool.into_iter().collect();
        let positive = pool[0];
        let mut rng = example_rng(seed, STAGE_LOCAL, 3, 1);
        let neg = sample_from_pool(&pool, positive, n, 500, &mut rng).unwrap();
        prop_assert_eq!(neg.len(), n);
        prop_assert!(!neg.contains(&positive));
        prop_assert_eq!(neg.iter().collect::<HashSet<_>>().len(), n);
        if pool.len() > n {
            prop_assert!(neg.iter().all(|a| pool.contains(a)));
        }
    }

    #[test]
    fn softmax_loss_bounds(scores in prop::collection::vec(-20.0..20.0f64, 2..10)) {
        let l = softmax_contrast_loss(&scores).unwrap();
        let n = scores.len() as f64;
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(l >= max - scores[0] - 1e-12);
        prop_assert!(l <= max - scores[0] + n.ln() + 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 3.5).collect();
        prop_assert!((softmax_contrast_loss(&shifted).unwrap() - l).abs() < 1e-9);
    }
}

#[test]
fn loss_values_by_hand() {
    let l = softmax_contrast_loss(&[0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-15);
    let l = softmax_contrast_loss(&[2.0, 0.0]).unwrap();
    assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
    assert_eq!(margin_contrast_loss(&[2.0, 0.5, -1.0]).unwrap(), -2.5);
    assert!(softmax_contrast_loss(&[1.0]).is_err());
    assert!(sample_global_negatives(3, 0, 3, &mut example_rng(0, "x", 0, 0)).is_err());
}

#[test]
fn streams_differ_by_stage_example_and_epoch() {
    use rand::Rng;
    let draw = |s: &str, e, p| example_rng(9, s, e, p).random::<u64>();
    let all = [
        draw(STAGE_GLOBAL, 0, 0),
        draw(STAGE_LOCAL, 0, 0),
        draw(STAGE_GLOBAL, 1, 0),
        draw(STAGE_GLOBAL, 0, 1),
    ];
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 4);
    assert_eq!(draw(STAGE_GLOBAL, 5, 2), draw(STAGE_GLOBAL, 5, 2));
}

#[test]
fn local_negatives_come_from_the_neighborhood() {
    let items: Vec<(AdId, Vec<f64>)> = (0..50).map(|i| (AdId(100 + i), vec![i as f64, 1.0])).collect();
    let index = AnnIndex::exact(&items).unwrap();
    let q = [1.0, 0.0];
    let mut rng = example_rng(1, STAGE_LOCAL, 0, 0);
    let neg = sample_local_negatives(&q, &index, AdId(149), 10, 4, 64, &mut rng).unwrap();
    assert_eq!(neg.len(), 4);
    assert!(neg.iter().all(|a| a.0 >= 140 && a.0 < 149));
    assert!(sample_local_negatives(&q, &index, AdId(149), 4, 4, 64, &mut rng).is_err());
}

fn tensors_with(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<f64>)> {
    store
        .named_tensors()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_owned(), t.data().to_vec()))
        .collect()
}

#[test]
fn stages_touch_only_their_parameters() {
    let cfg = common::tiny_run(2);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let init = HybridModel::init(&model_config(&cfg, &corpus), cfg.seed).unwrap();
    let data = TrainData::new(&corpus, &init).unwrap();
    let targets = Targets {
        hybrid: true,
        cross: true,
    };
    let mut model = init.clone();
    let mut report = TrainReport::default();
    train_stage_global(&mut model, &data, &cfg.train, cfg.seed, targets, &mut report).unwrap();
    for frozen in ["uanet.", "hybrid."] {
        assert_eq!(tensors_with(&model.store, frozen), tensors_with(&init.store, frozen), "{frozen}");
    }
    for moved in ["unet.", "anet.", "cross."] {
        assert_ne!(tensors_with(&model.store, moved), tensors_with(&init.store, moved), "{moved}");
    }
    let after_global = model.clone();
    train_stage_local(&mut model, &data, &cfg.train, cfg.seed, targets, &mut report).unwrap();
    for frozen in ["unet.", "anet."] {
        assert_eq!(tensors_with(&model.store, frozen), tensors_with(&after_global.store, frozen));
    }
    for moved in ["uanet.", "hybrid.", "cross."] {
        assert_ne!(tensors_with(&model.store, moved), tensors_with(&after_global.store, moved));
    }
    assert_eq!(report.stages_done, vec![STAGE_GLOBAL, STAGE_LOCAL]);
    assert_eq!(report.losses(STAGE_GLOBAL, "hybrid").len(), cfg.train.global_steps);
    assert_eq!(report.losses(STAGE_LOCAL, "cross").len(), cfg.train.local_steps);
    assert!(report.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn local_stage_requires_global() {
    let cfg = common::tiny_run(2);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let mut model = HybridModel::init(&model_config(&cfg, &corpus), 0).unwrap();
    let data = TrainData::new(&corpus, &model).unwrap();
    let targets = Targets {
        hybrid: true,
        cross: false,
    };
    let err = train_stage_local(&mut model, &data, &cfg.train, 0, targets, &mut TrainReport::default());
    assert!(matches!(err, Err(Error::Invariant(_))));
    assert!(matches!(train(&corpus, &cfg, Stage::Local, None), Err(Error::Invariant(_))));
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = common::tiny_run(4);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let a = train(&corpus, &cfg, Stage::Progressive, None).unwrap();
    let b = train(&corpus, &cfg, Stage::Progressive, None).unwrap();
    assert!(a.model.store.bit_eq(&b.model.store));
    let la: Vec<u64> = a.report.records.iter().map(|r| r.loss.to_bits()).collect();
    let lb: Vec<u64> = b.report.records.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(la, lb);
    let mut other = cfg.clone();
    other.seed = 5;
    let c = train(&corpus, &other, Stage::Progressive, None).unwrap();
    assert!(!a.model.store.bit_eq(&c.model.store));
}

#[test]
fn global_only_then_local_equals_progressive() {
    let cfg = common::tiny_run(8);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let g = train(&corpus, &cfg, Stage::Global, None).unwrap();
    let two_step = train(&corpus, &cfg, Stage::Local, Some(g)).unwrap();
    let one_step = train(&corpus, &cfg, Stage::Progressive, None).unwrap();
    assert!(two_step.model.store.bit_eq(&one_step.model.store));
}

#[test]
fn warm_start_copies_the_user_network() {
    let cfg = common::tiny_run(1);
    let corpus = generate_synthetic(&cfg.data).unwrap();
    let mut model = HybridModel::init(&model_config(&cfg, &corpus), 1).unwrap();
    let unet = tensors_with(&model.store, "unet.");
    let target = model.uanet.clone();
    let copied = model.warm_start_from_user_net(&target).unwrap();
    assert_eq!(copied, unet.len());
    let strip = |v: Vec<(String, Vec<f64>)>, p: &str| {
        v.into_iter()
            .map(|(n, t)| (n.trim_start_matches(p).to_owned(), t))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(tensors_with(&model.store, "uanet."), "uanet."), strip(unet, "unet."));
}
