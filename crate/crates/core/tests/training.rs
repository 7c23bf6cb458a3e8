mod common;

use std::collections::HashSet;

use aird::counterfeiter::MgConfig;
use aird::detector::CvConfig;
use aird::training::{
    hard_negative, precompute_retrievals, retrieve, sample_easy_negative, sample_excluding, train, MgLoss, TrainConfig,
    TrainMode, Trainer,
};
use aird::vecindex::ProbeConfig;
use rand::SeedableRng;

use common::{brute_force, index_of, small_bench};

fn tiny(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        meta_dim: 4,
        cv: CvConfig {
            agg_hidden: 8,
            agg_out: 4,
            fuse: 4,
        },
        mg: MgConfig { hidden: vec![8, 4] },
        mode,
        seed,
        ..Default::default()
    }
}

#[test]
fn easy_negatives_are_uniform() {
    let mut rng = aird::Rng::seed_from_u64(1);
    let (vocab, own, draws) = (10usize, 3u32, 27_000usize);
    let mut counts = vec![0usize; vocab];
    for _ in 0..draws {
        counts[sample_excluding(vocab, own, &mut rng).unwrap() as usize] += 1;
    }
    assert_eq!(counts[own as usize], 0);
    let expected = draws as f64 / (vocab - 1) as f64;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != own as usize)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 0.999 quantile of chi-squared with 8 degrees of freedom.
    assert!(chi2 < 26.12, "chi2 {chi2}");
    assert!(sample_excluding(1, 0, &mut rng).is_err());
}

#[test]
fn dataset_easy_negative_never_returns_own_id() {
    let ds = small_bench(2);
    let mut rng = aird::Rng::seed_from_u64(2);
    for p in ds.packages() {
        let m = sample_easy_negative(&ds, p, &mut rng).unwrap();
        assert_ne!(m, p.metadata_id);
        assert!((m as usize) < ds.vocabulary().len());
    }
}

#[test]
fn hard_negative_matches_brute_force() {
    let ds = small_bench(3);
    let idx = index_of(&ds, 3);
    let probe = ProbeConfig {
        nprobe: idx.nlist(),
        shortlist_factor: ds.len(),
    };
    for p in ds.packages() {
        let want = brute_force(&ds, &p.image_embedding, |q| q.metadata_id != p.metadata_id)[0].1;
        assert_eq!(hard_negative(&idx, p, &probe).unwrap(), want, "package {}", p.package_id);
    }
}

#[test]
fn cache_equals_live_retrieval() {
    let ds = small_bench(4);
    let idx = index_of(&ds, 4);
    let probe = ProbeConfig::default();
    let cache = precompute_retrievals(&idx, &ds, 3, &probe).unwrap();
    assert_eq!(cache.len(), ds.len());
    for i in (0..ds.len()).step_by(7) {
        let p = &ds.packages()[i];
        let live = retrieve(&idx, p, 3, &probe).unwrap();
        assert_eq!(cache.get(i), &live);
        assert!(live.image_evidence.iter().all(|e| e.package_id != p.package_id));
        assert!(live.real_evidence.iter().all(|e| e.metadata_id == p.metadata_id && e.package_id != p.package_id));
        assert!(live.candidates.entries.iter().all(|c| c.metadata_id != p.metadata_id));
        assert_eq!(live.candidates.len(), 3);
    }
}

#[test]
fn detector_steps_never_touch_the_encoder_in_adversarial_mode() {
    let ds = small_bench(5);
    let idx = index_of(&ds, 5);
    let mut t = Trainer::new(tiny(TrainMode::Adversarial, 5), &ds, &idx).unwrap();
    let before = t.encoder.clone();
    let cv_before = t.cv.clone();
    let batch: Vec<usize> = (0..ds.len()).collect();
    for chunk in batch.chunks(16) {
        t.cv_step(chunk).unwrap();
    }
    assert_eq!(t.encoder, before);
    assert_ne!(t.cv, cv_before);

    let mut n = Trainer::new(tiny(TrainMode::Nad, 5), &ds, &idx).unwrap();
    let before = n.encoder.clone();
    n.cv_step(&batch[..16]).unwrap();
    assert_ne!(n.encoder, before);
}

#[test]
fn counterfeiter_steps_touch_only_sampled_rows() {
    let ds = small_bench(6);
    let idx = index_of(&ds, 6);
    let mut t = Trainer::new(tiny(TrainMode::Adversarial, 6), &ds, &idx).unwrap();
    let batch = [0usize, 5, 9];
    let mut touched = HashSet::new();
    for &i in &batch {
        touched.insert(ds.packages()[i].metadata_id);
        for c in &t.cache().get(i).candidates.entries {
            touched.insert(c.metadata_id);
        }
    }
    let before = t.encoder.clone();
    let cv_before = t.cv.clone();
    t.mg_step(&batch).unwrap();
    assert_eq!(t.cv, cv_before);
    let mut changed = 0;
    for id in 0..before.vocab() as u32 {
        let moved = before.encode(id).unwrap() != t.encoder.encode(id).unwrap();
        if moved {
            changed += 1;
            assert!(touched.contains(&id), "row {id} moved without being sampled");
        }
    }
    assert!(changed > 0);
}

#[test]
fn constant_detector_gives_log_two() {
    let ds = small_bench(7);
    let idx = index_of(&ds, 7);
    for (loss, want) in [(MgLoss::NonSaturating, 2f64.ln()), (MgLoss::Saturating, -(2f64.ln()))] {
        let cfg = TrainConfig { mg_loss: loss, ..tiny(TrainMode::Adversarial, 7) };
        let mut t = Trainer::new(cfg, &ds, &idx).unwrap();
        for tensor in t.cv.tensors_mut() {
            tensor.iter_mut().for_each(|w| *w = 0.0);
        }
        let got = t.mg_step(&[0, 1, 2, 3]).unwrap();
        assert!((got - want).abs() < 1e-12, "{loss:?}: {got}");
    }
}

#[test]
fn detector_overfits_one_batch() {
    let ds = small_bench(8);
    let idx = index_of(&ds, 8);
    let cfg = TrainConfig { cv_lr: 3e-3, ..tiny(TrainMode::Nad, 8) };
    let mut t = Trainer::new(cfg, &ds, &idx).unwrap();
    let batch: Vec<usize> = (0..12).collect();
    let first = t.cv_step(&batch).unwrap();
    let mut last = first;
    for _ in 0..50 {
        last = t.cv_step(&batch).unwrap();
    }
    assert!(last.real + last.hard < first.real + first.hard, "{first:?} -> {last:?}");
    assert_eq!(first.fabricated, 0.0);
}

#[test]
fn zero_epochs_return_initial_models() {
    let ds = small_bench(9);
    let idx = index_of(&ds, 9);
    let cfg = TrainConfig { epochs: 0, ..tiny(TrainMode::Adversarial, 9) };
    let out = train(&cfg, &ds, &idx).unwrap();
    let fresh = Trainer::new(cfg, &ds, &idx).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.cv, fresh.cv);
    assert_eq!(out.encoder, fresh.encoder);
    assert_eq!(out.mg, fresh.mg);
}

#[test]
fn training_is_deterministic() {
    let ds = small_bench(10);
    let idx = index_of(&ds, 10);
    for mode in [TrainMode::Adversarial, TrainMode::Nad] {
        let a = train(&tiny(mode, 10), &ds, &idx).unwrap();
        let b = train(&tiny(mode, 10), &ds, &idx).unwrap();
        assert_eq!(a.cv.to_checkpoint(&a.encoder).to_bytes().unwrap(), b.cv.to_checkpoint(&b.encoder).to_bytes().unwrap());
        assert_eq!(a.history, b.history);
        assert_eq!(a.mg.is_some(), mode == TrainMode::Adversarial);
        assert!(a.history.iter().all(|r| r.mg_loss.is_some() == (mode == TrainMode::Adversarial)));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small_bench(11);
    let idx = index_of(&ds, 11);
    for cfg in [
        TrainConfig { k: 0, ..tiny(TrainMode::Nad, 0) },
        TrainConfig { tau: 0.0, ..tiny(TrainMode::Nad, 0) },
        TrainConfig { batch_size: 0, ..tiny(TrainMode::Nad, 0) },
        TrainConfig { val_fraction: 1.0, ..tiny(TrainMode::Nad, 0) },
    ] {
        assert!(train(&cfg, &ds, &idx).is_err());
    }
}
