mod common;

use aird::counterfeiter::MetadataEncoder;
use aird::detector::{gather_evidence, verify_package, CVModel, CvConfig, VerdictFlag};
use aird::evaluation::{
    baseline_score, build_eval_set, mp_score, retrieval_metrics, retrieval_runs, train_mp, Baseline, MpConfig, Provenance,
};
use aird::synthbench::{confusability_report, generate, BenchConfig};
use aird::vecindex::{IndexModel, IndexParams, ProbeConfig};
use proptest::prelude::*;

use common::{brute_force, dataset, index_of, normalized, small_bench};

fn axis(i: usize, d: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

#[test]
fn b2_and_b3_by_hand() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rows = vec![
        (axis(0, 3), 0),
        (normalized(&[s, s, 0.0]), 0),
        (axis(2, 3), 1),
    ];
    let ds = dataset(&rows, 3);
    let idx = IndexModel::build(&ds, &IndexParams { m_sub: 1, bits: 2, ..Default::default() }).unwrap();
    let probe = ProbeConfig::default();
    let q = aird::data::Package { package_id: 99, image_embedding: axis(0, 3), metadata_id: 0 };
    let b2 = baseline_score(Baseline::B2, &idx, &q, 2, None, &probe).unwrap();
    assert!((b2.score - (1.0 + s) / 2.0).abs() < 1e-6);
    // Image evidence is {p0, p1}; metadata evidence is the same pair.
    let b3 = baseline_score(Baseline::B3, &idx, &q, 2, None, &probe).unwrap();
    assert!((b3.score - (1.0 + s + s + 1.0) / 4.0).abs() < 1e-6);
    let b1 = baseline_score(Baseline::B1, &idx, &q, 2, None, &probe).unwrap();
    assert_eq!(b1.score, 1.0);
    let unknown = aird::data::Package { metadata_id: 2, ..q.clone() };
    for b in [Baseline::B2, Baseline::B3] {
        let r = baseline_score(b, &idx, &unknown, 2, None, &probe).unwrap();
        assert_eq!((r.score, r.unverifiable), (0.0, true));
    }
}

#[test]
fn eval_set_has_three_instances_per_package() {
    let ds = small_bench(1);
    let split = aird::data::split_stratified(&ds, 0.8, 1).unwrap();
    let idx = index_of(&split.train, 1);
    let set = build_eval_set(&split.test, &idx, 1, &ProbeConfig::default()).unwrap();
    assert_eq!(set.len(), 3 * split.test.len());
    let labels = set.labels();
    assert_eq!(labels.iter().filter(|&&l| l).count(), split.test.len());
    for t in set.instances.chunks(3) {
        assert_eq!(t[0].provenance, Provenance::Real);
        assert!(t[1].package.metadata_id != t[1].true_metadata_id);
        assert!(t[2].package.metadata_id != t[2].true_metadata_id);
    }
    let hard = set.filter(&[Provenance::Hard]);
    assert_eq!(hard.len(), split.test.len());
    let again = build_eval_set(&split.test, &idx, 1, &ProbeConfig::default()).unwrap();
    assert_eq!(again.instances, set.instances);
}

#[test]
fn evidence_matches_brute_force() {
    let ds = small_bench(2);
    let idx = index_of(&ds, 2);
    let probe = ProbeConfig { nprobe: idx.nlist(), shortlist_factor: ds.len() };
    for p in ds.packages().iter().step_by(5) {
        let ev = gather_evidence(&idx, &p.image_embedding, p.metadata_id, 3, Some(p.package_id), &probe).unwrap();
        let img: Vec<u64> = brute_force(&ds, &p.image_embedding, |q| q.package_id != p.package_id).iter().take(3).map(|x| x.0).collect();
        assert_eq!(ev.by_image.iter().map(|e| e.package_id).collect::<Vec<_>>(), img);
        let meta: Vec<u64> = brute_force(&ds, &p.image_embedding, |q| q.metadata_id == p.metadata_id && q.package_id != p.package_id)
            .iter()
            .map(|x| x.0)
            .cycle()
            .take(3)
            .collect();
        assert_eq!(ev.by_metadata.iter().map(|e| e.package_id).collect::<Vec<_>>(), meta);
    }
}

#[test]
fn verify_package_is_deterministic_and_bounded() {
    let ds = small_bench(3);
    let idx = index_of(&ds, 3);
    let cv = CVModel::new(ds.dim(), 4, 3, &CvConfig { agg_hidden: 8, agg_out: 4, fuse: 4 }, 3).unwrap();
    let enc = MetadataEncoder::new(ds.vocabulary().len(), 4, 3).unwrap();
    let probe = ProbeConfig::default();
    for p in ds.packages().iter().take(10) {
        let a = verify_package(&cv, &enc, &idx, p, &probe).unwrap();
        let b = verify_package(&cv, &enc, &idx, p, &probe).unwrap();
        assert_eq!(a, b);
        assert!(a.score > 0.0 && a.score < 1.0);
        assert_eq!(a.flag, VerdictFlag::Scored);
    }
}

#[test]
fn mp_separates_orthogonal_entities() {
    let mut rows = Vec::new();
    for m in 0..4u32 {
        for j in 0..6 {
            let mut v = vec![0.02 * j as f64; 4];
            v[m as usize] = 1.0;
            rows.push((normalized(&v), m));
        }
    }
    let ds = dataset(&rows, 4);
    let mp = train_mp(&ds, &MpConfig { epochs: 60, batch_size: 8, lr: 1e-2, ..Default::default() }).unwrap();
    for p in ds.packages() {
        let probs = mp.predict(&p.image_embedding).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(mp_score(&mp, p).unwrap().matches, "package {}", p.package_id);
    }
}

#[test]
fn retrieval_metrics_are_bounded() {
    let ds = small_bench(4);
    let idx = index_of(&ds, 4);
    let runs = retrieval_runs(&idx, ds.packages(), 3, true, &ProbeConfig::default()).unwrap();
    let m = retrieval_metrics(&runs, 3).unwrap();
    assert!((0.0..=1.0).contains(&m.map_at_k) && (0.0..=1.0).contains(&m.precision_at_k));
}

#[test]
fn sibling_entities_look_closer_than_other_families() {
    let ds = generate(&BenchConfig { families: 2, entities_per_family: 2, theta_fam_deg: 5.0, seed: 2, ..Default::default() }).unwrap();
    // Entity ids follow family order: 0 and 1 are siblings, 2 and 3 another family.
    let of = |m: u32| ds.packages().iter().filter(move |p| p.metadata_id == m);
    let mean = |a: u32, b: u32| {
        let (mut s, mut n) = (0.0, 0);
        for x in of(a) {
            for y in of(b) {
                s += aird::dot(&x.image_embedding, &y.image_embedding);
                n += 1;
            }
        }
        s / n as f64
    };
    let sibling = mean(0, 1);
    let cross = mean(0, 2).max(mean(1, 3));
    assert!(sibling > cross, "sibling {sibling} cross {cross}");
    assert!(confusability_report(&ds).median().unwrap() > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_sets_respect_the_config(seed in 0u64..1000, families in 1usize..5, per in 1usize..4, lo in 2usize..6, span in 0usize..10) {
        prop_assume!(families * per >= 2);
        let cfg = BenchConfig { families, entities_per_family: per, min_images: lo, max_images: lo + span, dim: 8, seed, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        prop_assert_eq!(ds.vocabulary().len(), families * per);
        for p in ds.packages() {
            let n: f64 = p.image_embedding.iter().map(|&x| x as f64 * x as f64).sum();
            prop_assert!((n.sqrt() - 1.0).abs() <= 1e-6);
        }
        for size in ds.stratum_sizes() {
            prop_assert!(size >= lo && size <= lo + span);
        }
    }
}
