use aird::counterfeiter::{Candidate, CandidateSet, MGModel, MetadataEncoder, MgConfig};
use aird::neural::softmax_temperature;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0f64..20.0, 1..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_form_a_distribution(s in scores(), tau in 0.01f64..1.0) {
        let w = softmax_temperature(&s, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn shift_invariant(s in scores(), tau in 0.01f64..1.0, c in -50.0f64..50.0) {
        let a = softmax_temperature(&s, tau).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let b = softmax_temperature(&shifted, tau).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn monotone_in_scores(s in scores(), tau in 0.01f64..1.0) {
        let w = softmax_temperature(&s, tau).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn lower_temperature_sharpens(s in scores(), tau in 0.05f64..1.0) {
        let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners = s.iter().filter(|&&x| x == top).count();
        prop_assume!(winners == 1 && s.len() > 1);
        let i = s.iter().position(|&x| x == top).unwrap();
        let hot = softmax_temperature(&s, tau).unwrap()[i];
        let cold = softmax_temperature(&s, tau / 2.0).unwrap()[i];
        prop_assert!(cold >= hot - 1e-12);
    }

    #[test]
    fn fabrication_lies_in_candidate_hull(seed in 0u64..500, k in 1usize..5, tau in 0.05f64..1.0) {
        let (di, dm) = (3, 4);
        let mg = MGModel::new(di, dm, &MgConfig { hidden: vec![5, 3] }, seed).unwrap();
        let enc = MetadataEncoder::new(k + 1, dm, seed + 1).unwrap();
        let img = |i: usize| {
            let v = [1.0 + i as f64, (seed % 7) as f64 - 3.0, 0.5];
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect::<Vec<f32>>()
        };
        let c = CandidateSet {
            query_metadata_id: 0,
            entries: (0..k).map(|i| Candidate { package_id: i as u64, image: img(i), metadata_id: 1 + i as u32, similarity: 0.0 }).collect(),
        };
        let f = mg.fabricate(&enc, &c, &img(9), tau).unwrap();
        for d in 0..dm {
            let col: Vec<f64> = (1..=k).map(|id| enc.encode(id as u32).unwrap()[d] as f64).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.metadata[d] >= lo - 1e-9 && f.metadata[d] <= hi + 1e-9);
        }
        let w = &f.choice.weights;
        let mix: Vec<f64> = (0..dm)
            .map(|d| (0..k).map(|j| w[j] * enc.encode(1 + j as u32).unwrap()[d] as f64).sum())
            .collect();
        for (a, b) in mix.iter().zip(&f.metadata) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn temperature_out_of_range_is_rejected() {
    assert!(softmax_temperature(&[1.0, 2.0], 0.0).is_err());
    assert!(softmax_temperature(&[1.0, 2.0], 1.5).is_err());
}
