//! Non-learning baselines scoring the agreement between a claim and its evidence.

use crate::detector::{image_evidence, metadata_evidence, EvidenceItem};
use crate::error::{AirdError, Result};
use crate::vecindex::{IndexModel, ProbeConfig};
use crate::data::Package;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Baseline {
    /// Claimed metadata against the metadata of image-retrieved packages.
    B1,
    /// Query image against images retrieved by the claimed metadata.
    B2,
    /// Image-retrieved images against metadata-retrieved images.
    B3,
    /// Metadata of image-retrieved packages against metadata of metadata-retrieved packages.
    B4,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::B1, Baseline::B2, Baseline::B3, Baseline::B4];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::B1 => "B1",
            Baseline::B2 => "B2",
            Baseline::B3 => "B3",
            Baseline::B4 => "B4",
        }
    }
}

/// A baseline score, or the marker that the claimed id has no reference packages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineScore {
    pub score: f64,
    pub unverifiable: bool,
}

impl BaselineScore {
    fn scored(score: f64) -> Self {
        Self {
            score,
            unverifiable: false,
        }
    }
}

fn cosine_mean(a: &[EvidenceItem], b: &[&[f32]]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += crate::dot(&x.image, y);
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Scores `pkg` (with its claimed metadata) under `baseline`, leaving `exclude` out of the evidence.
pub fn baseline_score(
    baseline: Baseline,
    idx: &IndexModel,
    pkg: &Package,
    k: usize,
    exclude: Option<u64>,
    probe: &ProbeConfig,
) -> Result<BaselineScore> {
    if k == 0 {
        return Err(AirdError::config("K must be at least 1"));
    }
    let image = &pkg.image_embedding;
    let claim = pkg.metadata_id;
    let by_image = || image_evidence(idx, image, k, exclude, probe);
    let by_meta = || metadata_evidence(idx, image, claim, k, exclude);
    let known = idx.stratum(claim).is_some();
    match baseline {
        Baseline::B1 => {
            let ev = by_image()?;
            let hits = ev.iter().filter(|e| e.metadata_id == claim).count();
            Ok(BaselineScore::scored(hits as f64 / ev.len() as f64))
        }
        _ if !known => Ok(BaselineScore {
            score: 0.0,
            unverifiable: true,
        }),
        Baseline::B2 => {
            let ev = by_meta()?;
            Ok(BaselineScore::scored(cosine_mean(&ev, &[image.as_slice()])))
        }
        Baseline::B3 => {
            let a = by_image()?;
            let b = by_meta()?;
            let b: Vec<&[f32]> = b.iter().map(|e| e.image.as_slice()).collect();
            Ok(BaselineScore::scored(cosine_mean(&a, &b)))
        }
        Baseline::B4 => {
            let a = by_image()?;
            let b = by_meta()?;
            let matches = a
                .iter()
                .flat_map(|x| b.iter().map(move |y| (x.metadata_id == y.metadata_id) as usize))
                .sum::<usize>();
            Ok(BaselineScore::scored(matches as f64 / (a.len() * b.len()) as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Vocabulary};
    use crate::vecindex::IndexParams;

    fn index(vs: &[(&[f32], u32)]) -> IndexModel {
        let packages = vs
            .iter()
            .enumerate()
            .map(|(i, (v, m))| Package {
                package_id: i as u64,
                image_embedding: v.to_vec(),
                metadata_id: *m,
            })
            .collect();
        let vocab: Vocabulary = ["a", "b", "c"].into_iter().collect();
        let ds = Dataset::new(packages, vocab, 3).unwrap();
        IndexModel::build(
            &ds,
            &IndexParams {
                nlist: Some(1),
                m_sub: 1,
                bits: 2,
                ..IndexParams::default()
            },
        )
        .unwrap()
    }

    fn query(v: &[f32], m: u32) -> Package {
        Package {
            package_id: 100,
            image_embedding: v.to_vec(),
            metadata_id: m,
        }
    }

    fn score(b: Baseline, idx: &IndexModel, q: &Package) -> f64 {
        baseline_score(b, idx, q, 3, None, &ProbeConfig::default()).unwrap().score
    }

    #[test]
    fn b1_counts_matching_neighbours() {
        let idx = index(&[
            (&[1.0, 0.0, 0.0], 0),
            (&[0.8, 0.6, 0.0], 0),
            (&[0.6, 0.8, 0.0], 0),
            (&[0.0, 0.0, 1.0], 1),
        ]);
        assert_eq!(score(Baseline::B1, &idx, &query(&[1.0, 0.0, 0.0], 0)), 1.0);
        assert_eq!(score(Baseline::B1, &idx, &query(&[1.0, 0.0, 0.0], 1)), 0.0);
    }

    #[test]
    fn b2_hand_mean_and_orthogonal_claim() {
        let idx = index(&[
            (&[1.0, 0.0, 0.0], 0),
            (&[0.8, 0.6, 0.0], 0),
            (&[0.0, 1.0, 0.0], 0),
            (&[0.0, 0.0, 1.0], 1),
        ]);
        let q = query(&[0.6, 0.8, 0.0], 0);
        // cosines 0.6, 0.96, 0.8
        assert!((score(Baseline::B2, &idx, &q) - (0.6 + 0.96 + 0.8) / 3.0).abs() < 1e-6);
        let q = query(&[1.0, 0.0, 0.0], 1);
        assert!(score(Baseline::B2, &idx, &q).abs() < 1e-7);
        let q = query(&[1.0, 0.0, 0.0], 0);
        let own = baseline_score(Baseline::B2, &idx, &q, 1, None, &ProbeConfig::default()).unwrap();
        assert!((own.score - 1.0).abs() < 1e-7);
    }

    #[test]
    fn b3_gram_mean() {
        let idx = index(&[
            (&[1.0, 0.0, 0.0], 0),
            (&[0.0, 1.0, 0.0], 0),
            (&[0.0, 0.0, 1.0], 0),
        ]);
        // Both sets are the full orthonormal basis: Gram matrix is the identity.
        let q = query(&[0.6, 0.8, 0.0], 0);
        assert!((score(Baseline::B3, &idx, &q) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn b4_equals_b1_and_unknown_is_flagged() {
        let idx = index(&[
            (&[1.0, 0.0, 0.0], 0),
            (&[0.8, 0.6, 0.0], 1),
            (&[0.6, 0.8, 0.0], 0),
            (&[0.0, 0.0, 1.0], 1),
        ]);
        for m in 0..2 {
            let q = query(&[0.9, 0.1, 0.42], m);
            assert_eq!(score(Baseline::B1, &idx, &q), score(Baseline::B4, &idx, &q));
        }
        let q = query(&[0.9, 0.1, 0.42], 2);
        let s = baseline_score(Baseline::B2, &idx, &q, 3, None, &ProbeConfig::default()).unwrap();
        assert!(s.unverifiable && s.score == 0.0);
    }
}
