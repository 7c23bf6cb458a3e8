#![allow(dead_code)]

use aird::data::{Dataset, Package, Vocabulary};
use aird::synthbench::{generate, BenchConfig};
use aird::vecindex::{IndexModel, IndexParams};

pub fn small_bench(seed: u64) -> Dataset {
    generate(&BenchConfig {
        families: 6,
        entities_per_family: 3,
        min_images: 5,
        max_images: 15,
        dim: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn index_of(ds: &Dataset, seed: u64) -> IndexModel {
    IndexModel::build(
        ds,
        &IndexParams {
            m_sub: 4,
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn normalized(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// A dataset from `(vector, metadata)` rows with ids `0..`.
pub fn dataset(rows: &[(Vec<f32>, u32)], vocab: usize) -> Dataset {
    let mut v = Vocabulary::new();
    for i in 0..vocab {
        v.intern(&format!("m{i}"));
    }
    let dim = rows[0].0.len();
    let packages = rows
        .iter()
        .enumerate()
        .map(|(i, (e, m))| Package {
            package_id: i as u64,
            image_embedding: e.clone(),
            metadata_id: *m,
        })
        .collect();
    Dataset::new(packages, v, dim).unwrap()
}

/// Exhaustive cosine ranking with ties broken by ascending id.
pub fn brute_force(ds: &Dataset, q: &[f32], keep: impl Fn(&Package) -> bool) -> Vec<(u64, u32, f64)> {
    let mut all: Vec<(u64, u32, f64)> = ds
        .packages()
        .iter()
        .filter(|p| keep(p))
        .map(|p| {
            let s = p.image_embedding.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum();
            (p.package_id, p.metadata_id, s)
        })
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    all
}
