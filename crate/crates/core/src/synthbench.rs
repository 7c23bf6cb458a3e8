//! Synthetic benchmark of confusable entities.
//!
//! Families are random directions on the unit sphere; each entity of a
//! family sits at a fixed angle from its family anchor, so entities of one
//! family look alike. Images are noisy copies of their entity's prototype.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Dataset, Package, Vocabulary};
use crate::error::{AirdError, Result};

const MAX_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dim: usize,
    pub families: usize,
    pub entities_per_family: usize,
    pub min_images: usize,
    pub max_images: usize,
    /// Exponent `a` of the entity-size density `p(x) ∝ x^-a` on `[min, max]`.
    pub size_exponent: f64,
    /// Angle between an entity prototype and its family anchor, in degrees.
    pub theta_fam_deg: f64,
    pub sigma_in: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            families: 50,
            entities_per_family: 4,
            min_images: 5,
            max_images: 60,
            size_exponent: 1.5,
            theta_fam_deg: 20.0,
            sigma_in: 0.08,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AirdError::config(m.to_string()));
        if self.dim < 2 {
            return bad("benchmark dimension must be at least 2");
        }
        if self.families * self.entities_per_family < 2 {
            return bad("benchmark needs at least two entities");
        }
        if self.min_images == 0 || self.min_images > self.max_images {
            return bad("images per entity need 1 <= min <= max");
        }
        if !(self.theta_fam_deg > 0.0 && self.theta_fam_deg.is_finite()) {
            return bad("theta_fam must be positive");
        }
        if !(self.sigma_in > 0.0 && self.sigma_in.is_finite()) {
            return bad("sigma_in must be positive");
        }
        if !self.size_exponent.is_finite() {
            return bad("size exponent must be finite");
        }
        Ok(())
    }

    pub fn entities(&self) -> usize {
        self.families * self.entities_per_family
    }
}

fn gaussian(dim: usize, rng: &mut crate::Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn random_unit(dim: usize, rng: &mut crate::Rng) -> Result<Vec<f64>> {
    for _ in 0..MAX_RETRIES {
        let mut v = gaussian(dim, rng);
        if unit(&mut v) {
            return Ok(v);
        }
    }
    Err(AirdError::DegenerateEmbedding)
}

/// Unit vector orthogonal to the unit vector `a`.
fn orthogonal_unit(a: &[f64], rng: &mut crate::Rng) -> Result<Vec<f64>> {
    for _ in 0..MAX_RETRIES {
        let mut v = gaussian(a.len(), rng);
        let p: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
        if unit(&mut v) {
            return Ok(v);
        }
    }
    Err(AirdError::DegenerateEmbedding)
}

/// Inverse-CDF draw from `p(x) ∝ x^-a` on `[lo, hi + 1)`, floored to an integer.
pub fn power_law_size(lo: usize, hi: usize, a: f64, u: f64) -> usize {
    let (l, h) = (lo as f64, (hi + 1) as f64);
    let x = if (a - 1.0).abs() < 1e-12 {
        l * (h / l).powf(u)
    } else {
        let e = 1.0 - a;
        (l.powf(e) + u * (h.powf(e) - l.powf(e))).powf(1.0 / e)
    };
    (x.floor() as usize).clamp(lo, hi)
}

fn image_of(proto: &[f64], sigma: f64, rng: &mut crate::Rng) -> Result<Vec<f32>> {
    for _ in 0..MAX_RETRIES {
        let mut v: Vec<f64> = proto
            .iter()
            .map(|&p| {
                let z: f64 = StandardNormal.sample(rng);
                p + sigma * z
            })
            .collect();
        if unit(&mut v) {
            return Ok(v.into_iter().map(|x| x as f32).collect());
        }
    }
    Err(AirdError::DegenerateEmbedding)
}

/// Generates the benchmark; entity `e` of family `f` gets metadata id `f * entities_per_family + e`.
pub fn generate(cfg: &BenchConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = crate::seeded_rng(cfg.seed);
    let theta = cfg.theta_fam_deg.to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let mut vocab = Vocabulary::new();
    let mut packages = Vec::new();
    for f in 0..cfg.families {
        let anchor = random_unit(cfg.dim, &mut rng)?;
        for e in 0..cfg.entities_per_family {
            let id = vocab.intern(&format!("entity-{f:03}-{e}"));
            let dir = orthogonal_unit(&anchor, &mut rng)?;
            let proto: Vec<f64> = anchor.iter().zip(&dir).map(|(a, d)| c * a + s * d).collect();
            let size = power_law_size(cfg.min_images, cfg.max_images, cfg.size_exponent, rng.random::<f64>());
            for _ in 0..size {
                packages.push(Package {
                    package_id: packages.len() as u64,
                    image_embedding: image_of(&proto, cfg.sigma_in, &mut rng)?,
                    metadata_id: id,
                });
            }
        }
    }
    Dataset::new(packages, vocab, cfg.dim)
}

/// Nearest other entity of one entity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntityConfusability {
    pub metadata_id: u32,
    pub nearest_metadata_id: u32,
    /// Largest cosine between an image of this entity and an image of another.
    pub max_cross_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusabilityReport {
    pub entities: Vec<EntityConfusability>,
}

impl ConfusabilityReport {
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.entities.iter().map(|e| e.max_cross_cosine).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
    }
}

/// Per entity present in `ds`, the closest image of any other entity.
pub fn confusability_report(ds: &Dataset) -> ConfusabilityReport {
    let pk = ds.packages();
    let mut ids: Vec<u32> = pk.iter().map(|p| p.metadata_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return ConfusabilityReport { entities: Vec::new() };
    }
    let entities = ids
        .par_iter()
        .map(|&m| {
            let mut best = (f64::NEG_INFINITY, u32::MAX);
            for a in pk.iter().filter(|p| p.metadata_id == m) {
                for b in pk.iter().filter(|p| p.metadata_id != m) {
                    let c = crate::dot(&a.image_embedding, &b.image_embedding);
                    if c > best.0 || (c == best.0 && b.metadata_id < best.1) {
                        best = (c, b.metadata_id);
                    }
                }
            }
            EntityConfusability {
                metadata_id: m,
                nearest_metadata_id: best.1,
                max_cross_cosine: best.0,
            }
        })
        .collect();
    ConfusabilityReport { entities }
}
