//! Evaluation protocol, baselines and metrics.
//!
//! Every test package yields three instances: the real pair, the image with
//! uniformly drawn wrong metadata and the image with its hard negative.
//! Learned detectors are thresholded at 0.5, baselines at a threshold tuned
//! on the training split, and the metadata predictor by its argmax.

mod baselines;
mod metrics;
mod mp;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

pub use baselines::{baseline_score, Baseline, BaselineScore};
pub use metrics::{
    accuracy, auc, f1, map_at_k, precision_at_k, predict, threshold_candidates, tune_threshold, RetrievalRun,
};
pub use mp::{mp_score, train_mp, MPModel, MpConfig, MpScore};

use crate::counterfeiter::MetadataEncoder;
use crate::data::{Dataset, Package};
use crate::detector::{verify_batch, CVModel};
use crate::error::{AirdError, Result};
use crate::training::{hard_negative, sample_easy_negative};
use crate::vecindex::{Exclusion, IndexModel, ProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    /// Uniformly drawn wrong metadata.
    Random,
    /// Metadata of the nearest reference image with other metadata.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    /// The package as presented, carrying the claimed metadata.
    pub package: Package,
    pub true_metadata_id: u32,
    pub provenance: Provenance,
}

impl EvalInstance {
    pub fn is_real(&self) -> bool {
        self.provenance == Provenance::Real
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub instances: Vec<EvalInstance>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.instances.iter().map(EvalInstance::is_real).collect()
    }

    pub fn packages(&self) -> Vec<Package> {
        self.instances.iter().map(|i| i.package.clone()).collect()
    }

    /// Instances of the given provenances, in order.
    pub fn filter(&self, keep: &[Provenance]) -> EvalSet {
        EvalSet {
            instances: self
                .instances
                .iter()
                .filter(|i| keep.contains(&i.provenance))
                .cloned()
                .collect(),
        }
    }
}

/// Real, random-fake and hard-fake instances for every package of `ds`, in package order.
pub fn build_eval_set(ds: &Dataset, idx: &IndexModel, seed: u64, probe: &ProbeConfig) -> Result<EvalSet> {
    let mut rng = crate::seeded_rng(seed);
    let randoms = ds
        .packages()
        .iter()
        .map(|p| sample_easy_negative(ds, p, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let hards = ds
        .packages()
        .par_iter()
        .map(|p| hard_negative(idx, p, probe))
        .collect::<Result<Vec<_>>>()?;
    let mut instances = Vec::with_capacity(3 * ds.len());
    for ((p, r), h) in ds.packages().iter().zip(randoms).zip(hards) {
        for (claim, provenance) in [(p.metadata_id, Provenance::Real), (r, Provenance::Random), (h, Provenance::Hard)] {
            instances.push(EvalInstance {
                package: Package {
                    metadata_id: claim,
                    ..p.clone()
                },
                true_metadata_id: p.metadata_id,
                provenance,
            });
        }
    }
    Ok(EvalSet { instances })
}

/// Baseline scores over `set`; evidence excludes each query package itself.
pub fn score_baseline(
    baseline: Baseline,
    idx: &IndexModel,
    set: &EvalSet,
    k: usize,
    probe: &ProbeConfig,
) -> Result<Vec<f64>> {
    set.instances
        .par_iter()
        .map(|i| baseline_score(baseline, idx, &i.package, k, Some(i.package.package_id), probe).map(|s| s.score))
        .collect()
}

pub fn score_detector(
    cv: &CVModel,
    enc: &MetadataEncoder,
    idx: &IndexModel,
    set: &EvalSet,
    probe: &ProbeConfig,
) -> Result<Vec<f64>> {
    Ok(verify_batch(cv, enc, idx, &set.packages(), probe)?
        .into_iter()
        .map(|v| v.score)
        .collect())
}

pub fn score_mp(mp: &MPModel, set: &EvalSet) -> Result<Vec<MpScore>> {
    set.instances.par_iter().map(|i| mp_score(mp, &i.package)).collect()
}

/// Scores of one model plus its real/fake decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScores {
    pub name: String,
    pub scores: Vec<f64>,
    pub decisions: Vec<bool>,
}

impl ModelScores {
    pub fn thresholded(name: &str, scores: Vec<f64>, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            decisions: predict(&scores, threshold),
            scores,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelMetrics {
    pub f1_tamp: f64,
    pub f1_clean: f64,
    pub acc: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub name: String,
    #[serde(flatten)]
    pub metrics: ModelMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub k: usize,
    pub map_at_k: f64,
    pub precision_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub instances: usize,
    pub models: Vec<ModelRow>,
    pub retrieval: Option<RetrievalMetrics>,
}

pub fn metrics_of(scores: &[f64], decisions: &[bool], labels: &[bool]) -> Result<ModelMetrics> {
    if scores.len() != labels.len() || decisions.len() != labels.len() {
        return Err(AirdError::ShapeMismatch("scores, decisions and labels differ in length".into()));
    }
    Ok(ModelMetrics {
        f1_tamp: f1(decisions, labels, false),
        f1_clean: f1(decisions, labels, true),
        acc: accuracy(decisions, labels),
        auc: auc(scores, labels)?,
    })
}

/// Metrics of every model on `set`, labels taken from the set.
pub fn evaluate(models: &[ModelScores], set: &EvalSet) -> Result<EvalReport> {
    let labels = set.labels();
    let rows = models
        .iter()
        .map(|m| {
            Ok(ModelRow {
                name: m.name.clone(),
                metrics: metrics_of(&m.scores, &m.decisions, &labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        instances: set.len(),
        models: rows,
        retrieval: None,
    })
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|r| r.name == name).map(|r| &r.metrics)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields serialize")
    }

    /// Aligned table with one row per model.
    pub fn to_table(&self) -> String {
        let width = self.models.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>7}  {:>8}  {:>6}  {:>6}", "model", "F1-tamp", "F1-clean", "ACC", "AUC").unwrap();
        for r in &self.models {
            let m = &r.metrics;
            writeln!(
                out,
                "{:<width$}  {:>7.3}  {:>8.3}  {:>6.3}  {:>6.3}",
                r.name, m.f1_tamp, m.f1_clean, m.acc, m.auc
            )
            .unwrap();
        }
        if let Some(rq) = &self.retrieval {
            writeln!(out, "MAP@{k}: {:.4}  P@{k}: {:.4}", rq.map_at_k, rq.precision_at_k, k = rq.k).unwrap();
        }
        out
    }
}

/// Relevance of the top-`k` image retrievals for each query: retrieved metadata equals the query's.
///
/// With `exclude_self` the query's own package is left out of its results.
pub fn retrieval_runs(
    idx: &IndexModel,
    queries: &[Package],
    k: usize,
    exclude_self: bool,
    probe: &ProbeConfig,
) -> Result<Vec<RetrievalRun>> {
    queries
        .par_iter()
        .map(|q| {
            let own = exclude_self.then_some(q.package_id);
            let exclusion = Exclusion {
                metadata_id: None,
                package_id: own,
            };
            let hits = idx.search_excluding(&q.image_embedding, &probe.params(k), &exclusion)?;
            let stratum = idx.stratum(q.metadata_id).unwrap_or(&[]);
            let total = stratum.iter().filter(|&&id| Some(id) != own).count();
            Ok(RetrievalRun {
                relevant: hits.iter().map(|h| h.metadata_id == q.metadata_id).collect(),
                total_relevant: total,
            })
        })
        .collect()
}

pub fn retrieval_metrics(runs: &[RetrievalRun], k: usize) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics {
        k,
        map_at_k: map_at_k(runs, k)?,
        precision_at_k: precision_at_k(runs, k)?,
    })
}

/// Trained detectors to include in a report.
pub struct NamedDetector<'a> {
    pub name: &'a str,
    pub cv: &'a CVModel,
    pub encoder: &'a MetadataEncoder,
}

/// The full protocol: detectors, baselines B1–B4 (thresholds tuned on
/// `train`), the metadata predictor, and retrieval quality of `test`
/// queries against `idx`.
pub struct Protocol<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub idx: &'a IndexModel,
    pub k: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
}

impl Protocol<'_> {
    pub fn run(&self, detectors: &[NamedDetector<'_>], mp: Option<&MPModel>) -> Result<(EvalSet, EvalReport)> {
        let set = build_eval_set(self.test, self.idx, self.seed, &self.probe)?;
        let tuning = build_eval_set(self.train, self.idx, self.seed ^ 0x70e, &self.probe)?;
        let mut models = Vec::new();
        for d in detectors {
            let scores = score_detector(d.cv, d.encoder, self.idx, &set, &self.probe)?;
            models.push(ModelScores::thresholded(d.name, scores, 0.5));
        }
        for b in Baseline::ALL {
            let tune_scores = score_baseline(b, self.idx, &tuning, self.k, &self.probe)?;
            let t = tune_threshold(&tune_scores, &tuning.labels())?;
            let scores = score_baseline(b, self.idx, &set, self.k, &self.probe)?;
            models.push(ModelScores::thresholded(b.name(), scores, t));
        }
        if let Some(mp) = mp {
            let s = score_mp(mp, &set)?;
            models.push(ModelScores {
                name: "MP".into(),
                scores: s.iter().map(|x| x.score).collect(),
                decisions: s.iter().map(|x| x.matches).collect(),
            });
        }
        let mut report = evaluate(&models, &set)?;
        let runs = retrieval_runs(self.idx, self.test.packages(), self.k, true, &self.probe)?;
        report.retrieval = Some(retrieval_metrics(&runs, self.k)?);
        Ok((set, report))
    }
}
