//! Adversarial optimization of the counterfeiter and the detector.
//!
//! Each batch runs one detector step against a frozen counterfeiter, then one
//! counterfeiter step against the frozen detector. The detector sees four
//! instances per package: the real pair, the counterfeiter's fabrication,
//! the hard negative and a uniformly drawn easy negative. The metadata
//! encoder is updated only through the counterfeiter, except in NAD mode
//! where no counterfeiter exists and the detector loss trains it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::counterfeiter::{fetch_fake_candidates, CandidateSet, EncoderGrad, MGModel, MetadataEncoder, MgConfig};
use crate::data::{split_stratified, Dataset, Package};
use crate::detector::{image_evidence, metadata_evidence, CVModel, CvConfig, CvGrad, EvidenceItem, EvidenceSet};
use crate::error::{AirdError, Result};
use crate::evaluation::auc;
use crate::neural::{bce_terms, Adam, AdamConfig, NetGrad};
use crate::vecindex::{IndexModel, ProbeConfig};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Adversarial,
    /// Non-adversarial detector: real, hard and easy instances only.
    Nad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgLoss {
    /// Minimize `log(1 - CV(i, m~))`.
    Saturating,
    /// Maximize `log CV(i, m~)`.
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cv_lr: f64,
    pub mg_lr: f64,
    pub encoder_lr: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub mg_loss: MgLoss,
    pub meta_dim: usize,
    pub cv: CvConfig,
    pub mg: MgConfig,
    /// Detector steps per counterfeiter step.
    pub cv_steps_per_mg: usize,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            tau: 0.1,
            epochs: 50,
            batch_size: 64,
            cv_lr: 1e-3,
            mg_lr: 1e-3,
            encoder_lr: 1e-4,
            seed: 0,
            mode: TrainMode::Adversarial,
            mg_loss: MgLoss::NonSaturating,
            meta_dim: 32,
            cv: CvConfig::default(),
            mg: MgConfig::default(),
            cv_steps_per_mg: 1,
            val_fraction: 0.1,
            patience: 5,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(AirdError::config(what.to_string()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if [self.cv_lr, self.mg_lr, self.encoder_lr].iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.meta_dim == 0 {
            return bad("metadata embedding width must be positive");
        }
        if self.cv_steps_per_mg == 0 {
            return bad("cv_steps_per_mg must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.probe.nprobe == 0 {
            return bad("nprobe must be at least 1");
        }
        Ok(())
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig::with_lr(lr)
    }
}

/// Uniform draw from `0..vocab` excluding `true_id`.
pub fn sample_excluding(vocab: usize, true_id: u32, rng: &mut Rng) -> Result<u32> {
    if vocab < 2 {
        return Err(AirdError::config("easy negatives need at least two metadata ids"));
    }
    let r = rng.random_range(0..vocab as u32 - 1);
    Ok(if r >= true_id { r + 1 } else { r })
}

/// Easy negative: uniform over the vocabulary except the package's own id.
pub fn sample_easy_negative(ds: &Dataset, pkg: &Package, rng: &mut Rng) -> Result<u32> {
    sample_excluding(ds.vocabulary().len(), pkg.metadata_id, rng)
}

/// Uniform over `ids` (the metadata ids with reference packages) except `true_id`.
fn sample_from(ids: &[u32], true_id: u32, rng: &mut Rng) -> Result<u32> {
    let own = ids.binary_search(&true_id).ok();
    let n = ids.len() - own.is_some() as usize;
    if n == 0 {
        return Err(AirdError::config("easy negatives need at least two metadata ids"));
    }
    let mut r = rng.random_range(0..n);
    if own.is_some_and(|o| r >= o) {
        r += 1;
    }
    Ok(ids[r])
}

/// Metadata of the nearest reference package whose metadata differs from `pkg`'s.
pub fn hard_negative(idx: &IndexModel, pkg: &Package, probe: &ProbeConfig) -> Result<u32> {
    let p = probe.params(1);
    let hits = idx.search_excluding_metadata(&pkg.image_embedding, 1, pkg.metadata_id, p.nprobe, p.shortlist)?;
    hits.first()
        .map(|h| h.metadata_id)
        .ok_or(AirdError::NoCounterfeitSource(pkg.metadata_id))
}

/// Frozen-index retrievals for one training package.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub candidates: CandidateSet,
    pub image_evidence: Vec<EvidenceItem>,
    pub real_evidence: Vec<EvidenceItem>,
    pub hard_negative: u32,
    pub hard_evidence: Vec<EvidenceItem>,
}

impl CacheEntry {
    fn evidence(&self, by_metadata: Vec<EvidenceItem>) -> EvidenceSet {
        EvidenceSet {
            by_image: self.image_evidence.clone(),
            by_metadata,
        }
    }
}

/// One entry per dataset package, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalCache {
    entries: Vec<CacheEntry>,
}

impl RetrievalCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &CacheEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }
}

pub fn retrieve(idx: &IndexModel, pkg: &Package, k: usize, probe: &ProbeConfig) -> Result<CacheEntry> {
    let image = &pkg.image_embedding;
    let own = Some(pkg.package_id);
    let hard = hard_negative(idx, pkg, probe)?;
    Ok(CacheEntry {
        candidates: fetch_fake_candidates(idx, pkg, k, probe)?,
        image_evidence: image_evidence(idx, image, k, own, probe)?,
        real_evidence: metadata_evidence(idx, image, pkg.metadata_id, k, own)?,
        hard_negative: hard,
        hard_evidence: metadata_evidence(idx, image, hard, k, own)?,
    })
}

/// Runs every retrieval training needs, in parallel over packages.
pub fn precompute_retrievals(idx: &IndexModel, ds: &Dataset, k: usize, probe: &ProbeConfig) -> Result<RetrievalCache> {
    let entries = ds
        .packages()
        .par_iter()
        .map(|p| retrieve(idx, p, k, probe))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalCache { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CvLoss {
    pub real: f64,
    pub fabricated: f64,
    pub hard: f64,
    pub easy: f64,
}

impl CvLoss {
    pub fn total(&self) -> f64 {
        self.real + self.fabricated + self.hard + self.easy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cv_loss: f64,
    pub mg_loss: Option<f64>,
    pub val_auc: Option<f64>,
    /// Validation AUC of real pairs against easy negatives only.
    pub val_auc_easy: Option<f64>,
}

/// Tab-separated `epoch cv_loss mg_loss val_auc val_auc_easy` rows; `-` marks a missing value.
pub fn format_history(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    let mut out = String::new();
    for r in history {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.cv_loss,
            opt(r.mg_loss),
            opt(r.val_auc),
            opt(r.val_auc_easy)
        )
        .unwrap();
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, format_history(history))?;
    Ok(())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

struct ValInstance {
    package: usize,
    claim: u32,
    evidence: EvidenceSet,
    real: bool,
    easy: bool,
}

/// Models, optimizers and frozen retrievals for one training run.
pub struct Trainer<'a> {
    config: TrainConfig,
    ds: &'a Dataset,
    idx: &'a IndexModel,
    cache: RetrievalCache,
    rd_ids: Vec<u32>,
    pub cv: CVModel,
    pub mg: Option<MGModel>,
    pub encoder: MetadataEncoder,
    cv_opt: Adam,
    mg_opt: Option<Adam>,
    enc_opt: Adam,
    rng: Rng,
}

impl<'a> Trainer<'a> {
    /// Initializes all models; `idx` must index `ds`.
    pub fn new(config: TrainConfig, ds: &'a Dataset, idx: &'a IndexModel) -> Result<Self> {
        config.validate()?;
        let cache = precompute_retrievals(idx, ds, config.k, &config.probe)?;
        Self::with_cache(config, ds, idx, cache)
    }

    pub fn with_cache(config: TrainConfig, ds: &'a Dataset, idx: &'a IndexModel, cache: RetrievalCache) -> Result<Self> {
        config.validate()?;
        if ds.is_empty() {
            return Err(AirdError::EmptyDataset);
        }
        if cache.len() != ds.len() {
            return Err(AirdError::ShapeMismatch("retrieval cache does not match the dataset".into()));
        }
        let di = ds.dim();
        let dm = config.meta_dim;
        let s = config.seed;
        let encoder = MetadataEncoder::new(ds.vocabulary().len(), dm, s ^ 0x0e0c)?;
        let cv = CVModel::new(di, dm, config.k, &config.cv, s ^ 0xc0)?;
        let mg = match config.mode {
            TrainMode::Adversarial => Some(MGModel::new(di, dm, &config.mg, s ^ 0x3a)?),
            TrainMode::Nad => None,
        };
        let cv_opt = Adam::new(TrainConfig::adam(config.cv_lr), &cv.tensor_sizes());
        let mg_opt = mg
            .as_ref()
            .map(|m| Adam::new(TrainConfig::adam(config.mg_lr), &m.cssn.tensor_sizes()));
        let enc_opt = Adam::new(TrainConfig::adam(config.encoder_lr), &vec![dm; encoder.vocab()]);
        Ok(Self {
            rd_ids: idx.metadata_ids().collect(),
            rng: crate::seeded_rng(s),
            config,
            ds,
            idx,
            cache,
            cv,
            mg,
            encoder,
            cv_opt,
            mg_opt,
            enc_opt,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn cache(&self) -> &RetrievalCache {
        &self.cache
    }

    fn package(&self, i: usize) -> &'a Package {
        &self.ds.packages()[i]
    }

    fn claim_evidence(&self, i: usize, claim: u32) -> Result<Vec<EvidenceItem>> {
        let p = self.package(i);
        metadata_evidence(self.idx, &p.image_embedding, claim, self.config.k, Some(p.package_id))
    }

    /// BCE of one instance; parameter gradients go to `grad`, input gradients to `enc_grad` when given.
    fn cv_term(
        &self,
        image: &[f32],
        claim: Option<u32>,
        meta: &[f64],
        evidence: &EvidenceSet,
        target: f64,
        grad: &mut CvGrad,
        enc_grad: Option<&mut EncoderGrad>,
    ) -> Result<f64> {
        let tape = self.cv.verify_with_tape(&self.encoder, evidence, image, meta)?;
        let (loss, dy) = bce_terms(tape.output(), target);
        let input = self.cv.backward_into(&tape, dy, grad)?;
        if let Some(eg) = enc_grad {
            if let Some(id) = claim {
                crate::counterfeiter::accumulate_row(eg, id, &input.query_meta);
            }
            input.accumulate_evidence(evidence, eg);
        }
        Ok(loss)
    }

    fn apply_encoder(&mut self, enc_grad: EncoderGrad, scale: f64) -> Result<()> {
        for (id, mut g) in enc_grad {
            g.iter_mut().for_each(|x| *x *= scale);
            let row = self.encoder.row_mut(id)?;
            self.enc_opt.step_one(id as usize, row, &g)?;
        }
        Ok(())
    }

    /// One detector update on `batch` (dataset positions); the counterfeiter is frozen.
    ///
    /// Returns the batch-mean loss terms.
    pub fn cv_step(&mut self, batch: &[usize]) -> Result<CvLoss> {
        if batch.is_empty() {
            return Ok(CvLoss::default());
        }
        let nad = self.config.mode == TrainMode::Nad;
        let mut grad = CvGrad::zeros_like(&self.cv);
        let mut enc_grad = EncoderGrad::new();
        let mut loss = CvLoss::default();
        for &i in batch {
            let p = self.package(i);
            let entry = self.cache.get(i);
            let image = &p.image_embedding;
            let m = p.metadata_id;
            let meta = widen(self.encoder.encode(m)?);
            let ev = entry.evidence(entry.real_evidence.clone());
            loss.real += self.cv_term(image, Some(m), &meta, &ev, 1.0, &mut grad, nad.then_some(&mut enc_grad))?;

            if let Some(mg) = &self.mg {
                let fab = mg.fabricate(&self.encoder, &entry.candidates, image, self.config.tau)?;
                let ev = entry.evidence(self.claim_evidence(i, fab.chosen_metadata_id)?);
                loss.fabricated += self.cv_term(image, None, &fab.metadata, &ev, 0.0, &mut grad, None)?;
            }

            let hard = entry.hard_negative;
            let meta = widen(self.encoder.encode(hard)?);
            let ev = entry.evidence(entry.hard_evidence.clone());
            loss.hard += self.cv_term(image, Some(hard), &meta, &ev, 0.0, &mut grad, nad.then_some(&mut enc_grad))?;

            let easy = sample_from(&self.rd_ids, m, &mut self.rng)?;
            let meta = widen(self.encoder.encode(easy)?);
            let ev = entry.evidence(self.claim_evidence(i, easy)?);
            loss.easy += self.cv_term(image, Some(easy), &meta, &ev, 0.0, &mut grad, nad.then_some(&mut enc_grad))?;
        }
        let scale = 1.0 / batch.len() as f64;
        grad.scale(scale);
        let tensors = grad.tensors();
        self.cv_opt.step(&mut self.cv.tensors_mut(), &tensors)?;
        if nad {
            self.apply_encoder(enc_grad, scale)?;
        }
        for v in [&mut loss.real, &mut loss.fabricated, &mut loss.hard, &mut loss.easy] {
            *v *= scale;
        }
        Ok(loss)
    }

    /// One counterfeiter update on `batch` against the frozen detector; returns the batch-mean loss.
    ///
    /// A no-op returning 0 in NAD mode.
    pub fn mg_step(&mut self, batch: &[usize]) -> Result<f64> {
        let Some(mg) = &self.mg else {
            return Ok(0.0);
        };
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut grad = NetGrad::zeros_like(&mg.cssn);
        let mut enc_grad = EncoderGrad::new();
        let mut scratch = CvGrad::zeros_like(&self.cv);
        let mut total = 0.0;
        for &i in batch {
            let image = &self.package(i).image_embedding;
            let entry = self.cache.get(i);
            let (fab, ftape) = mg.fabricate_with_tape(&self.encoder, &entry.candidates, image, self.config.tau)?;
            let ev = entry.evidence(self.claim_evidence(i, fab.chosen_metadata_id)?);
            let tape = self.cv.verify_with_tape(&self.encoder, &ev, image, &fab.metadata)?;
            let (loss, dy) = match self.config.mg_loss {
                MgLoss::NonSaturating => bce_terms(tape.output(), 1.0),
                MgLoss::Saturating => {
                    let (l, d) = bce_terms(tape.output(), 0.0);
                    (-l, -d)
                }
            };
            total += loss;
            let input = self.cv.backward_into(&tape, dy, &mut scratch)?;
            mg.backward_into(&ftape, &input.query_meta, &mut grad, &mut enc_grad)?;
        }
        let scale = 1.0 / batch.len() as f64;
        grad.scale(scale);
        let tensors = grad.tensors();
        let mg = self.mg.as_mut().expect("checked above");
        self.mg_opt
            .as_mut()
            .expect("allocated with the counterfeiter")
            .step(&mut mg.cssn.tensors_mut(), &tensors)?;
        self.apply_encoder(enc_grad, scale)?;
        Ok(total * scale)
    }

    fn validation_set(&self, positions: &[usize], seed: u64) -> Result<Vec<ValInstance>> {
        let mut rng = crate::seeded_rng(seed);
        let mut out = Vec::with_capacity(3 * positions.len());
        for &i in positions {
            let entry = self.cache.get(i);
            let m = self.package(i).metadata_id;
            let easy = sample_from(&self.rd_ids, m, &mut rng)?;
            out.push(ValInstance {
                package: i,
                claim: m,
                evidence: entry.evidence(entry.real_evidence.clone()),
                real: true,
                easy: false,
            });
            out.push(ValInstance {
                package: i,
                claim: entry.hard_negative,
                evidence: entry.evidence(entry.hard_evidence.clone()),
                real: false,
                easy: false,
            });
            out.push(ValInstance {
                package: i,
                claim: easy,
                evidence: entry.evidence(self.claim_evidence(i, easy)?),
                real: false,
                easy: true,
            });
        }
        Ok(out)
    }

    fn validate(&self, set: &[ValInstance]) -> Result<(f64, f64)> {
        let scores = set
            .iter()
            .map(|v| {
                let meta = widen(self.encoder.encode(v.claim)?);
                self.cv
                    .verify(&self.encoder, &v.evidence, &self.package(v.package).image_embedding, &meta)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<bool> = set.iter().map(|v| v.real).collect();
        let all = auc(&scores, &labels)?;
        let (es, el): (Vec<f64>, Vec<bool>) = set
            .iter()
            .zip(&scores)
            .filter(|(v, _)| v.real || v.easy)
            .map(|(v, &s)| (s, v.real))
            .unzip();
        Ok((all, auc(&es, &el)?))
    }
}

/// Output of [`train`]: the models from the best validation epoch.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub cv: CVModel,
    pub mg: Option<MGModel>,
    pub encoder: MetadataEncoder,
    pub history: Vec<EpochRecord>,
    /// Epoch whose models were kept; 0 means the initial models.
    pub best_epoch: usize,
}

fn positions_of(ds: &Dataset, part: &Dataset) -> Vec<usize> {
    let wanted: std::collections::HashSet<u64> = part.packages().iter().map(|p| p.package_id).collect();
    (0..ds.len())
        .filter(|&i| wanted.contains(&ds.packages()[i].package_id))
        .collect()
}

/// Trains on `train` (indexed by `idx`), holding out a stratified validation share.
pub fn train(config: &TrainConfig, train: &Dataset, idx: &IndexModel) -> Result<TrainOutput> {
    train_with(Trainer::new(config.clone(), train, idx)?)
}

pub fn train_with(mut t: Trainer<'_>) -> Result<TrainOutput> {
    let config = t.config.clone();
    let ds = t.ds;
    let (fit, val) = if config.val_fraction > 0.0 {
        let split = split_stratified(ds, 1.0 - config.val_fraction, config.seed ^ 0x7a1)?;
        (positions_of(ds, &split.train), positions_of(ds, &split.test))
    } else {
        ((0..ds.len()).collect(), Vec::new())
    };
    let val_set = t.validation_set(&val, config.seed ^ 0x7a2)?;
    let has_val = val_set.iter().any(|v| v.real) && val_set.iter().any(|v| !v.real);

    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, t.cv.clone(), t.mg.clone(), t.encoder.clone());
    let mut stale = 0;
    let mut order = fit;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut t.rng);
        let (mut cv_sum, mut mg_sum, mut mg_batches, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            cv_sum += t.cv_step(batch)?.total();
            batches += 1;
            if t.mg.is_some() && (b + 1) % config.cv_steps_per_mg == 0 {
                mg_sum += t.mg_step(batch)?;
                mg_batches += 1;
            }
        }
        let (val_auc, val_auc_easy) = if has_val {
            let (a, e) = t.validate(&val_set)?;
            (Some(a), Some(e))
        } else {
            (None, None)
        };
        history.push(EpochRecord {
            epoch,
            cv_loss: cv_sum / batches.max(1) as f64,
            mg_loss: t.mg.as_ref().map(|_| mg_sum / mg_batches.max(1) as f64),
            val_auc,
            val_auc_easy,
        });
        let score = val_auc.unwrap_or(f64::INFINITY);
        if score > best.0 || !has_val {
            best = (score, epoch, t.cv.clone(), t.mg.clone(), t.encoder.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, cv, mg, encoder) = best;
    Ok(TrainOutput {
        cv,
        mg,
        encoder,
        history,
        best_epoch,
    })
}
