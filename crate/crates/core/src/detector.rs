//! The detector: dual evidence gathering and the consistency verifier.
//!
//! Evidence for a query `(i, m)` is the `K` nearest reference packages by
//! image and the `K` reference packages carrying `m`, ranked by similarity
//! to `i`. Two Siamese aggregators encode the query against each evidence
//! list per modality; three fusion layers and a sigmoid unit turn the four
//! aggregates into the probability that the package is authentic.

use std::fmt;

use crate::counterfeiter::{accumulate_row, EncoderGrad, MetadataEncoder};
use crate::error::{check_dim, AirdError, Result};
use crate::neural::{
    bce_terms, checkpoint_encoder, Activation, Checkpoint, DenseNet, GradientCheckable, NetGrad, Probe, SectionTag,
    Tape,
};
use crate::vecindex::{pad_cyclic, Exclusion, Hit, IndexModel, ProbeConfig};
use crate::data::Package;

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceItem {
    pub package_id: u64,
    pub metadata_id: u32,
    pub image: Vec<f32>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSet {
    pub by_image: Vec<EvidenceItem>,
    pub by_metadata: Vec<EvidenceItem>,
}

fn items(idx: &IndexModel, hits: &[Hit]) -> Vec<EvidenceItem> {
    hits.iter()
        .map(|h| EvidenceItem {
            package_id: h.package_id,
            metadata_id: h.metadata_id,
            image: idx.vector(h.package_id).expect("hit from this index").to_vec(),
            similarity: h.similarity,
        })
        .collect()
}

/// Top-`k` image neighbours of `image`, leaving out `exclude` (the query itself).
pub fn image_evidence(
    idx: &IndexModel,
    image: &[f32],
    k: usize,
    exclude: Option<u64>,
    probe: &ProbeConfig,
) -> Result<Vec<EvidenceItem>> {
    let exclusion = Exclusion {
        metadata_id: None,
        package_id: exclude,
    };
    let hits = idx.search_excluding(image, &probe.params(k), &exclusion)?;
    Ok(items(idx, &pad_cyclic(hits, k)))
}

/// Top-`k` packages carrying `metadata_id`, ranked by similarity to `image`.
pub fn metadata_evidence(
    idx: &IndexModel,
    image: &[f32],
    metadata_id: u32,
    k: usize,
    exclude: Option<u64>,
) -> Result<Vec<EvidenceItem>> {
    let hits = idx.lookup_by_metadata_excluding(metadata_id, k, image, exclude)?;
    Ok(items(idx, &hits))
}

/// Both evidence lists for a query claiming `metadata_id`.
///
/// For a fabricated claim pass the id its metadata stands in for.
pub fn gather_evidence(
    idx: &IndexModel,
    image: &[f32],
    metadata_id: u32,
    k: usize,
    exclude: Option<u64>,
    probe: &ProbeConfig,
) -> Result<EvidenceSet> {
    if idx.is_empty() {
        return Err(AirdError::EmptyIndex);
    }
    if idx.stratum(metadata_id).is_none() {
        return Err(AirdError::UnknownMetadata(metadata_id));
    }
    Ok(EvidenceSet {
        by_image: image_evidence(idx, image, k, exclude, probe)?,
        by_metadata: metadata_evidence(idx, image, metadata_id, k, exclude)?,
    })
}

/// Layer widths of the verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub agg_hidden: usize,
    pub agg_out: usize,
    pub fuse: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            agg_hidden: 256,
            agg_out: 64,
            fuse: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CVModel {
    pub agg_img: DenseNet,
    pub agg_meta: DenseNet,
    pub fuse_img: DenseNet,
    pub fuse_meta: DenseNet,
    pub fuse_cross: DenseNet,
    pub judge: DenseNet,
    k: usize,
    image_dim: usize,
    meta_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvGrad {
    pub agg_img: NetGrad,
    pub agg_meta: NetGrad,
    pub fuse_img: NetGrad,
    pub fuse_meta: NetGrad,
    pub fuse_cross: NetGrad,
    pub judge: NetGrad,
}

impl CvGrad {
    pub fn zeros_like(cv: &CVModel) -> Self {
        Self {
            agg_img: NetGrad::zeros_like(&cv.agg_img),
            agg_meta: NetGrad::zeros_like(&cv.agg_meta),
            fuse_img: NetGrad::zeros_like(&cv.fuse_img),
            fuse_meta: NetGrad::zeros_like(&cv.fuse_meta),
            fuse_cross: NetGrad::zeros_like(&cv.fuse_cross),
            judge: NetGrad::zeros_like(&cv.judge),
        }
    }

    pub fn parts(&self) -> [&NetGrad; 6] {
        [
            &self.agg_img,
            &self.agg_meta,
            &self.fuse_img,
            &self.fuse_meta,
            &self.fuse_cross,
            &self.judge,
        ]
    }

    pub fn add_assign(&mut self, other: &CvGrad) {
        self.agg_img.add_assign(&other.agg_img);
        self.agg_meta.add_assign(&other.agg_meta);
        self.fuse_img.add_assign(&other.fuse_img);
        self.fuse_meta.add_assign(&other.fuse_meta);
        self.fuse_cross.add_assign(&other.fuse_cross);
        self.judge.add_assign(&other.judge);
    }

    pub fn scale(&mut self, s: f64) {
        for g in [
            &mut self.agg_img,
            &mut self.agg_meta,
            &mut self.fuse_img,
            &mut self.fuse_meta,
            &mut self.fuse_cross,
            &mut self.judge,
        ] {
            g.scale(s);
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.parts().into_iter().flat_map(|g| g.tensors()).collect()
    }
}

/// Gradients of the verifier output with respect to its metadata inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrad {
    pub query_meta: Vec<f64>,
    pub image_evidence_meta: Vec<Vec<f64>>,
    pub metadata_evidence_meta: Vec<Vec<f64>>,
}

impl InputGrad {
    /// Folds the evidence-side gradients into encoder rows; the query row is handled by the caller.
    pub fn accumulate_evidence(&self, evidence: &EvidenceSet, enc_grad: &mut EncoderGrad) {
        for (item, g) in evidence.by_image.iter().zip(&self.image_evidence_meta) {
            accumulate_row(enc_grad, item.metadata_id, g);
        }
        for (item, g) in evidence.by_metadata.iter().zip(&self.metadata_evidence_meta) {
            accumulate_row(enc_grad, item.metadata_id, g);
        }
    }
}

pub struct CvTape {
    agg: [Tape; 4],
    fuse_img: Tape,
    fuse_meta: Tape,
    fuse_cross: Tape,
    judge: Tape,
}

impl CvTape {
    pub fn output(&self) -> f64 {
        self.judge.output()[0]
    }

    fn relu_preacts(&self, cv: &CVModel) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.agg[0].relu_preacts(&cv.agg_img));
        out.extend(self.agg[1].relu_preacts(&cv.agg_img));
        out.extend(self.agg[2].relu_preacts(&cv.agg_meta));
        out.extend(self.agg[3].relu_preacts(&cv.agg_meta));
        out.extend(self.fuse_img.relu_preacts(&cv.fuse_img));
        out.extend(self.fuse_meta.relu_preacts(&cv.fuse_meta));
        out.extend(self.fuse_cross.relu_preacts(&cv.fuse_cross));
        out
    }
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

impl CVModel {
    pub fn new(image_dim: usize, meta_dim: usize, k: usize, config: &CvConfig, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(AirdError::config("K must be at least 1"));
        }
        let mut rng = crate::seeded_rng(seed);
        let relu2 = [Activation::Relu, Activation::Relu];
        let k1 = k + 1;
        let agg_img = DenseNet::new(&[k1 * image_dim, config.agg_hidden, config.agg_out], &relu2, &mut rng)?;
        let agg_meta = DenseNet::new(&[k1 * meta_dim, config.agg_hidden, config.agg_out], &relu2, &mut rng)?;
        let fuse_img = DenseNet::new(&[2 * config.agg_out, config.fuse], &[Activation::Relu], &mut rng)?;
        let fuse_meta = DenseNet::new(&[2 * config.agg_out, config.fuse], &[Activation::Relu], &mut rng)?;
        let fuse_cross = DenseNet::new(&[2 * config.fuse, config.fuse], &[Activation::Relu], &mut rng)?;
        let judge = DenseNet::new(&[config.fuse, 1], &[Activation::Sigmoid], &mut rng)?;
        Self::from_parts([agg_img, agg_meta, fuse_img, fuse_meta, fuse_cross, judge], image_dim, meta_dim)
    }

    /// Assembles a verifier from `[agg_img, agg_meta, fuse_img, fuse_meta, fuse_cross, judge]`.
    pub fn from_parts(parts: [DenseNet; 6], image_dim: usize, meta_dim: usize) -> Result<Self> {
        let [agg_img, agg_meta, fuse_img, fuse_meta, fuse_cross, judge] = parts;
        if image_dim == 0 || meta_dim == 0 || agg_img.input_dim() % image_dim != 0 {
            return Err(AirdError::ShapeMismatch("image aggregator input is not (K+1)·d_i".into()));
        }
        let k = agg_img.input_dim() / image_dim - 1;
        if k == 0 {
            return Err(AirdError::ShapeMismatch("aggregators need K ≥ 1".into()));
        }
        check_dim((k + 1) * meta_dim, agg_meta.input_dim())?;
        check_dim(2 * agg_img.output_dim(), fuse_img.input_dim())?;
        check_dim(2 * agg_meta.output_dim(), fuse_meta.input_dim())?;
        check_dim(fuse_img.output_dim() + fuse_meta.output_dim(), fuse_cross.input_dim())?;
        check_dim(fuse_cross.output_dim(), judge.input_dim())?;
        check_dim(1, judge.output_dim())?;
        if judge.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(AirdError::ShapeMismatch("judge must end in a sigmoid unit".into()));
        }
        Ok(Self {
            agg_img,
            agg_meta,
            fuse_img,
            fuse_meta,
            fuse_cross,
            judge,
            k,
            image_dim,
            meta_dim,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    pub fn nets(&self) -> [&DenseNet; 6] {
        [
            &self.agg_img,
            &self.agg_meta,
            &self.fuse_img,
            &self.fuse_meta,
            &self.fuse_cross,
            &self.judge,
        ]
    }

    pub fn nets_mut(&mut self) -> [&mut DenseNet; 6] {
        [
            &mut self.agg_img,
            &mut self.agg_meta,
            &mut self.fuse_img,
            &mut self.fuse_meta,
            &mut self.fuse_cross,
            &mut self.judge,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.nets().iter().flat_map(|n| n.tensor_sizes()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.nets_mut().into_iter().flat_map(|n| n.tensors_mut()).collect()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (n, net) in self.nets().iter().enumerate() {
            if i < net.param_count() {
                return (n, i);
            }
            i -= net.param_count();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, i: usize) -> f32 {
        let (n, j) = self.locate(i);
        self.nets()[n].param(j)
    }

    pub fn set_param(&mut self, i: usize, v: f32) {
        let (n, j) = self.locate(i);
        self.nets_mut()[n].set_param(j, v);
    }

    fn check_evidence(&self, evidence: &EvidenceSet) -> Result<()> {
        check_dim(self.k, evidence.by_image.len())?;
        check_dim(self.k, evidence.by_metadata.len())?;
        Ok(())
    }

    fn image_input(&self, image: &[f32], items: &[EvidenceItem]) -> Result<Vec<f64>> {
        check_dim(self.image_dim, image.len())?;
        let mut x = Vec::with_capacity((self.k + 1) * self.image_dim);
        x.extend(image.iter().map(|&v| v as f64));
        for it in items {
            check_dim(self.image_dim, it.image.len())?;
            x.extend(it.image.iter().map(|&v| v as f64));
        }
        Ok(x)
    }

    fn meta_input(&self, enc: &MetadataEncoder, query_meta: &[f64], items: &[EvidenceItem]) -> Result<Vec<f64>> {
        check_dim(self.meta_dim, query_meta.len())?;
        check_dim(self.meta_dim, enc.width())?;
        let mut x = Vec::with_capacity((self.k + 1) * self.meta_dim);
        x.extend_from_slice(query_meta);
        for it in items {
            x.extend(enc.encode(it.metadata_id)?.iter().map(|&v| v as f64));
        }
        Ok(x)
    }

    /// Authenticity probability of `(image, query_meta)` given its evidence.
    ///
    /// `query_meta` is the claimed id's encoder row, or a fabricated embedding.
    pub fn verify(&self, enc: &MetadataEncoder, evidence: &EvidenceSet, image: &[f32], query_meta: &[f64]) -> Result<f64> {
        Ok(self.verify_with_tape(enc, evidence, image, query_meta)?.output())
    }

    pub fn verify_with_tape(
        &self,
        enc: &MetadataEncoder,
        evidence: &EvidenceSet,
        image: &[f32],
        query_meta: &[f64],
    ) -> Result<CvTape> {
        self.check_evidence(evidence)?;
        let (h_ii, t0) = self.agg_img.forward(&self.image_input(image, &evidence.by_image)?)?;
        let (h_im, t1) = self.agg_img.forward(&self.image_input(image, &evidence.by_metadata)?)?;
        let (h_mi, t2) = self.agg_meta.forward(&self.meta_input(enc, query_meta, &evidence.by_image)?)?;
        let (h_mm, t3) = self.agg_meta.forward(&self.meta_input(enc, query_meta, &evidence.by_metadata)?)?;
        let (h_img, fuse_img) = self.fuse_img.forward(&concat(&[&h_ii, &h_im]))?;
        let (h_meta, fuse_meta) = self.fuse_meta.forward(&concat(&[&h_mi, &h_mm]))?;
        let (h_cross, fuse_cross) = self.fuse_cross.forward(&concat(&[&h_img, &h_meta]))?;
        let (_, judge) = self.judge.forward(&h_cross)?;
        Ok(CvTape {
            agg: [t0, t1, t2, t3],
            fuse_img,
            fuse_meta,
            fuse_cross,
            judge,
        })
    }

    /// Back-propagates `d loss / d y`, accumulating parameter gradients into `grad`.
    pub fn backward_into(&self, tape: &CvTape, grad_y: f64, grad: &mut CvGrad) -> Result<InputGrad> {
        let d_cross = self.judge.backward_into(&tape.judge, &[grad_y], &mut grad.judge)?;
        let d_fused = self.fuse_cross.backward_into(&tape.fuse_cross, &d_cross, &mut grad.fuse_cross)?;
        let (d_img, d_meta) = d_fused.split_at(self.fuse_img.output_dim());
        let d_aggi = self.fuse_img.backward_into(&tape.fuse_img, d_img, &mut grad.fuse_img)?;
        let d_aggm = self.fuse_meta.backward_into(&tape.fuse_meta, d_meta, &mut grad.fuse_meta)?;
        let hi = self.agg_img.output_dim();
        let hm = self.agg_meta.output_dim();
        self.agg_img.backward_into(&tape.agg[0], &d_aggi[..hi], &mut grad.agg_img)?;
        self.agg_img.backward_into(&tape.agg[1], &d_aggi[hi..], &mut grad.agg_img)?;
        let dx_i = self.agg_meta.backward_into(&tape.agg[2], &d_aggm[..hm], &mut grad.agg_meta)?;
        let dx_m = self.agg_meta.backward_into(&tape.agg[3], &d_aggm[hm..], &mut grad.agg_meta)?;
        let dm = self.meta_dim;
        let rows = |dx: &[f64]| dx[dm..].chunks(dm).map(<[f64]>::to_vec).collect::<Vec<_>>();
        Ok(InputGrad {
            query_meta: dx_i[..dm].iter().zip(&dx_m[..dm]).map(|(a, b)| a + b).collect(),
            image_evidence_meta: rows(&dx_i),
            metadata_evidence_meta: rows(&dx_m),
        })
    }

    pub fn to_checkpoint(&self, enc: &MetadataEncoder) -> Checkpoint {
        Checkpoint {
            tag: SectionTag::Cv,
            layers: self.nets().iter().flat_map(|n| n.layers().to_vec()).collect(),
            encoder: Some(checkpoint_encoder(enc)),
            optimizers: Vec::new(),
        }
    }

    /// Rebuilds verifier and encoder; layer counts per part are 2, 2, 1, 1, 1, 1.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, MetadataEncoder)> {
        if ck.tag != SectionTag::Cv {
            return Err(AirdError::format("not a CV checkpoint"));
        }
        let table = ck
            .encoder
            .as_ref()
            .ok_or_else(|| AirdError::format("CV checkpoint lacks an encoder table"))?;
        let enc = MetadataEncoder::from_table(table.width, table.rows.clone())?;
        if ck.layers.len() != 8 {
            return Err(AirdError::format(format!("CV checkpoint has {} layers, expected 8", ck.layers.len())));
        }
        let mut layers = ck.layers.iter().cloned();
        let mut take = |n: usize| DenseNet::from_layers(layers.by_ref().take(n).collect());
        let parts = [take(2)?, take(2)?, take(1)?, take(1)?, take(1)?, take(1)?];
        let dm = enc.width();
        if parts[1].input_dim() % dm != 0 {
            return Err(AirdError::format("metadata aggregator width inconsistent with encoder"));
        }
        let k1 = parts[1].input_dim() / dm;
        if k1 < 2 || parts[0].input_dim() % k1 != 0 {
            return Err(AirdError::format("image aggregator width inconsistent with K"));
        }
        let di = parts[0].input_dim() / k1;
        Ok((Self::from_parts(parts, di, dm).map_err(|e| AirdError::format(e.to_string()))?, enc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictFlag {
    Scored,
    /// The claimed metadata id has no reference stratum.
    Unverifiable,
}

impl fmt::Display for VerdictFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictFlag::Scored => "ok",
            VerdictFlag::Unverifiable => "unverifiable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub package_id: u64,
    pub score: f64,
    pub flag: VerdictFlag,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.package_id, self.score, self.flag)
    }
}

/// Gathers evidence for `pkg` and scores it; unknown claims score 0 and are flagged.
pub fn verify_package(
    cv: &CVModel,
    enc: &MetadataEncoder,
    idx: &IndexModel,
    pkg: &Package,
    probe: &ProbeConfig,
) -> Result<Verdict> {
    let unverifiable = Verdict {
        package_id: pkg.package_id,
        score: 0.0,
        flag: VerdictFlag::Unverifiable,
    };
    if idx.stratum(pkg.metadata_id).is_none() || enc.encode(pkg.metadata_id).is_err() {
        return Ok(unverifiable);
    }
    let evidence = gather_evidence(idx, &pkg.image_embedding, pkg.metadata_id, cv.k(), Some(pkg.package_id), probe)?;
    let meta: Vec<f64> = enc.encode(pkg.metadata_id)?.iter().map(|&v| v as f64).collect();
    Ok(Verdict {
        package_id: pkg.package_id,
        score: cv.verify(enc, &evidence, &pkg.image_embedding, &meta)?,
        flag: VerdictFlag::Scored,
    })
}

/// Scores many packages concurrently; output order follows `packages`.
pub fn verify_batch(
    cv: &CVModel,
    enc: &MetadataEncoder,
    idx: &IndexModel,
    packages: &[Package],
    probe: &ProbeConfig,
) -> Result<Vec<Verdict>> {
    use rayon::prelude::*;
    packages
        .par_iter()
        .map(|p| verify_package(cv, enc, idx, p, probe))
        .collect()
}

/// Binary cross-entropy of the verifier on one query, over the verifier
/// parameters followed by the query embedding.
pub struct VerifierObjective<'a> {
    pub cv: CVModel,
    pub encoder: &'a MetadataEncoder,
    pub evidence: &'a EvidenceSet,
    pub image: &'a [f32],
    pub query_meta: Vec<f32>,
    pub target: f64,
}

impl VerifierObjective<'_> {
    fn meta(&self) -> Vec<f64> {
        self.query_meta.iter().map(|&v| v as f64).collect()
    }
}

impl GradientCheckable for VerifierObjective<'_> {
    fn num_params(&self) -> usize {
        self.cv.param_count() + self.query_meta.len()
    }

    fn param(&self, i: usize) -> f32 {
        let p = self.cv.param_count();
        if i < p {
            self.cv.param(i)
        } else {
            self.query_meta[i - p]
        }
    }

    fn set_param(&mut self, i: usize, v: f32) {
        let p = self.cv.param_count();
        if i < p {
            self.cv.set_param(i, v);
        } else {
            self.query_meta[i - p] = v;
        }
    }

    fn probe(&self) -> Result<Probe> {
        let tape = self.cv.verify_with_tape(self.encoder, self.evidence, self.image, &self.meta())?;
        Ok(Probe {
            loss: bce_terms(tape.output(), self.target).0,
            relu_preacts: tape.relu_preacts(&self.cv),
        })
    }

    fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let tape = self.cv.verify_with_tape(self.encoder, self.evidence, self.image, &self.meta())?;
        let (_, dy) = bce_terms(tape.output(), self.target);
        let mut grad = CvGrad::zeros_like(&self.cv);
        let input = self.cv.backward_into(&tape, dy, &mut grad)?;
        let mut out: Vec<f64> = grad.tensors().concat();
        out.extend(input.query_meta);
        Ok(out)
    }
}
