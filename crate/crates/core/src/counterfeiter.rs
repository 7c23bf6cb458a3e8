//! The counterfeiter: fake-candidate retrieval and the metadata generator.
//!
//! For a package `(i, m)` the generator retrieves the `K` most similar
//! reference images whose metadata differs, scores each candidate with a
//! small network over `[i, m, i_k, m_k]`, turns the scores into a sharp
//! choice distribution with a low-temperature softmax and emits the
//! weighted sum of candidate metadata embeddings. Every step is
//! differentiable, so the scorer and the shared metadata encoder learn from
//! the detector's verdict.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::Package;
use crate::error::{check_dim, AirdError, Result};
use crate::neural::{
    softmax_temperature, softmax_temperature_backward, Activation, Checkpoint, DenseNet, GradientCheckable,
    NetGrad, Probe, SectionTag, Tape,
};
use crate::neural::checkpoint_encoder;
use crate::vecindex::{pad_cyclic, IndexModel, ProbeConfig};

/// Sparse gradient over encoder rows, keyed by metadata id.
pub type EncoderGrad = BTreeMap<u32, Vec<f64>>;

pub(crate) fn accumulate_row(grad: &mut EncoderGrad, id: u32, g: &[f64]) {
    let row = grad.entry(id).or_insert_with(|| vec![0.0; g.len()]);
    for (a, b) in row.iter_mut().zip(g) {
        *a += b;
    }
}

/// Learnable table with one dense row per metadata id.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataEncoder {
    width: usize,
    table: Vec<f32>,
}

impl MetadataEncoder {
    /// Rows drawn uniformly from `[-sqrt(3 / width), sqrt(3 / width)]`, so rows have roughly unit norm.
    pub fn new(vocab: usize, width: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(AirdError::config("metadata embedding width must be positive"));
        }
        let mut rng = crate::seeded_rng(seed);
        let bound = (3.0 / width as f64).sqrt() as f32;
        let table = (0..vocab * width)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self { width, table })
    }

    pub fn from_table(width: usize, table: Vec<f32>) -> Result<Self> {
        if width == 0 || table.len() % width != 0 {
            return Err(AirdError::ShapeMismatch(format!(
                "encoder table of {} values is not a whole number of width-{width} rows",
                table.len()
            )));
        }
        Ok(Self { width, table })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab(&self) -> usize {
        self.table.len() / self.width
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn encode(&self, id: u32) -> Result<&[f32]> {
        let i = id as usize;
        if i >= self.vocab() {
            return Err(AirdError::UnknownMetadata(id));
        }
        Ok(&self.table[i * self.width..(i + 1) * self.width])
    }

    pub fn row_mut(&mut self, id: u32) -> Result<&mut [f32]> {
        let i = id as usize;
        if i >= self.vocab() {
            return Err(AirdError::UnknownMetadata(id));
        }
        Ok(&mut self.table[i * self.width..(i + 1) * self.width])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub package_id: u64,
    pub image: Vec<f32>,
    pub metadata_id: u32,
    pub similarity: f64,
}

/// `K` fake candidates: similar images carrying other metadata, by descending similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub query_metadata_id: u32,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_hits(idx: &IndexModel, query_metadata_id: u32, hits: &[crate::vecindex::Hit]) -> Self {
        Self {
            query_metadata_id,
            entries: hits
                .iter()
                .map(|h| Candidate {
                    package_id: h.package_id,
                    image: idx.vector(h.package_id).expect("hit from this index").to_vec(),
                    metadata_id: h.metadata_id,
                    similarity: h.similarity,
                })
                .collect(),
        }
    }
}

/// Queries `idx` for the `k` most similar packages whose metadata differs from the package's.
///
/// When fewer than `k` such packages exist the list is cycled to length `k`.
pub fn fetch_fake_candidates(idx: &IndexModel, pkg: &Package, k: usize, probe: &ProbeConfig) -> Result<CandidateSet> {
    let p = probe.params(k);
    let hits = idx.search_excluding_metadata(&pkg.image_embedding, k, pkg.metadata_id, p.nprobe, p.shortlist)?;
    let hits = pad_cyclic(hits, k);
    Ok(CandidateSet::from_hits(idx, pkg.metadata_id, &hits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDistribution {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub tau: f64,
}

impl ChoiceDistribution {
    /// Index of the largest weight; ties go to the earlier candidate.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = k;
            }
        }
        best
    }
}

/// Output of the generator for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Fabrication {
    pub metadata: Vec<f64>,
    pub choice: ChoiceDistribution,
    /// Metadata id of the most heavily weighted candidate.
    pub chosen_metadata_id: u32,
}

pub struct FabricationTape {
    query_id: u32,
    candidate_ids: Vec<u32>,
    candidate_meta: Vec<Vec<f64>>,
    cssn_tapes: Vec<Tape>,
    weights: Vec<f64>,
    tau: f64,
}

/// Candidacy-scorer widths; the scorer ends in a scalar linear unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MgConfig {
    pub hidden: Vec<usize>,
}

impl Default for MgConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 64] }
    }
}

/// The metadata generator's candidacy scorer: `s_k = CSSN([i, m, i_k, m_k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MGModel {
    pub cssn: DenseNet,
    image_dim: usize,
    meta_dim: usize,
}

fn widen(v: &[f32]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|&x| x as f64)
}

impl MGModel {
    pub fn new(image_dim: usize, meta_dim: usize, config: &MgConfig, seed: u64) -> Result<Self> {
        let mut sizes = vec![2 * (image_dim + meta_dim)];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let mut acts = vec![Activation::Relu; config.hidden.len()];
        acts.push(Activation::Linear);
        let mut rng = crate::seeded_rng(seed);
        Ok(Self {
            cssn: DenseNet::new(&sizes, &acts, &mut rng)?,
            image_dim,
            meta_dim,
        })
    }

    pub fn from_net(cssn: DenseNet, image_dim: usize, meta_dim: usize) -> Result<Self> {
        check_dim(2 * (image_dim + meta_dim), cssn.input_dim())?;
        check_dim(1, cssn.output_dim())?;
        Ok(Self {
            cssn,
            image_dim,
            meta_dim,
        })
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn meta_dim(&self) -> usize {
        self.meta_dim
    }

    fn cssn_input(&self, qi: &[f32], qm: &[f64], ci: &[f32], cm: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.image_dim, qi.len())?;
        check_dim(self.meta_dim, qm.len())?;
        check_dim(self.image_dim, ci.len())?;
        check_dim(self.meta_dim, cm.len())?;
        let mut x = Vec::with_capacity(self.cssn.input_dim());
        x.extend(widen(qi));
        x.extend_from_slice(qm);
        x.extend(widen(ci));
        x.extend_from_slice(cm);
        Ok(x)
    }

    /// Candidacy score of one candidate against the query package.
    pub fn cssn_score(&self, query_image: &[f32], query_meta: &[f32], cand_image: &[f32], cand_meta: &[f32]) -> Result<f64> {
        let qm: Vec<f64> = widen(query_meta).collect();
        let cm: Vec<f64> = widen(cand_meta).collect();
        let x = self.cssn_input(query_image, &qm, cand_image, &cm)?;
        Ok(self.cssn.predict(&x)?[0])
    }

    /// `m~ = sum_k c_k m_k` with `c = softmax(s / tau)`.
    pub fn fabricate(
        &self,
        enc: &MetadataEncoder,
        candidates: &CandidateSet,
        query_image: &[f32],
        tau: f64,
    ) -> Result<Fabrication> {
        Ok(self.fabricate_with_tape(enc, candidates, query_image, tau)?.0)
    }

    pub fn fabricate_with_tape(
        &self,
        enc: &MetadataEncoder,
        candidates: &CandidateSet,
        query_image: &[f32],
        tau: f64,
    ) -> Result<(Fabrication, FabricationTape)> {
        if candidates.is_empty() {
            return Err(AirdError::config("fabrication needs at least one candidate"));
        }
        check_dim(self.meta_dim, enc.width())?;
        let qm: Vec<f64> = widen(enc.encode(candidates.query_metadata_id)?).collect();
        let mut scores = Vec::with_capacity(candidates.len());
        let mut tapes = Vec::with_capacity(candidates.len());
        let mut metas = Vec::with_capacity(candidates.len());
        for c in &candidates.entries {
            let cm: Vec<f64> = widen(enc.encode(c.metadata_id)?).collect();
            let x = self.cssn_input(query_image, &qm, &c.image, &cm)?;
            let (y, tape) = self.cssn.forward(&x)?;
            scores.push(y[0]);
            tapes.push(tape);
            metas.push(cm);
        }
        let weights = softmax_temperature(&scores, tau)?;
        let mut metadata = vec![0f64; self.meta_dim];
        for (w, m) in weights.iter().zip(&metas) {
            for (acc, &x) in metadata.iter_mut().zip(m) {
                *acc += w * x;
            }
        }
        let choice = ChoiceDistribution {
            scores,
            weights: weights.clone(),
            tau,
        };
        let chosen_metadata_id = candidates.entries[choice.argmax()].metadata_id;
        let tape = FabricationTape {
            query_id: candidates.query_metadata_id,
            candidate_ids: candidates.entries.iter().map(|c| c.metadata_id).collect(),
            candidate_meta: metas,
            cssn_tapes: tapes,
            weights,
            tau,
        };
        Ok((
            Fabrication {
                metadata,
                choice,
                chosen_metadata_id,
            },
            tape,
        ))
    }

    /// Back-propagates `d loss / d m~` into the scorer (accumulated into `grad`)
    /// and into encoder rows of the query and candidate metadata.
    pub fn backward_into(
        &self,
        tape: &FabricationTape,
        grad_metadata: &[f64],
        grad: &mut NetGrad,
        enc_grad: &mut EncoderGrad,
    ) -> Result<()> {
        check_dim(self.meta_dim, grad_metadata.len())?;
        let grad_c: Vec<f64> = tape
            .candidate_meta
            .iter()
            .map(|m| m.iter().zip(grad_metadata).map(|(a, b)| a * b).sum())
            .collect();
        let grad_s = softmax_temperature_backward(&tape.weights, &grad_c, tape.tau);
        let di = self.image_dim;
        let dm = self.meta_dim;
        for (k, cssn_tape) in tape.cssn_tapes.iter().enumerate() {
            let direct: Vec<f64> = grad_metadata.iter().map(|g| g * tape.weights[k]).collect();
            accumulate_row(enc_grad, tape.candidate_ids[k], &direct);
            let dx = self.cssn.backward_into(cssn_tape, &[grad_s[k]], grad)?;
            accumulate_row(enc_grad, tape.query_id, &dx[di..di + dm]);
            accumulate_row(enc_grad, tape.candidate_ids[k], &dx[2 * di + dm..]);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, enc: &MetadataEncoder) -> Checkpoint {
        Checkpoint {
            tag: SectionTag::Mg,
            layers: self.cssn.layers().to_vec(),
            encoder: Some(checkpoint_encoder(enc)),
            optimizers: Vec::new(),
        }
    }

    /// Rebuilds the scorer and encoder; dimensions are read back from the shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, MetadataEncoder)> {
        if ck.tag != SectionTag::Mg {
            return Err(AirdError::format("not an MG checkpoint"));
        }
        let table = ck
            .encoder
            .as_ref()
            .ok_or_else(|| AirdError::format("MG checkpoint lacks an encoder table"))?;
        let enc = MetadataEncoder::from_table(table.width, table.rows.clone())?;
        let cssn = DenseNet::from_layers(ck.layers.clone())?;
        let input = cssn.input_dim();
        if input % 2 != 0 || input / 2 <= enc.width() {
            return Err(AirdError::format("CSSN input width inconsistent with encoder"));
        }
        let image_dim = input / 2 - enc.width();
        Ok((Self::from_net(cssn, image_dim, enc.width())?, enc))
    }
}

/// `loss = sum_j w_j m~_j` as a function of the scorer parameters and the
/// whole encoder table, for gradient checks of the softmax-then-sum path.
pub struct FabricationObjective<'a> {
    pub mg: MGModel,
    pub encoder: MetadataEncoder,
    pub candidates: &'a CandidateSet,
    pub query_image: &'a [f32],
    pub tau: f64,
    pub loss_weights: Vec<f64>,
}

impl GradientCheckable for FabricationObjective<'_> {
    fn num_params(&self) -> usize {
        self.mg.cssn.param_count() + self.encoder.table.len()
    }

    fn param(&self, i: usize) -> f32 {
        let p = self.mg.cssn.param_count();
        if i < p {
            self.mg.cssn.param(i)
        } else {
            self.encoder.table[i - p]
        }
    }

    fn set_param(&mut self, i: usize, v: f32) {
        let p = self.mg.cssn.param_count();
        if i < p {
            self.mg.cssn.set_param(i, v);
        } else {
            self.encoder.table[i - p] = v;
        }
    }

    fn probe(&self) -> Result<Probe> {
        let (fab, tape) = self
            .mg
            .fabricate_with_tape(&self.encoder, self.candidates, self.query_image, self.tau)?;
        let loss = fab.metadata.iter().zip(&self.loss_weights).map(|(a, b)| a * b).sum();
        let relu_preacts = tape
            .cssn_tapes
            .iter()
            .flat_map(|t| t.relu_preacts(&self.mg.cssn).collect::<Vec<_>>())
            .collect();
        Ok(Probe { loss, relu_preacts })
    }

    fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let (_, tape) = self
            .mg
            .fabricate_with_tape(&self.encoder, self.candidates, self.query_image, self.tau)?;
        let mut grad = NetGrad::zeros_like(&self.mg.cssn);
        let mut enc_grad = EncoderGrad::new();
        self.mg.backward_into(&tape, &self.loss_weights, &mut grad, &mut enc_grad)?;
        let mut out = grad.flatten();
        let w = self.encoder.width;
        let mut table = vec![0.0; self.encoder.table.len()];
        for (id, g) in enc_grad {
            table[id as usize * w..(id as usize + 1) * w].copy_from_slice(&g);
        }
        out.extend(table);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{check_gradients_of, Layer};

    fn candidates(ids: &[u32], images: &[&[f32]]) -> CandidateSet {
        CandidateSet {
            query_metadata_id: 0,
            entries: ids
                .iter()
                .zip(images)
                .enumerate()
                .map(|(k, (&id, img))| Candidate {
                    package_id: k as u64 + 10,
                    image: img.to_vec(),
                    metadata_id: id,
                    similarity: 1.0 - k as f64 * 0.1,
                })
                .collect(),
        }
    }

    fn zero_mg(di: usize, dm: usize) -> MGModel {
        let net = DenseNet::zeros(
            &[2 * (di + dm), 3, 1],
            &[Activation::Relu, Activation::Linear],
        )
        .unwrap();
        MGModel::from_net(net, di, dm).unwrap()
    }

    #[test]
    fn encoder_lookup() {
        let enc = MetadataEncoder::new(4, 3, 9).unwrap();
        let again = MetadataEncoder::new(4, 3, 9).unwrap();
        assert_eq!(enc.encode(2).unwrap(), again.encode(2).unwrap());
        assert_eq!(enc.encode(2).unwrap(), &enc.table()[6..9]);
        assert!(matches!(enc.encode(4), Err(AirdError::UnknownMetadata(4))));
    }

    #[test]
    fn zero_scorer_scores_zero() {
        let mg = zero_mg(2, 2);
        let s = mg.cssn_score(&[1.0, 0.0], &[0.3, 0.1], &[0.0, 1.0], &[-1.0, 2.0]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn hand_set_one_unit_scorer() {
        // One relu unit over [i(1), m(1), i_k(1), m_k(1)] with weights [1, -1, 2, 0.5], bias 0.1,
        // then a linear output 3h - 1.
        let net = DenseNet::from_layers(vec![
            Layer {
                inputs: 4,
                outputs: 1,
                weights: vec![1.0, -1.0, 2.0, 0.5],
                bias: vec![0.1],
                activation: Activation::Relu,
            },
            Layer {
                inputs: 1,
                outputs: 1,
                weights: vec![3.0],
                bias: vec![-1.0],
                activation: Activation::Linear,
            },
        ])
        .unwrap();
        let mg = MGModel::from_net(net, 1, 1).unwrap();
        // h = relu(0.5 - 0.25 + 2*0.75 + 0.5*(-1) + 0.1) = relu(1.35); s = 3 * 1.35 - 1 = 3.05
        let s = mg.cssn_score(&[0.5], &[0.25], &[0.75], &[-1.0]).unwrap();
        assert!((s - 3.05).abs() < 1e-6, "{s}");
    }

    #[test]
    fn candidate_swap_swaps_scores() {
        let mg = MGModel::new(2, 2, &MgConfig { hidden: vec![5, 4] }, 3).unwrap();
        let enc = MetadataEncoder::new(4, 2, 1).unwrap();
        let a = candidates(&[1, 2, 3], &[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let b = candidates(&[2, 1, 3], &[&[0.0, 1.0], &[1.0, 0.0], &[0.6, 0.8]]);
        let fa = mg.fabricate(&enc, &a, &[0.8, 0.6], 0.5).unwrap();
        let fb = mg.fabricate(&enc, &b, &[0.8, 0.6], 0.5).unwrap();
        assert_eq!(fa.choice.scores[0], fb.choice.scores[1]);
        assert_eq!(fa.choice.scores[1], fb.choice.scores[0]);
        assert_eq!(fa.choice.scores[2], fb.choice.scores[2]);
    }

    #[test]
    fn shared_embedding_is_reproduced() {
        let mg = MGModel::new(2, 2, &MgConfig { hidden: vec![4, 4] }, 8).unwrap();
        let enc = MetadataEncoder::from_table(2, vec![0.0, 0.0, 0.25, -0.5]).unwrap();
        let c = candidates(&[1, 1, 1], &[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
        let f = mg.fabricate(&enc, &c, &[1.0, 0.0], 0.7).unwrap();
        assert_eq!(f.metadata, vec![0.25, -0.5]);
    }

    #[test]
    fn midpoint_from_equal_scores() {
        let mg = zero_mg(2, 2);
        let enc = MetadataEncoder::from_table(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = candidates(&[1, 2], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = mg.fabricate(&enc, &c, &[1.0, 0.0], 0.1).unwrap();
        assert_eq!(f.choice.weights, vec![0.5, 0.5]);
        assert_eq!(f.metadata, vec![0.5, 0.5]);
    }

    #[test]
    fn one_hot_choice_copies_candidate() {
        // Score depends only on the candidate image's first coordinate, gap >= 1.
        let net = DenseNet::from_layers(vec![Layer {
            inputs: 8,
            outputs: 1,
            weights: vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
            bias: vec![0.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let mg = MGModel::from_net(net, 2, 2).unwrap();
        let enc = MetadataEncoder::new(4, 2, 5).unwrap();
        let c = candidates(&[1, 2, 3], &[&[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5]]);
        let f = mg.fabricate(&enc, &c, &[1.0, 0.0], 0.01).unwrap();
        assert_eq!(f.choice.argmax(), 1);
        assert_eq!(f.chosen_metadata_id, 2);
        let want = enc.encode(2).unwrap();
        for (a, &b) in f.metadata.iter().zip(want) {
            assert!((a - b as f64).abs() <= 1e-4);
        }
    }

    #[test]
    fn fabrication_gradients() {
        for seed in 0..5 {
            let mg = MGModel::new(3, 2, &MgConfig { hidden: vec![6, 4] }, seed).unwrap();
            let enc = MetadataEncoder::new(5, 2, seed + 100).unwrap();
            let c = candidates(
                &[1, 2, 3],
                &[&[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8], &[0.6, 0.0, 0.8]],
            );
            let q = [0.8f32, 0.6, 0.0];
            let mut obj = FabricationObjective {
                mg,
                encoder: enc,
                candidates: &c,
                query_image: &q,
                tau: 0.5,
                loss_weights: vec![1.0, -0.7],
            };
            let r = check_gradients_of(&mut obj, 1e-3).unwrap();
            assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mg = MGModel::new(4, 2, &MgConfig { hidden: vec![3, 3] }, 1).unwrap();
        let enc = MetadataEncoder::new(3, 2, 2).unwrap();
        let ck = Checkpoint::from_bytes(&mg.to_checkpoint(&enc).to_bytes().unwrap()).unwrap();
        let (mg2, enc2) = MGModel::from_checkpoint(&ck).unwrap();
        assert_eq!(mg2, mg);
        assert_eq!(enc2, enc);
    }
}
