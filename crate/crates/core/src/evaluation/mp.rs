//! Metadata predictor: classify the image, then compare with the claim.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{Dataset, Package};
use crate::error::{AirdError, Result};
use crate::neural::{softmax_temperature, Activation, Adam, AdamConfig, Checkpoint, DenseNet, NetGrad, SectionTag};

#[derive(Debug, Clone, PartialEq)]
pub struct MpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Three fully connected layers from the image embedding to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MPModel {
    pub net: DenseNet,
}

impl MPModel {
    pub fn vocab(&self) -> usize {
        self.net.output_dim()
    }

    /// Softmax over metadata ids for `image`.
    pub fn predict(&self, image: &[f32]) -> Result<Vec<f64>> {
        let x: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        softmax_temperature(&self.net.predict(&x)?, 1.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: SectionTag::Mp,
            layers: self.net.layers().to_vec(),
            encoder: None,
            optimizers: Vec::new(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != SectionTag::Mp {
            return Err(AirdError::format("not an MP checkpoint"));
        }
        Ok(Self {
            net: DenseNet::from_layers(ck.layers.clone())?,
        })
    }
}

/// Probability mass on the claimed id, and whether the claim is the argmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpScore {
    pub score: f64,
    pub matches: bool,
}

pub fn mp_score(mp: &MPModel, pkg: &Package) -> Result<MpScore> {
    let probs = mp.predict(&pkg.image_embedding)?;
    let claim = pkg.metadata_id as usize;
    if claim >= probs.len() {
        return Ok(MpScore {
            score: 0.0,
            matches: false,
        });
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(MpScore {
        score: probs[claim],
        matches: best == claim,
    })
}

/// Cross-entropy training of the predictor on `train`.
pub fn train_mp(train: &Dataset, config: &MpConfig) -> Result<MPModel> {
    if train.is_empty() {
        return Err(AirdError::EmptyDataset);
    }
    if config.batch_size == 0 || config.hidden == 0 || !(config.lr > 0.0) {
        return Err(AirdError::config("MP needs positive batch size, width and learning rate"));
    }
    let mut rng = crate::seeded_rng(config.seed);
    let vocab = train.vocabulary().len();
    let h = config.hidden;
    let mut net = DenseNet::new(
        &[train.dim(), h, h, vocab],
        &[Activation::Relu, Activation::Relu, Activation::Linear],
        &mut rng,
    )?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &net.tensor_sizes());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let grads = batch
                .par_iter()
                .map(|&i| {
                    let p = &train.packages()[i];
                    let x: Vec<f64> = p.image_embedding.iter().map(|&v| v as f64).collect();
                    let (logits, tape) = net.forward(&x)?;
                    let mut g = softmax_temperature(&logits, 1.0)?;
                    g[p.metadata_id as usize] -= 1.0;
                    Ok(net.backward(&tape, &g)?.0)
                })
                .collect::<Result<Vec<NetGrad>>>()?;
            let mut total = NetGrad::zeros_like(&net);
            for g in &grads {
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            let tensors = total.tensors();
            adam.step(&mut net.tensors_mut(), &tensors)?;
        }
    }
    Ok(MPModel { net })
}
