//! Unsupervised contrastive fine-tuning with dropout-generated positive pairs.
//!
//! Each sentence is encoded twice with independent dropout masks. The two
//! views of the same sentence form the positive pair; the second views of the
//! other sentences in the batch act as negatives. The objective is InfoNCE
//! over cosine similarities scaled by `1/τ`, averaged over the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, IdBatch};
use crate::error::{Error, Result};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, Graph, ParamVars, Real, Tensor, Var};
use crate::train::{BatchSampler, LossTrace};

/// Global gradient-norm bound applied before every optimizer step.
pub const CLIP_NORM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimcseConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SimcseConfig {
    fn default() -> Self {
        SimcseConfig {
            temperature: 0.05,
            batch_size: 32,
            steps: 300,
            lr: 1e-3,
            seed: 42,
        }
    }
}

impl SimcseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 to provide negatives".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Two dropout views of the same sentences, rows aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T: Real = f32> {
    pub z1: Tensor<T>,
    pub z2: Tensor<T>,
}

fn require_dropout<T: Real>(model: &EncoderModel<T>) -> Result<()> {
    if model.config().dropout_rate <= 0.0 {
        return Err(Error::Config(
            "contrastive views need dropout_rate > 0; with no dropout both views are identical".into(),
        ));
    }
    Ok(())
}

/// Encodes `batch` twice on `g`, drawing both dropout masks from `rng`.
pub fn views_graph<T: Real>(
    model: &EncoderModel<T>,
    g: &mut Graph<T>,
    p: &ParamVars,
    batch: &IdBatch,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    require_dropout(model)?;
    let z1 = model.embed_graph(g, p, batch, Some(rng))?;
    let z2 = model.embed_graph(g, p, batch, Some(rng))?;
    Ok((z1, z2))
}

pub fn make_views<T: Real>(model: &EncoderModel<T>, sentences: &[Vec<usize>], seed: u64) -> Result<PairBatch<T>> {
    require_dropout(model)?;
    let batch = IdBatch::pad(sentences)?;
    let mut g = Graph::new();
    let p = model.params().register(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z1, z2) = views_graph(model, &mut g, &p, &batch, &mut rng)?;
    Ok(PairBatch {
        z1: g.value(z1).clone(),
        z2: g.value(z2).clone(),
    })
}

/// Mean InfoNCE loss of two aligned view matrices on `g`.
pub fn info_nce_graph<T: Real>(g: &mut Graph<T>, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    if g.shape(z1) != g.shape(z2) {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: g.shape(z1).to_vec(),
            rhs: g.shape(z2).to_vec(),
        });
    }
    let n = g.shape(z1)[0];
    let sim = g.cosine_matrix(z1, z2)?;
    let logits = g.scale(sim, T::of(1.0 / temperature));
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets, None)
}

pub fn info_nce_loss<T: Real>(batch: &PairBatch<T>, temperature: f64) -> Result<T> {
    if batch.z1.rank() != 2 || batch.z1.shape()[0] == 0 {
        return Err(Error::Input("InfoNCE needs a non-empty [n x d] batch".into()));
    }
    let mut g = Graph::new();
    let z1 = g.constant(batch.z1.clone());
    let z2 = g.constant(batch.z2.clone());
    let loss = info_nce_graph(&mut g, z1, z2, temperature)?;
    g.value(loss).item()
}

/// Fine-tunes a copy of `model` on encoded sentences (see
/// [`crate::encoder::encode_ids`]) and returns it with the per-step loss.
pub fn train_simcse(
    model: &EncoderModel<f32>,
    corpus: &[Vec<usize>],
    config: &SimcseConfig,
) -> Result<(EncoderModel<f32>, LossTrace)> {
    config.validate()?;
    require_dropout(model)?;
    if corpus.len() < config.batch_size {
        return Err(Error::Usage(format!(
            "corpus has {} sentences, fewer than batch_size {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let mut model = model.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = BatchSampler::new(corpus.len());
    let mut trace = LossTrace::default();
    for step in 0..config.steps {
        let seqs: Vec<Vec<usize>> = sampler
            .next(config.batch_size, &mut rng)
            .iter()
            .map(|&i| corpus[i].clone())
            .collect();
        let batch = IdBatch::pad(&seqs)?;
        let mut g = Graph::new();
        let p = model.params().register(&mut g, true);
        let (z1, z2) = views_graph(&model, &mut g, &p, &batch, &mut rng)?;
        let loss = info_nce_graph(&mut g, z1, z2, config.temperature)?;
        trace.push(step, g.value(loss).item()? as f64);
        let grads = g.backward(loss)?;
        let mut grads = model.params().collect_grads(&p, &grads);
        clip_global_norm(&mut grads, CLIP_NORM);
        opt.step(model.params_mut(), &grads)?;
    }
    Ok((model, trace))
}
