//! Denoising auto-encoder fine-tuning.
//!
//! Words are deleted from each sentence, the encoder pools the damaged
//! sentence into one vector, and a single-layer decoder must reproduce the
//! original tokens while attending only to that vector (a length-1 memory).
//! The decoder's output projection is the encoder's token embedding table.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::encoder::layers::{add_attention, add_ffn, add_layer_norm, attention, attention_mask, ffn, layer_norm, normal_tensor, AttnShape};
use crate::encoder::{check_layout, EncoderConfig, EncoderModel, IdBatch};
use crate::error::{Error, Result};
use crate::simcse::CLIP_NORM;
use crate::tensor::{clip_global_norm, load_checkpoint, save_checkpoint, Adam, AdamConfig, Checkpoint, Graph, ParamStore, ParamVars, Real, Tensor, Var};
use crate::train::{BatchSampler, LossTrace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub deletion_ratio: f64,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.deletion_ratio) {
            return Err(Error::Config(format!("deletion_ratio {} not in [0, 1)", self.deletion_ratio)));
        }
        Ok(())
    }
}

/// An original token sequence and its word-deleted version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedPair {
    pub original: Vec<usize>,
    pub corrupted: Vec<usize>,
}

fn is_boundary(id: usize) -> bool {
    matches!(id, BOS | EOS | PAD)
}

/// Number of words removed from a sentence of `words` words.
pub fn deletion_count(words: usize, ratio: f64) -> usize {
    ((ratio * words as f64).round() as usize).min(words.saturating_sub(1))
}

/// Deletes `round(ratio · w)` of the `w` words of `ids` (keeping at least one),
/// sampled uniformly without replacement. `BOS`/`EOS` are never deleted and
/// survivors keep their order. Unknown-word ids count as words.
pub fn corrupt_with<R: Rng>(ids: &[usize], ratio: f64, rng: &mut R) -> Result<CorruptedPair> {
    let words: Vec<usize> = (0..ids.len()).filter(|&i| !is_boundary(ids[i])).collect();
    if words.is_empty() {
        return Err(Error::Input("cannot corrupt a sequence without word tokens".into()));
    }
    let n_delete = deletion_count(words.len(), ratio);
    let mut deleted = vec![false; ids.len()];
    for k in sample(rng, words.len(), n_delete) {
        deleted[words[k]] = true;
    }
    let corrupted = ids
        .iter()
        .zip(&deleted)
        .filter(|(_, &d)| !d)
        .map(|(&id, _)| id)
        .collect();
    Ok(CorruptedPair {
        original: ids.to_vec(),
        corrupted,
    })
}

pub fn corrupt(ids: &[usize], config: &CorruptionConfig) -> Result<CorruptedPair> {
    config.validate()?;
    corrupt_with(ids, config.deletion_ratio, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

/// Single-layer transformer decoder with self-attention, cross-attention over
/// one memory vector and an output projection tied to the encoder's
/// `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel<T: Real = f32> {
    config: EncoderConfig,
    params: ParamStore<T>,
}

/// Name of the encoder parameter shared as the decoder output projection.
pub const TIED_EMBEDDING: &str = "tok_emb";

impl<T: Real> DecoderModel<T> {
    /// Sized to match `encoder` (vocabulary, width, heads, window).
    pub fn new(encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = encoder.d_model;
        let mut p = ParamStore::new();
        p.insert("pos_emb", normal_tensor(&[encoder.max_seq_len, d], 0.02, &mut rng))?;
        add_layer_norm(&mut p, "ln1", d)?;
        add_attention(&mut p, "self_attn", d, &mut rng)?;
        add_layer_norm(&mut p, "ln2", d)?;
        add_attention(&mut p, "cross_attn", d, &mut rng)?;
        add_layer_norm(&mut p, "ln3", d)?;
        add_ffn(&mut p, "ffn", d, encoder.d_ffn, &mut rng)?;
        add_layer_norm(&mut p, "ln_f", d)?;
        Ok(DecoderModel {
            config: *encoder,
            params: p,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> DecoderModel<U> {
        DecoderModel {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn check_encoder(&self, encoder: &EncoderModel<T>) -> Result<()> {
        let e = encoder.config();
        let c = &self.config;
        if (e.vocab_size, e.d_model, e.max_seq_len) != (c.vocab_size, c.d_model, c.max_seq_len) {
            return Err(Error::Config("decoder does not match the encoder's vocabulary, width or window".into()));
        }
        Ok(())
    }

    /// Next-token logits `[B·T, V]` for decoder `inputs` given `memory [B, d]`.
    pub fn logits_graph(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        tok_emb: Var,
        memory: Var,
        inputs: &IdBatch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        if inputs.seq > c.max_seq_len {
            return Err(Error::Input(format!("decoder input length {} exceeds {}", inputs.seq, c.max_seq_len)));
        }
        let rate = c.dropout_rate;
        let mut drop = |g: &mut Graph<T>, x: Var| match dropout.as_deref_mut() {
            Some(rng) => g.dropout(x, rate, rng),
            None => x,
        };
        let tok = g.embedding(tok_emb, &inputs.ids)?;
        let positions: Vec<usize> = (0..inputs.batch).flat_map(|_| 0..inputs.seq).collect();
        let pos = g.embedding(p.get("pos_emb")?, &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = drop(g, x);

        let self_shape = AttnShape {
            batch: inputs.batch,
            queries: inputs.seq,
            keys: inputs.seq,
            heads: c.n_heads,
            d_model: c.d_model,
        };
        let mask = attention_mask::<T>(&self_shape, Some(&inputs.mask), true);
        let h = layer_norm(g, p, "ln1", x)?;
        let a = attention(g, p, "self_attn", h, h, &self_shape, mask.as_ref())?;
        let a = drop(g, a);
        x = g.add(x, a)?;

        let cross_shape = AttnShape { keys: 1, ..self_shape };
        let h = layer_norm(g, p, "ln2", x)?;
        let a = attention(g, p, "cross_attn", h, memory, &cross_shape, None)?;
        let a = drop(g, a);
        x = g.add(x, a)?;

        let h = layer_norm(g, p, "ln3", x)?;
        let f = ffn(g, p, "ffn", h)?;
        let f = drop(g, f);
        x = g.add(x, f)?;
        let x = layer_norm(g, p, "ln_f", x)?;
        g.matmul(x, tok_emb, true)
    }
}

impl DecoderModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = self.config.to_map("");
        config.insert("model".into(), "decoder".into());
        config.insert("tied_embedding".into(), format!("encoder.{TIED_EMBEDDING}"));
        Checkpoint {
            config,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("model").map(String::as_str) != Some("decoder") {
            return Err(Error::Config("checkpoint does not hold a decoder".into()));
        }
        let config = EncoderConfig::from_map(&ck.config, "")?;
        let reference = Self::new(&config, 0)?;
        check_layout(&reference.params, &ck.params)?;
        Ok(DecoderModel {
            config,
            params: ck.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// Teacher-forcing batch: encoder sees `corrupted`, decoder reads
/// `original[..L-1]` and predicts `original[1..]`.
struct ReconstructionBatch<T> {
    encoder_in: IdBatch,
    decoder_in: IdBatch,
    targets: Vec<usize>,
    weights: Vec<T>,
}

fn reconstruction_batch<T: Real>(pairs: &[CorruptedPair]) -> Result<ReconstructionBatch<T>> {
    if pairs.is_empty() {
        return Err(Error::Input("no sentence pairs".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.original.len() < 2) {
        return Err(Error::Input(format!("original sequence {:?} is too short to reconstruct", p.original)));
    }
    let corrupted: Vec<Vec<usize>> = pairs.iter().map(|p| p.corrupted.clone()).collect();
    let inputs: Vec<Vec<usize>> = pairs.iter().map(|p| p.original[..p.original.len() - 1].to_vec()).collect();
    let decoder_in = IdBatch::pad(&inputs)?;
    let seq = decoder_in.seq;
    let mut targets = Vec::with_capacity(pairs.len() * seq);
    let mut weights = Vec::with_capacity(pairs.len() * seq);
    let n = pairs.len() as f64;
    for p in pairs {
        let tgt = &p.original[1..];
        let w = T::of(1.0 / (tgt.len() as f64 * n));
        for t in 0..seq {
            match tgt.get(t) {
                Some(&id) => {
                    targets.push(id);
                    weights.push(w);
                }
                None => {
                    targets.push(PAD);
                    weights.push(T::zero());
                }
            }
        }
    }
    Ok(ReconstructionBatch {
        encoder_in: IdBatch::pad(&corrupted)?,
        decoder_in,
        targets,
        weights,
    })
}

#[derive(Clone, Copy)]
enum Memory {
    Encoded,
    Zeroed,
}

#[allow(clippy::too_many_arguments)]
fn loss_graph<T: Real>(
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
    g: &mut Graph<T>,
    ep: &ParamVars,
    dp: &ParamVars,
    pairs: &[CorruptedPair],
    mut dropout: Option<&mut ChaCha8Rng>,
    memory: Memory,
) -> Result<Var> {
    decoder.check_encoder(encoder)?;
    let vocab = encoder.config().vocab_size;
    if let Some(&bad) = pairs.iter().flat_map(|p| p.original.iter().chain(&p.corrupted)).find(|&&id| id >= vocab) {
        return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {vocab}")));
    }
    let batch = reconstruction_batch::<T>(pairs)?;
    let z = encoder.embed_graph(g, ep, &batch.encoder_in, dropout.as_deref_mut())?;
    let z = match memory {
        Memory::Encoded => z,
        Memory::Zeroed => g.constant(Tensor::zeros(g.shape(z))),
    };
    let tok_emb = ep.get(TIED_EMBEDDING)?;
    let logits = decoder.logits_graph(g, dp, tok_emb, z, &batch.decoder_in, dropout)?;
    g.cross_entropy(logits, &batch.targets, Some(&batch.weights))
}

fn eval_loss<T: Real>(encoder: &EncoderModel<T>, decoder: &DecoderModel<T>, pairs: &[CorruptedPair], memory: Memory) -> Result<T> {
    let mut g = Graph::new();
    let ep = encoder.params().register(&mut g, false);
    let dp = decoder.params().register(&mut g, false);
    let loss = loss_graph(encoder, decoder, &mut g, &ep, &dp, pairs, None, memory)?;
    g.value(loss).item()
}

/// Mean token cross-entropy of reconstructing `pair.original` from the
/// embedding of `pair.corrupted` (dropout off).
pub fn reconstruction_loss<T: Real>(encoder: &EncoderModel<T>, decoder: &DecoderModel<T>, pair: &CorruptedPair) -> Result<T> {
    eval_loss(encoder, decoder, std::slice::from_ref(pair), Memory::Encoded)
}

/// Mean of the per-sentence reconstruction losses.
pub fn reconstruction_loss_batch<T: Real>(encoder: &EncoderModel<T>, decoder: &DecoderModel<T>, pairs: &[CorruptedPair]) -> Result<T> {
    eval_loss(encoder, decoder, pairs, Memory::Encoded)
}

/// Same as [`reconstruction_loss_batch`] with the decoder's memory vector
/// replaced by zeros.
pub fn reconstruction_loss_zero_memory<T: Real>(
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
    pairs: &[CorruptedPair],
) -> Result<T> {
    eval_loss(encoder, decoder, pairs, Memory::Zeroed)
}

/// Mean per-position `−log p(target)` for explicit probability rows.
pub fn sequence_cross_entropy(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Input("need one probability row per target".into()));
    }
    let mut total = 0.0;
    for (row, &t) in probs.iter().zip(targets) {
        let p = *row
            .get(t)
            .ok_or_else(|| Error::Input(format!("target {t} out of range for {} classes", row.len())))?;
        total -= p.ln();
    }
    Ok(total / targets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdaeConfig {
    pub deletion_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TsdaeConfig {
    fn default() -> Self {
        TsdaeConfig {
            deletion_ratio: 0.6,
            batch_size: 32,
            steps: 300,
            lr: 1e-3,
            seed: 42,
        }
    }
}

impl TsdaeConfig {
    pub fn validate(&self) -> Result<()> {
        CorruptionConfig {
            deletion_ratio: self.deletion_ratio,
            seed: self.seed,
        }
        .validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Jointly trains copies of `encoder` and `decoder`. Each visit of a
/// sentence draws a fresh corruption.
pub fn train_tsdae(
    encoder: &EncoderModel<f32>,
    decoder: &DecoderModel<f32>,
    corpus: &[Vec<usize>],
    config: &TsdaeConfig,
) -> Result<(EncoderModel<f32>, DecoderModel<f32>, LossTrace)> {
    config.validate()?;
    decoder.check_encoder(encoder)?;
    if corpus.is_empty() {
        return Err(Error::Usage("cannot train on an empty corpus".into()));
    }
    if corpus.len() < config.batch_size {
        return Err(Error::Usage(format!(
            "corpus has {} sentences, fewer than batch_size {}",
            corpus.len(),
            config.batch_size
        )));
    }
    let mut encoder = encoder.clone();
    let mut decoder = decoder.clone();
    let mut enc_opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut dec_opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = BatchSampler::new(corpus.len());
    let mut trace = LossTrace::default();
    for step in 0..config.steps {
        let idx = sampler.next(config.batch_size, &mut rng).to_vec();
        let pairs = idx
            .iter()
            .map(|&i| corrupt_with(&corpus[i], config.deletion_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let ep = encoder.params().register(&mut g, true);
        let dp = decoder.params().register(&mut g, true);
        let loss = loss_graph(&encoder, &decoder, &mut g, &ep, &dp, &pairs, Some(&mut rng), Memory::Encoded)?;
        trace.push(step, g.value(loss).item()? as f64);
        let grads = g.backward(loss)?;
        let mut all = encoder.params().collect_grads(&ep, &grads);
        let n_enc = all.len();
        all.extend(decoder.params().collect_grads(&dp, &grads));
        clip_global_norm(&mut all, CLIP_NORM);
        let dec_grads = all.split_off(n_enc);
        enc_opt.step(encoder.params_mut(), &all)?;
        dec_opt.step(decoder.params_mut(), &dec_grads)?;
    }
    Ok((encoder, decoder, trace))
}

/// Greedy autoregressive decoding of `target_len` tokens from the embedding
/// of `corrupted`.
pub fn greedy_decode<T: Real>(
    encoder: &EncoderModel<T>,
    decoder: &DecoderModel<T>,
    corrupted: &[usize],
    target_len: usize,
) -> Result<Vec<usize>> {
    decoder.check_encoder(encoder)?;
    let mut g = Graph::new();
    let ep = encoder.params().register(&mut g, false);
    let z = encoder.embed_graph(&mut g, &ep, &IdBatch::pad(&[corrupted.to_vec()])?, None)?;
    let memory = g.value(z).clone();
    let tok_emb = encoder.params().get(TIED_EMBEDDING).expect("encoder has tok_emb").clone();
    let vocab = encoder.config().vocab_size;
    let max_len = target_len.min(decoder.config.max_seq_len);
    let mut prefix = vec![BOS];
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let mut g = Graph::new();
        let dp = decoder.params().register(&mut g, false);
        let te = g.constant(tok_emb.clone());
        let mem = g.constant(memory.clone());
        let logits = decoder.logits_graph(&mut g, &dp, te, mem, &IdBatch::pad(&[prefix.clone()])?, None)?;
        let data = g.value(logits).data();
        let last = &data[(prefix.len() - 1) * vocab..prefix.len() * vocab];
        let next = last
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}

/// Fraction of target positions (`original[1..]`) that greedy decoding gets right.
pub fn reconstruction_accuracy<T: Real>(encoder: &EncoderModel<T>, decoder: &DecoderModel<T>, pairs: &[CorruptedPair]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pairs {
        let target = &p.original[1..];
        let decoded = greedy_decode(encoder, decoder, &p.corrupted, target.len())?;
        hit += decoded.iter().zip(target).filter(|(a, b)| a == b).count();
        total += target.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}
