//! Small pre-norm transformer encoder with mean pooling.

pub(crate) mod layers;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentenceRecord, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::hybrid::EmbeddingStore;
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Graph, ParamStore, ParamVars, Real, Tensor, Var};
use layers::{add_attention, add_ffn, add_layer_norm, attention, attention_mask, ffn, layer_norm, normal_tensor, AttnShape};

/// Sequences embedded per forward pass at inference time.
const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 8192,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            max_seq_len: 64,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub(crate) fn to_map(self, prefix: &str) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| m.insert(format!("{prefix}{k}"), v);
        put("vocab_size", self.vocab_size.to_string());
        put("d_model", self.d_model.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("d_ffn", self.d_ffn.to_string());
        put("max_seq_len", self.max_seq_len.to_string());
        put("dropout_rate", format!("{:?}", self.dropout_rate));
        m
    }

    pub(crate) fn from_map(m: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        fn get<V: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<V> {
            m.get(key)
                .ok_or_else(|| Error::Config(format!("checkpoint config lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint config `{key}` is malformed")))
        }
        let k = |name: &str| format!("{prefix}{name}");
        let c = EncoderConfig {
            vocab_size: get(m, &k("vocab_size"))?,
            d_model: get(m, &k("d_model"))?,
            n_layers: get(m, &k("n_layers"))?,
            n_heads: get(m, &k("n_heads"))?,
            d_ffn: get(m, &k("d_ffn"))?,
            max_seq_len: get(m, &k("max_seq_len"))?,
            dropout_rate: get(m, &k("dropout_rate"))?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Token id matrix padded with [`PAD`], plus the real-token mask.
#[derive(Clone, Debug, PartialEq)]
pub struct IdBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl IdBatch {
    pub fn pad(seqs: &[Vec<usize>]) -> Result<Self> {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("cannot batch an empty sequence".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, seq - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, seq - s.len()));
        }
        Ok(IdBatch {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }
}

/// `BOS`, token ids (`UNK` when unknown), `EOS`, truncated to `max_seq_len`.
pub fn encode_ids(vocab: &Vocabulary, sentence: &str, max_seq_len: usize) -> Vec<usize> {
    vocab.encode_sentence(sentence, max_seq_len)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T: Real = f32> {
    config: EncoderConfig,
    params: ParamStore<T>,
}

impl<T: Real> EncoderModel<T> {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut p = ParamStore::new();
        p.insert("tok_emb", normal_tensor(&[config.vocab_size, d], 0.02, &mut rng))?;
        p.insert("pos_emb", normal_tensor(&[config.max_seq_len, d], 0.02, &mut rng))?;
        for l in 0..config.n_layers {
            add_layer_norm(&mut p, &format!("layer{l}.ln1"), d)?;
            add_attention(&mut p, &format!("layer{l}.attn"), d, &mut rng)?;
            add_layer_norm(&mut p, &format!("layer{l}.ln2"), d)?;
            add_ffn(&mut p, &format!("layer{l}.ffn"), d, config.d_ffn, &mut rng)?;
        }
        add_layer_norm(&mut p, "ln_f", d)?;
        Ok(EncoderModel { config, params: p })
    }

    /// Wraps existing parameters after checking them against a fresh layout.
    pub fn from_params(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        check_layout(&reference.params, &params)?;
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Input("encoder parameters contain non-finite values".into()));
        }
        Ok(EncoderModel { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Token states `[B·S, d]` after the final layer norm.
    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        batch: &IdBatch,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {}", c.vocab_size)));
        }
        if batch.seq > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, c.max_seq_len
            )));
        }
        let rate = c.dropout_rate;
        let mut drop = |g: &mut Graph<T>, x: Var| match dropout.as_deref_mut() {
            Some(rng) => g.dropout(x, rate, rng),
            None => x,
        };
        let tok = g.embedding(p.get("tok_emb")?, &batch.ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = g.embedding(p.get("pos_emb")?, &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = drop(g, x);
        let shape = AttnShape {
            batch: batch.batch,
            queries: batch.seq,
            keys: batch.seq,
            heads: c.n_heads,
            d_model: c.d_model,
        };
        let mask = attention_mask::<T>(&shape, Some(&batch.mask), false);
        for l in 0..c.n_layers {
            let h = layer_norm(g, p, &format!("layer{l}.ln1"), x)?;
            let a = attention(g, p, &format!("layer{l}.attn"), h, h, &shape, mask.as_ref())?;
            let a = drop(g, a);
            x = g.add(x, a)?;
            let h = layer_norm(g, p, &format!("layer{l}.ln2"), x)?;
            let f = ffn(g, p, &format!("layer{l}.ffn"), h)?;
            let f = drop(g, f);
            x = g.add(x, f)?;
        }
        layer_norm(g, p, "ln_f", x)
    }

    /// Masked mean of encoder states: `[B, d]`.
    pub fn pool_graph(&self, g: &mut Graph<T>, states: Var, batch: &IdBatch) -> Result<Var> {
        let s = g.reshape(states, &[batch.batch, batch.seq, self.config.d_model])?;
        g.masked_mean(s, &batch.mask)
    }

    /// Sentence embeddings `[B, d]` on `g` (dropout on when `dropout` is given).
    pub fn embed_graph(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        batch: &IdBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let states = self.encode_graph(g, p, batch, dropout)?;
        self.pool_graph(g, states, batch)
    }

    /// Token states `[B, S, d]`. Dropout masks come from a stream seeded by `seed`.
    pub fn forward(&self, batch: &IdBatch, dropout_active: bool, seed: u64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.register(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = self.encode_graph(&mut g, &p, batch, dropout_active.then_some(&mut rng))?;
        g.value(states)
            .clone()
            .reshape(&[batch.batch, batch.seq, self.config.d_model])
    }

    /// Deterministic pooled embeddings `[n, d]` for already-encoded sequences.
    pub fn embed_ids(&self, seqs: &[Vec<usize>]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(seqs.len() * d);
        for chunk in seqs.chunks(INFERENCE_BATCH) {
            let batch = IdBatch::pad(chunk)?;
            let mut g = Graph::new();
            let p = self.params.register(&mut g, false);
            let pooled = self.embed_graph(&mut g, &p, &batch, None)?;
            out.extend_from_slice(g.value(pooled).data());
        }
        Tensor::new(vec![seqs.len(), d], out)
    }

    /// Splits a text into `max_seq_len` windows, each wrapped in `BOS`/`EOS`.
    pub fn windows(&self, vocab: &Vocabulary, text: &str) -> Vec<Vec<usize>> {
        let content = vocab.encode_content(text);
        let width = self.config.max_seq_len - 2;
        if content.is_empty() {
            return vec![vec![BOS, EOS]];
        }
        content
            .chunks(width)
            .map(|c| std::iter::once(BOS).chain(c.iter().copied()).chain(std::iter::once(EOS)).collect())
            .collect()
    }

    /// One pooled vector per text; long texts average their window vectors.
    pub fn embed_texts(&self, vocab: &Vocabulary, texts: &[&str]) -> Result<Vec<Vec<T>>> {
        let mut windows = Vec::new();
        let mut owner = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            for w in self.windows(vocab, t) {
                windows.push(w);
                owner.push(i);
            }
        }
        let d = self.config.d_model;
        let pooled = if windows.is_empty() {
            Tensor::zeros(&[0, d])
        } else {
            self.embed_ids(&windows)?
        };
        let mut sums = vec![vec![T::zero(); d]; texts.len()];
        let mut counts = vec![0usize; texts.len()];
        for (w, &i) in owner.iter().enumerate() {
            counts[i] += 1;
            for (s, &v) in sums[i].iter_mut().zip(pooled.row(w)) {
                *s = *s + v;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            let c = T::of(c as f64);
            s.iter_mut().for_each(|v| *v = *v / c);
        }
        Ok(sums)
    }
}

impl EncoderModel<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config = self.config.to_map("");
        config.insert("model".into(), "encoder".into());
        Checkpoint {
            config,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("model").map(String::as_str) != Some("encoder") {
            return Err(Error::Config("checkpoint does not hold an encoder".into()));
        }
        let config = EncoderConfig::from_map(&ck.config, "")?;
        Self::from_params(config, ck.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

pub(crate) fn check_layout<T: Real>(reference: &ParamStore<T>, actual: &ParamStore<T>) -> Result<()> {
    if reference.len() != actual.len() {
        return Err(Error::Config(format!(
            "expected {} parameters, found {}",
            reference.len(),
            actual.len()
        )));
    }
    for (name, t) in reference.iter() {
        let other = actual
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if other.shape() != t.shape() {
            return Err(Error::Shape {
                op: "load_parameters",
                lhs: t.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Arithmetic mean of token states `[B, S, d]` over unmasked positions.
pub fn mean_pool<T: Real>(states: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let s = g.constant(states.clone());
    let pooled = g.masked_mean(s, mask)?;
    Ok(g.value(pooled).clone())
}

/// Embeds every record, keyed by [`SentenceRecord::record_id`].
pub fn embed_sentences(
    model: &EncoderModel<f32>,
    vocab: &Vocabulary,
    records: &[SentenceRecord],
    name: &str,
) -> Result<EmbeddingStore> {
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let ids = records.iter().map(SentenceRecord::record_id).collect();
    EmbeddingStore::from_rows(name, model.dim(), ids, model.embed_texts(vocab, &texts)?)
}
