//! Python bindings: vocabularies, encoders, both trainers, embedding
//! stores, the evaluation metrics and the CLI entry point.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;

use clinembed::corpus::{self, RawDocument};
use clinembed::encoder::{EncoderConfig, EncoderModel};
use clinembed::eval::{self, metrics, ClusterTask, TextEncoder};
use clinembed::hybrid::{self, EmbeddingStore};
use clinembed::simcse::{self, SimcseConfig};
use clinembed::tsdae::{self, DecoderModel, TsdaeConfig};
use clinembed::Error;

create_exception!(clinembed, ClinembedError, PyException, "Error raised by the clinembed core library.");

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => ClinembedError::new_err(format!("{}: {e}", e.kind())),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for clinembed::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

#[pyclass(name = "Vocabulary", module = "clinembed")]
struct PyVocabulary {
    inner: corpus::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Builds a vocabulary from cleaned sentences.
    #[staticmethod]
    #[pyo3(signature = (sentences, min_frequency = 2))]
    fn build(sentences: Vec<String>, min_frequency: usize) -> PyResult<Self> {
        let inner = corpus::Vocabulary::build_from_texts(sentences.iter().map(String::as_str), min_frequency).py()?;
        Ok(PyVocabulary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary { inner: corpus::Vocabulary::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    /// Token ids with BOS/EOS, truncated to `max_len`.
    #[pyo3(signature = (sentence, max_len = 64))]
    fn encode(&self, sentence: &str, max_len: usize) -> Vec<usize> {
        self.inner.encode_sentence(sentence, max_len)
    }

    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.decode(&ids)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Encoder", module = "clinembed")]
struct PyEncoder {
    inner: EncoderModel<f32>,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab_size, d_model = 64, n_layers = 2, n_heads = 4, d_ffn = 256, max_seq_len = 64, dropout_rate = 0.1, seed = 42))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ffn: usize,
        max_seq_len: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = EncoderConfig { vocab_size, d_model, n_layers, n_heads, d_ffn, max_seq_len, dropout_rate };
        Ok(PyEncoder { inner: EncoderModel::new(config, seed).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEncoder { inner: EncoderModel::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Architecture as a dict.
    #[getter]
    fn config(&self) -> HashMap<&'static str, f64> {
        let c = self.inner.config();
        HashMap::from([
            ("vocab_size", c.vocab_size as f64),
            ("d_model", c.d_model as f64),
            ("n_layers", c.n_layers as f64),
            ("n_heads", c.n_heads as f64),
            ("d_ffn", c.d_ffn as f64),
            ("max_seq_len", c.max_seq_len as f64),
            ("dropout_rate", c.dropout_rate),
        ])
    }

    /// Sentence vectors, one list per text.
    fn embed(&self, vocab: &PyVocabulary, texts: Vec<String>) -> PyResult<Vec<Vec<f32>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        self.inner.embed_texts(&vocab.inner, &refs).py()
    }

    fn __eq__(&self, other: &PyEncoder) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "EmbeddingStore", module = "clinembed")]
struct PyStore {
    inner: EmbeddingStore,
}

#[pymethods]
impl PyStore {
    #[new]
    fn new(name: String, ids: Vec<String>, rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        Ok(PyStore { inner: EmbeddingStore::from_rows(name, dim, ids, rows).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyStore { inner: hybrid::read_store(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        hybrid::write_store(&self.inner, &path).py()
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        self.inner.rows().map(<[f32]>::to_vec).collect()
    }

    fn get(&self, id: &str) -> Option<Vec<f32>> {
        self.inner.get(id).map(<[f32]>::to_vec)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Cleans, segments and filters one note; returns the kept sentences.
#[pyfunction]
fn preprocess(text: String) -> Vec<String> {
    let doc = RawDocument { doc_id: "doc".into(), admission_id: "adm".into(), subject_id: "subj".into(), text };
    corpus::preprocess_document(&doc).into_iter().map(|r| r.text).collect()
}

#[pyfunction]
fn segment_sentences(text: &str) -> Vec<String> {
    corpus::segment_sentences(text)
}

/// `(texts, topics)` of the templated corpus.
#[pyfunction]
#[pyo3(signature = (n_sentences = 1000, n_topics = 2, seed = 42))]
fn synthetic_corpus(n_sentences: usize, n_topics: usize, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let c = clinembed::synth::generate_synthetic_corpus(n_sentences, n_topics, seed).py()?;
    Ok((c.documents.into_iter().map(|d| d.text).collect(), c.topics))
}

fn encode_all(encoder: &PyEncoder, vocab: &PyVocabulary, sentences: &[String]) -> Vec<Vec<usize>> {
    let max = encoder.inner.config().max_seq_len;
    sentences.iter().map(|s| vocab.inner.encode_sentence(s, max)).collect()
}

/// Contrastive fine-tuning; returns the trained encoder and per-step losses.
#[pyfunction]
#[pyo3(signature = (encoder, vocab, sentences, steps = 300, batch_size = 32, lr = 1e-3, temperature = 0.05, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn train_simcse(
    encoder: &PyEncoder,
    vocab: &PyVocabulary,
    sentences: Vec<String>,
    steps: usize,
    batch_size: usize,
    lr: f64,
    temperature: f64,
    seed: u64,
) -> PyResult<(PyEncoder, Vec<f64>)> {
    let ids = encode_all(encoder, vocab, &sentences);
    let cfg = SimcseConfig { temperature, batch_size, steps, lr, seed };
    let (model, trace) = simcse::train_simcse(&encoder.inner, &ids, &cfg).py()?;
    Ok((PyEncoder { inner: model }, trace.losses().collect()))
}

/// Denoising auto-encoder fine-tuning with a fresh decoder; returns the
/// trained encoder and per-step losses.
#[pyfunction]
#[pyo3(signature = (encoder, vocab, sentences, steps = 300, batch_size = 32, lr = 1e-3, deletion_ratio = 0.6, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn train_tsdae(
    encoder: &PyEncoder,
    vocab: &PyVocabulary,
    sentences: Vec<String>,
    steps: usize,
    batch_size: usize,
    lr: f64,
    deletion_ratio: f64,
    seed: u64,
) -> PyResult<(PyEncoder, Vec<f64>)> {
    let ids = encode_all(encoder, vocab, &sentences);
    let decoder = DecoderModel::new(encoder.inner.config(), seed.wrapping_add(1)).py()?;
    let cfg = TsdaeConfig { deletion_ratio, batch_size, steps, lr, seed };
    let (model, _, trace) = tsdae::train_tsdae(&encoder.inner, &decoder, &ids, &cfg).py()?;
    Ok((PyEncoder { inner: model }, trace.losses().collect()))
}

#[pyfunction]
#[pyo3(signature = (a, b, normalize = true))]
fn concat(a: &PyStore, b: &PyStore, normalize: bool) -> PyResult<PyStore> {
    Ok(PyStore { inner: hybrid::concat_embeddings(&a.inner, &b.inner, normalize).py()? })
}

/// Embeds `texts` with one encoder, or with two joined as a hybrid.
#[pyfunction]
fn embed_texts(encoders: Vec<PyRef<'_, PyEncoder>>, vocab: &PyVocabulary, texts: Vec<String>) -> PyResult<PyStore> {
    let names = ["a", "b"];
    let enc: Vec<TextEncoder> = encoders
        .iter()
        .zip(names)
        .map(|(e, name)| TextEncoder { name, model: &e.inner, vocab: &vocab.inner })
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    Ok(PyStore { inner: eval::embed_text_store(&enc, &refs).py()? })
}

/// k-means V-measure of `store` rows (looked up by text) against labels.
/// Returns `(v, homogeneity, completeness)`.
#[pyfunction]
#[pyo3(signature = (store, texts, labels, seed = 42))]
fn cluster_v_measure(store: &PyStore, texts: Vec<String>, labels: Vec<String>, seed: u64) -> PyResult<(f64, f64, f64)> {
    if texts.len() != labels.len() {
        return Err(err(Error::Alignment(format!("{} texts but {} labels", texts.len(), labels.len()))));
    }
    let task = ClusterTask::new(texts.into_iter().zip(labels).collect()).py()?;
    let v = eval::cluster_evaluate(&store.inner, &task, seed).py()?;
    Ok((v.v, v.homogeneity, v.completeness))
}

#[pyfunction]
fn spearman(gold: Vec<f64>, predicted: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&gold, &predicted).py()
}

#[pyfunction]
fn v_measure(classes: Vec<i64>, clusters: Vec<i64>) -> PyResult<(f64, f64, f64)> {
    let v = metrics::v_measure(&classes, &clusters).py()?;
    Ok((v.v, v.homogeneity, v.completeness))
}

#[pyfunction]
fn ndcg_at_10(ranked: Vec<String>, judgments: HashMap<String, u32>) -> PyResult<Option<f64>> {
    metrics::ndcg_at_10(&ranked, &judgments).py()
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).py()
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auprc(&scores, &labels).py()
}

#[pyfunction]
fn cosine(a: Vec<f32>, b: Vec<f32>) -> Option<f64> {
    hybrid::cosine(&a, &b)
}

/// InfoNCE over aligned view matrices, computed in 64-bit.
#[pyfunction]
#[pyo3(signature = (z1, z2, temperature = 0.05))]
fn info_nce_loss(z1: Vec<Vec<f64>>, z2: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let matrix = |rows: &[Vec<f64>]| {
        let d = rows.first().map_or(0, Vec::len);
        clinembed::tensor::Tensor::new(vec![rows.len(), d], rows.concat())
    };
    let batch = simcse::PairBatch { z1: matrix(&z1).py()?, z2: matrix(&z2).py()? };
    simcse::info_nce_loss(&batch, temperature).py()
}

/// Runs the command-line interface; `args` excludes the program name.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    clinembed::cli::main_with_args(std::iter::once("clinembed".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "clinembed")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClinembedError", m.py().get_type::<ClinembedError>())?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyStore>()?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(segment_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_simcse, m)?)?;
    m.add_function(wrap_pyfunction!(train_tsdae, m)?)?;
    m.add_function(wrap_pyfunction!(concat, m)?)?;
    m.add_function(wrap_pyfunction!(embed_texts, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_v_measure, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(v_measure, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_10, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
