//! Command-line front end.
//!
//! Every command writes into an `--out` directory guarded by a lock file,
//! writes each artifact atomically, and echoes the effective configuration as
//! `config.toml`. Failures print a single `error<TAB>kind<TAB>message` line on
//! stderr. Exit codes: 0 success, 1 runtime error, 2 usage or configuration
//! error, 3 malformed input file.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::binio::{atomic_write, read_text};
use crate::corpus::{preprocess_corpus, read_jsonl, write_jsonl, RawDocument, SentenceRecord, Vocabulary};
use crate::encoder::{embed_sentences, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::{
    cluster_evaluate, embed_text_store, read_cluster, read_retrieval, read_sts, retrieval_evaluate, sts_evaluate, write_report,
    TaskScore, TextEncoder,
};
use crate::hybrid::{concat_embeddings, read_store, write_store};
use crate::predict::{cross_validate, CvConfig, Dataset, TaskKind};
use crate::simcse::{train_simcse, SimcseConfig};
use crate::synth::generate_synthetic_corpus;
use crate::tsdae::{train_tsdae, DecoderModel, TsdaeConfig};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub min_frequency: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { min_frequency: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub n_topics: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sentences: 1000,
            n_topics: 2,
        }
    }
}

/// Everything a run can be configured with. A top-level `seed`, when set,
/// replaces every module seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub prep: PrepConfig,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub simcse: SimcseConfig,
    pub tsdae: TsdaeConfig,
    pub cv: CvConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    fn resolve(mut self) -> Self {
        if let Some(s) = self.seed {
            self.simcse.seed = s;
            self.tsdae.seed = s;
            self.cv.seed = s;
            self.cv.head.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seed for commands that are not tied to a module (k-means, generator).
    pub fn global_seed(&self) -> u64 {
        self.seed.unwrap_or(self.simcse.seed)
    }
}

#[derive(Parser, Debug)]
#[command(name = "clinembed", version, about = "Hybrid sentence embeddings for clinical text")]
pub struct Cli {
    /// TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed applied to every seeded component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct OutDir {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Sentence records from `prep`.
    #[arg(long)]
    pub sentences: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Start from this encoder checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Encoder checkpoint; give two to evaluate their hybrid.
    #[arg(long = "model", required = true, num_args = 1)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean, segment and filter raw notes; build the vocabulary.
    Prep {
        /// JSON lines with doc_id, admission_id, subject_id, text.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        min_frequency: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Write a templated corpus with known topics.
    GenSynthetic {
        #[arg(long)]
        n_sentences: Option<usize>,
        #[arg(long)]
        n_topics: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Contrastive fine-tuning with dropout views.
    TrainSimcse(TrainArgs),
    /// Denoising auto-encoder fine-tuning.
    TrainTsdae(TrainArgs),
    /// Embed sentence records into a store.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        sentences: PathBuf,
        /// Store name (defaults to the checkpoint file stem).
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Concatenate two aligned stores into a hybrid store.
    Concat {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Skip per-part L2 normalization.
        #[arg(long)]
        no_normalize: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Spearman correlation on a `text_a<TAB>text_b<TAB>score` file.
    EvalSts {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// k-means V-measure on a `text<TAB>label` file.
    EvalCluster {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// nDCG@10 on queries/corpus/qrels files.
    EvalRetrieval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Stratified k-fold evaluation of the prediction head.
    CvPredict {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Dump a store as `id<TAB>v1<TAB>v2...` text.
    ExportEmbeddings {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
}

impl Command {
    fn out_dir(&self) -> &Path {
        match self {
            Command::Prep { out, .. }
            | Command::GenSynthetic { out, .. }
            | Command::Embed { out, .. }
            | Command::Concat { out, .. }
            | Command::EvalSts { out, .. }
            | Command::EvalCluster { out, .. }
            | Command::EvalRetrieval { out, .. }
            | Command::CvPredict { out, .. }
            | Command::ExportEmbeddings { out, .. } => &out.out,
            Command::TrainSimcse(a) | Command::TrainTsdae(a) => &a.out.out,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Format { .. } | Error::Parse { .. } => EXIT_FORMAT,
        _ => EXIT_RUNTIME,
    }
}

/// The single stderr line for a failure.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r', '\t'], " ");
    format!("error\t{}\t{msg}", e.kind())
}

struct DirLock {
    path: PathBuf,
}

impl DirLock {
    const NAME: &'static str = ".clinembed.lock";

    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{}", a.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

/// Runs one command and returns the artifacts it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let out = cli.command.out_dir().to_path_buf();
    let _lock = DirLock::acquire(&out)?;
    let mut config = config.resolve();
    let mut artifacts = execute(&cli.command, &mut config, &out)?;
    let echo = out.join("config.toml");
    atomic_write(&echo, config.to_toml().as_bytes())?;
    artifacts.push(echo);
    Ok(artifacts)
}

fn load_vocab_for(config: &mut EncoderConfig, vocab_path: &Path) -> Result<Vocabulary> {
    let vocab = Vocabulary::load(vocab_path)?;
    if vocab.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, more than encoder.vocab_size {}; raise the cap or min_frequency",
            vocab.len(),
            config.vocab_size
        )));
    }
    config.vocab_size = vocab.len();
    Ok(vocab)
}

fn training_inputs(config: &mut EncoderConfig, args: &TrainArgs, seed: u64) -> Result<(EncoderModel<f32>, Vec<Vec<usize>>)> {
    let vocab = load_vocab_for(config, &args.vocab)?;
    let model = match &args.init {
        Some(p) => {
            let m = EncoderModel::load(p)?;
            if m.config().vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "initial checkpoint expects a vocabulary of {}, got {}",
                    m.config().vocab_size,
                    vocab.len()
                )));
            }
            *config = *m.config();
            m
        }
        None => EncoderModel::new(*config, seed)?,
    };
    let records: Vec<SentenceRecord> = read_jsonl(&args.sentences)?;
    let ids = records
        .iter()
        .map(|r| vocab.encode_sentence(&r.text, config.max_seq_len))
        .collect();
    Ok((model, ids))
}

fn apply_overrides(steps: &mut usize, batch: &mut usize, lr: &mut f64, args: &TrainArgs) {
    if let Some(s) = args.steps {
        *steps = s;
    }
    if let Some(b) = args.batch_size {
        *batch = b;
    }
    if let Some(l) = args.lr {
        *lr = l;
    }
}

fn load_encoders(models: &ModelArgs) -> Result<(Vec<(String, EncoderModel<f32>)>, Vocabulary)> {
    if models.models.len() > 2 {
        return Err(Error::Usage(format!("expected 1 or 2 --model values, got {}", models.models.len())));
    }
    let vocab = Vocabulary::load(&models.vocab)?;
    let loaded = models
        .models
        .iter()
        .map(|p| Ok((stem(p), EncoderModel::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((name, m)) = loaded.iter().find(|(_, m)| m.config().vocab_size != vocab.len()) {
        return Err(Error::Config(format!(
            "model `{name}` expects a vocabulary of {}, got {}",
            m.config().vocab_size,
            vocab.len()
        )));
    }
    Ok((loaded, vocab))
}

fn text_encoders<'a>(loaded: &'a [(String, EncoderModel<f32>)], vocab: &'a Vocabulary) -> Vec<TextEncoder<'a>> {
    loaded
        .iter()
        .map(|(name, model)| TextEncoder { name, model, vocab })
        .collect()
}

fn model_label(loaded: &[(String, EncoderModel<f32>)]) -> String {
    loaded.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join("+")
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn execute(command: &Command, config: &mut PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    match command {
        Command::Prep { input, min_frequency, .. } => {
            if let Some(m) = min_frequency {
                config.prep.min_frequency = *m;
            }
            let docs: Vec<RawDocument> = read_jsonl(input)?;
            let records = preprocess_corpus(&docs)?;
            let vocab = if records.is_empty() {
                Vocabulary::specials_only(config.prep.min_frequency)
            } else {
                Vocabulary::build(&records, config.prep.min_frequency)?
            };
            let sentences = out.join("sentences.jsonl");
            let vocab_path = out.join("vocab.txt");
            write_jsonl(&sentences, &records)?;
            vocab.save(&vocab_path)?;
            Ok(vec![sentences, vocab_path])
        }
        Command::GenSynthetic { n_sentences, n_topics, .. } => {
            if let Some(n) = n_sentences {
                config.synth.n_sentences = *n;
            }
            if let Some(t) = n_topics {
                config.synth.n_topics = *t;
            }
            let corpus = generate_synthetic_corpus(config.synth.n_sentences, config.synth.n_topics, config.global_seed())?;
            corpus.write(out)?;
            Ok(["corpus.jsonl", "topics.tsv", "cluster_task.tsv"].iter().map(|f| out.join(f)).collect())
        }
        Command::TrainSimcse(args) => {
            let c = &mut config.simcse;
            apply_overrides(&mut c.steps, &mut c.batch_size, &mut c.lr, args);
            let (model, ids) = training_inputs(&mut config.encoder, args, config.simcse.seed)?;
            let (trained, trace) = train_simcse(&model, &ids, &config.simcse)?;
            let ckpt = out.join("simcse.ckpt");
            let loss = out.join("simcse_loss.tsv");
            trained.save(&ckpt)?;
            trace.write(&loss)?;
            Ok(vec![ckpt, loss])
        }
        Command::TrainTsdae(args) => {
            let c = &mut config.tsdae;
            apply_overrides(&mut c.steps, &mut c.batch_size, &mut c.lr, args);
            let (model, ids) = training_inputs(&mut config.encoder, args, config.tsdae.seed)?;
            let decoder = DecoderModel::new(model.config(), config.tsdae.seed.wrapping_add(1))?;
            let (trained, decoder, trace) = train_tsdae(&model, &decoder, &ids, &config.tsdae)?;
            let ckpt = out.join("tsdae.ckpt");
            let dec = out.join("tsdae_decoder.ckpt");
            let loss = out.join("tsdae_loss.tsv");
            trained.save(&ckpt)?;
            decoder.save(&dec)?;
            trace.write(&loss)?;
            Ok(vec![ckpt, dec, loss])
        }
        Command::Embed {
            model, vocab, sentences, name, ..
        } => {
            let m = EncoderModel::load(model)?;
            config.encoder = *m.config();
            let vocab = Vocabulary::load(vocab)?;
            let records: Vec<SentenceRecord> = read_jsonl(sentences)?;
            let name = name.clone().unwrap_or_else(|| stem(model));
            let store = embed_sentences(&m, &vocab, &records, &name)?;
            let path = out.join(format!("{name}.emb"));
            write_store(&store, &path)?;
            Ok(vec![path])
        }
        Command::Concat { a, b, no_normalize, .. } => {
            let store = concat_embeddings(&read_store(a)?, &read_store(b)?, !no_normalize)?;
            let path = out.join("hybrid.emb");
            write_store(&store, &path)?;
            Ok(vec![path])
        }
        Command::EvalSts { model, task, .. } => {
            let (loaded, vocab) = load_encoders(model)?;
            config.encoder = *loaded[0].1.config();
            let pairs = read_sts(task)?;
            let texts: Vec<&str> = pairs.iter().flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()]).collect();
            let store = embed_text_store(&text_encoders(&loaded, &vocab), &texts)?;
            let score = sts_evaluate(&store, &pairs)?;
            report(out, &[TaskScore::new(task_name(task, &loaded), "spearman", Some(score))])
        }
        Command::EvalCluster { model, task, .. } => {
            let (loaded, vocab) = load_encoders(model)?;
            config.encoder = *loaded[0].1.config();
            let t = read_cluster(task)?;
            let store = embed_text_store(&text_encoders(&loaded, &vocab), &t.texts())?;
            let v = cluster_evaluate(&store, &t, config.global_seed())?;
            let name = task_name(task, &loaded);
            report(
                out,
                &[
                    TaskScore::new(&name, "v_measure", Some(100.0 * v.v)),
                    TaskScore::new(&name, "homogeneity", Some(100.0 * v.homogeneity)),
                    TaskScore::new(&name, "completeness", Some(100.0 * v.completeness)),
                ],
            )
        }
        Command::EvalRetrieval {
            model, queries, corpus, qrels, ..
        } => {
            let (loaded, vocab) = load_encoders(model)?;
            config.encoder = *loaded[0].1.config();
            let t = read_retrieval(queries, corpus, qrels)?;
            let store = embed_text_store(&text_encoders(&loaded, &vocab), &t.texts())?;
            let r = retrieval_evaluate(&store, &t)?;
            report(out, &[TaskScore::new(task_name(queries, &loaded), "ndcg@10", r.ndcg_at_10)])
        }
        Command::CvPredict { dataset, folds, epochs, .. } => {
            if let Some(k) = folds {
                config.cv.folds = *k;
            }
            if let Some(e) = epochs {
                config.cv.head.epochs = *e;
            }
            let ds = Dataset::load(dataset)?;
            let r = cross_validate(&ds, &config.cv)?;
            r.write(out)?;
            let mut written = vec![out.join("cv_results.tsv")];
            if ds.kind == TaskKind::Classification {
                for f in 0..r.folds.len() {
                    written.push(out.join(format!("fold{f}_roc.tsv")));
                    written.push(out.join(format!("fold{f}_pr.tsv")));
                }
            }
            Ok(written)
        }
        Command::ExportEmbeddings { store, .. } => {
            let s = read_store(store)?;
            let mut text = String::new();
            for (id, row) in s.ids().iter().zip(s.rows()) {
                text.push_str(id);
                for v in row {
                    text.push('\t');
                    text.push_str(&v.to_string());
                }
                text.push('\n');
            }
            let path = out.join(format!("{}.tsv", stem(store)));
            atomic_write(&path, text.as_bytes())?;
            Ok(vec![path])
        }
    }
}

fn task_name(task: &Path, loaded: &[(String, EncoderModel<f32>)]) -> String {
    format!("{}:{}", stem(task), model_label(loaded))
}

fn report(out: &Path, scores: &[TaskScore]) -> Result<Vec<PathBuf>> {
    let path = out.join("report.tsv");
    write_report(&path, scores)?;
    Ok(vec![path])
}
