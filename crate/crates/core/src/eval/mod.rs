//! Evaluation harness: semantic similarity (Spearman), clustering
//! (k-means + V-measure) and retrieval (cosine ranking + nDCG@10).
//!
//! Task files are tab-separated. Embeddings for a task are held in an
//! [`EmbeddingStore`] keyed by the text itself (see [`embed_text_store`]).
//! Scores are reported on a 0-100 scale.

pub mod kmeans;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::binio::{atomic_write, read_text};
use crate::corpus::Vocabulary;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::hybrid::{concat_embeddings, cosine, EmbeddingStore};

pub use kmeans::{kmeans, kmeans_points, KMeansResult, DEFAULT_MAX_ITERS};
pub use metrics::{auprc, auroc, mae, mean_std, ndcg_at_10, pearson, pr_curve, roc_curve, spearman, v_measure, VMeasure};

#[derive(Clone, Debug, PartialEq)]
pub struct StsPair {
    pub text_a: String,
    pub text_b: String,
    pub gold_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTask {
    pub items: Vec<(String, String)>,
    pub k: usize,
}

impl ClusterTask {
    pub fn new(items: Vec<(String, String)>) -> Result<Self> {
        let k = items.iter().map(|(_, l)| l).collect::<BTreeSet<_>>().len();
        if k < 2 {
            return Err(Error::Input(format!("cluster task needs at least 2 labels, found {k}")));
        }
        Ok(ClusterTask { items, k })
    }

    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|(t, _)| t.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub queries: Vec<(String, String)>,
    pub corpus: Vec<(String, String)>,
    /// query id -> doc id -> graded relevance
    pub judgments: HashMap<String, HashMap<String, u32>>,
}

impl RetrievalTask {
    pub fn new(
        queries: Vec<(String, String)>,
        corpus: Vec<(String, String)>,
        judgments: HashMap<String, HashMap<String, u32>>,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("retrieval corpus is empty".into()));
        }
        let mut doc_ids = HashSet::new();
        if let Some((dup, _)) = corpus.iter().find(|(id, _)| !doc_ids.insert(id.as_str())) {
            return Err(Error::Input(format!("duplicate doc id `{dup}`")));
        }
        let mut query_ids = HashSet::new();
        if let Some((dup, _)) = queries.iter().find(|(id, _)| !query_ids.insert(id.as_str())) {
            return Err(Error::Input(format!("duplicate query id `{dup}`")));
        }
        for (q, docs) in &judgments {
            if !query_ids.contains(q.as_str()) {
                return Err(Error::Input(format!("judgment for unknown query `{q}`")));
            }
            if let Some(d) = docs.keys().find(|d| !doc_ids.contains(d.as_str())) {
                return Err(Error::Input(format!("judgment for unknown doc `{d}`")));
            }
        }
        Ok(RetrievalTask {
            queries,
            corpus,
            judgments,
        })
    }

    pub fn texts(&self) -> Vec<&str> {
        self.queries.iter().chain(&self.corpus).map(|(_, t)| t.as_str()).collect()
    }
}

fn tsv_rows(path: &Path, fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
        if cols.len() != fields {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                message: format!("expected {fields} tab-separated fields, found {}", cols.len()),
            });
        }
        rows.push((i + 1, cols));
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        message: format!("invalid {what} `{s}`"),
    })
}

/// `text_a<TAB>text_b<TAB>gold_score` lines.
pub fn read_sts(path: &Path) -> Result<Vec<StsPair>> {
    tsv_rows(path, 3)?
        .into_iter()
        .map(|(line, mut c)| {
            let gold_score: f64 = parse_field(path, line, "gold score", &c[2])?;
            if !gold_score.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: "gold score is not finite".into(),
                });
            }
            let text_b = std::mem::take(&mut c[1]);
            let text_a = std::mem::take(&mut c[0]);
            Ok(StsPair {
                text_a,
                text_b,
                gold_score,
            })
        })
        .collect()
}

/// `text<TAB>label` lines.
pub fn read_cluster(path: &Path) -> Result<ClusterTask> {
    let items = tsv_rows(path, 2)?
        .into_iter()
        .map(|(_, mut c)| (std::mem::take(&mut c[0]), std::mem::take(&mut c[1])))
        .collect();
    ClusterTask::new(items)
}

fn read_id_text(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(tsv_rows(path, 2)?
        .into_iter()
        .map(|(_, mut c)| (std::mem::take(&mut c[0]), std::mem::take(&mut c[1])))
        .collect())
}

/// Queries and corpus are `id<TAB>text`; qrels are `query_id<TAB>doc_id<TAB>grade`.
pub fn read_retrieval(queries: &Path, corpus: &Path, qrels: &Path) -> Result<RetrievalTask> {
    let mut judgments: HashMap<String, HashMap<String, u32>> = HashMap::new();
    for (line, c) in tsv_rows(qrels, 3)? {
        let grade: u32 = parse_field(qrels, line, "relevance grade", &c[2])?;
        judgments.entry(c[0].clone()).or_default().insert(c[1].clone(), grade);
    }
    RetrievalTask::new(read_id_text(queries)?, read_id_text(corpus)?, judgments)
}

/// A model and the vocabulary it was trained with.
#[derive(Clone, Copy)]
pub struct TextEncoder<'a> {
    pub name: &'a str,
    pub model: &'a EncoderModel<f32>,
    pub vocab: &'a Vocabulary,
}

/// Embeds the distinct `texts` with one encoder, or with two encoders joined
/// into the normalized hybrid. Rows are keyed by text.
pub fn embed_text_store(encoders: &[TextEncoder], texts: &[&str]) -> Result<EmbeddingStore> {
    let mut seen = HashSet::new();
    let unique: Vec<&str> = texts.iter().copied().filter(|t| seen.insert(*t)).collect();
    let ids: Vec<String> = unique.iter().map(|t| t.to_string()).collect();
    let single = |e: &TextEncoder| EmbeddingStore::from_rows(e.name, e.model.dim(), ids.clone(), e.model.embed_texts(e.vocab, &unique)?);
    match encoders {
        [one] => single(one),
        [a, b] => concat_embeddings(&single(a)?, &single(b)?, true),
        _ => Err(Error::Usage(format!("expected 1 or 2 encoders, got {}", encoders.len()))),
    }
}

fn lookup<'a>(store: &'a EmbeddingStore, index: &HashMap<&str, usize>, text: &str) -> Result<&'a [f32]> {
    index
        .get(text)
        .map(|&i| store.row(i))
        .ok_or_else(|| Error::Alignment(format!("no embedding for text `{text}` in store `{}`", store.name())))
}

fn text_index(store: &EmbeddingStore) -> HashMap<&str, usize> {
    store.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// Spearman correlation (×100) between gold scores and embedding cosines.
pub fn sts_evaluate(store: &EmbeddingStore, task: &[StsPair]) -> Result<f64> {
    let index = text_index(store);
    let mut predicted = Vec::with_capacity(task.len());
    for p in task {
        let a = lookup(store, &index, &p.text_a)?;
        let b = lookup(store, &index, &p.text_b)?;
        predicted.push(cosine(a, b).ok_or_else(|| Error::Numeric("zero-norm embedding in STS pair".into()))?);
    }
    let gold: Vec<f64> = task.iter().map(|p| p.gold_score).collect();
    Ok(100.0 * spearman(&gold, &predicted)?)
}

/// k-means (`k` = number of labels) on L2-normalized embeddings, scored by
/// V-measure against the labels.
pub fn cluster_evaluate(store: &EmbeddingStore, task: &ClusterTask, seed: u64) -> Result<VMeasure> {
    let index = text_index(store);
    let points = task
        .items
        .iter()
        .map(|(t, _)| {
            let row = lookup(store, &index, t)?;
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric(format!("zero-norm embedding for `{t}`")));
            }
            Ok(row.iter().map(|&x| x as f64 / norm).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let result = kmeans_points(&points, task.k, seed, DEFAULT_MAX_ITERS)?;
    let labels: Vec<&str> = task.items.iter().map(|(_, l)| l.as_str()).collect();
    v_measure(&labels, &result.assignments)
}

/// Ranks `corpus` rows by cosine to `query`, best first, ties by ascending id.
pub fn retrieve(query: &[f32], corpus: &EmbeddingStore, top_k: usize) -> Result<Vec<(String, f64)>> {
    if corpus.is_empty() {
        return Err(Error::Input("retrieval corpus is empty".into()));
    }
    if query.len() != corpus.dim() {
        return Err(Error::Shape {
            op: "retrieve",
            lhs: vec![query.len()],
            rhs: vec![corpus.dim()],
        });
    }
    if query.iter().all(|&x| x == 0.0) {
        return Err(Error::Numeric("zero-norm query embedding".into()));
    }
    let mut scored = corpus
        .ids()
        .iter()
        .zip(corpus.rows())
        .map(|(id, row)| {
            cosine(query, row)
                .map(|s| (id.clone(), s))
                .ok_or_else(|| Error::Numeric(format!("zero-norm corpus embedding `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalScore {
    /// Mean nDCG@10 (×100) over queries with at least one relevant document.
    pub ndcg_at_10: Option<f64>,
    pub scored_queries: usize,
    pub no_relevant: usize,
}

pub fn retrieval_evaluate(store: &EmbeddingStore, task: &RetrievalTask) -> Result<RetrievalScore> {
    let index = text_index(store);
    let rows = task
        .corpus
        .iter()
        .map(|(_, t)| lookup(store, &index, t).map(<[f32]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let ids = task.corpus.iter().map(|(id, _)| id.clone()).collect();
    let corpus = EmbeddingStore::from_rows(store.name(), store.dim(), ids, rows)?;
    let empty = HashMap::new();
    let (mut total, mut scored, mut skipped) = (0.0, 0, 0);
    for (qid, text) in &task.queries {
        let ranked = retrieve(lookup(store, &index, text)?, &corpus, 10)?;
        let ranked: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        match ndcg_at_10(&ranked, task.judgments.get(qid).unwrap_or(&empty))? {
            Some(v) => {
                total += v;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(RetrievalScore {
        ndcg_at_10: (scored > 0).then(|| 100.0 * total / scored as f64),
        scored_queries: scored,
        no_relevant: skipped,
    })
}

/// One report line.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: String,
    pub metric: String,
    /// 0-100; `None` when undefined for the task.
    pub score: Option<f64>,
}

impl TaskScore {
    pub fn new(task: impl Into<String>, metric: impl Into<String>, score: Option<f64>) -> Self {
        TaskScore {
            task: task.into(),
            metric: metric.into(),
            score,
        }
    }
}

/// `task<TAB>metric<TAB>score` with two decimals, `NA` for undefined scores.
pub fn format_report(scores: &[TaskScore]) -> String {
    let mut out = String::new();
    for s in scores {
        match s.score {
            Some(v) => writeln!(out, "{}\t{}\t{v:.2}", s.task, s.metric),
            None => writeln!(out, "{}\t{}\tNA", s.task, s.metric),
        }
        .unwrap();
    }
    out
}

pub fn write_report(path: &Path, scores: &[TaskScore]) -> Result<()> {
    atomic_write(path, format_report(scores).as_bytes())
}

/// Label counts, handy for sanity checks on cluster tasks.
pub fn label_counts(task: &ClusterTask) -> BTreeMap<&str, usize> {
    let mut out = BTreeMap::new();
    for (_, l) in &task.items {
        *out.entry(l.as_str()).or_default() += 1;
    }
    out
}
