//! Downstream prediction from admission-level embedding features: a
//! one-hidden-layer head, stratified k-fold cross-validation and the
//! mean-value regression baseline.
//!
//! Dataset file: a header line `<dim> <classification|regression>`, then one
//! line per admission, `admission_id,label,x_1,...,x_dim`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{atomic_write, read_text};
use crate::encoder::layers::normal_tensor;
use crate::error::{Error, Result};
use crate::eval::metrics::{auprc, auroc, mae, mean_std, pr_curve, roc_curve};
use crate::hybrid::EmbeddingStore;
use crate::tensor::{sigmoid, Adam, AdamConfig, Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Input(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmissionSample {
    pub admission_id: String,
    pub feature: Vec<f64>,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub kind: TaskKind,
    pub samples: Vec<AdmissionSample>,
}

impl Dataset {
    pub fn new(dim: usize, kind: TaskKind, samples: Vec<AdmissionSample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("feature dimension must be positive".into()));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.admission_id.as_str()) {
                return Err(Error::Input(format!("duplicate admission id `{}`", s.admission_id)));
            }
            if s.feature.len() != dim {
                return Err(Error::Input(format!(
                    "admission `{}` has {} features, expected {dim}",
                    s.admission_id,
                    s.feature.len()
                )));
            }
            if s.feature.iter().any(|x| !x.is_finite()) || !s.label.is_finite() {
                return Err(Error::Input(format!("non-finite value for admission `{}`", s.admission_id)));
            }
            if kind == TaskKind::Classification && s.label != 0.0 && s.label != 1.0 {
                return Err(Error::Input(format!(
                    "label {} of admission `{}` is not 0 or 1",
                    s.label, s.admission_id
                )));
            }
        }
        Ok(Dataset { dim, kind, samples })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim, self.kind);
        for s in &self.samples {
            write!(out, "{},{}", s.admission_id, s.label).unwrap();
            for x in &s.feature {
                write!(out, ",{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header line".into()))?;
        let mut parts = header.split_whitespace();
        let dim: usize = parts
            .next()
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| err(1, format!("bad header `{header}`")))?;
        let kind: TaskKind = parts
            .next()
            .ok_or_else(|| err(1, "header lacks task kind".into()))?
            .parse()
            .map_err(|e: Error| err(1, e.to_string()))?;
        let mut samples = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(err(i + 1, format!("expected {} fields, found {}", dim + 2, fields.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 1, format!("invalid number `{s}`")));
            samples.push(AdmissionSample {
                admission_id: fields[0].to_string(),
                label: num(fields[1])?,
                feature: fields[2..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Self::new(dim, kind, samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}

/// Mean of the note embeddings of one admission.
pub fn aggregate_admission(notes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = notes.first().ok_or_else(|| Error::Input("admission has no notes".into()))?;
    let mut sum = vec![0.0; first.len()];
    for n in notes {
        if n.len() != sum.len() {
            return Err(Error::Shape {
                op: "aggregate_admission",
                lhs: vec![sum.len()],
                rhs: vec![n.len()],
            });
        }
        for (s, x) in sum.iter_mut().zip(n) {
            *s += x;
        }
    }
    Ok(sum.into_iter().map(|s| s / notes.len() as f64).collect())
}

/// Averages store rows per admission; `admission_of` maps row ids to admissions.
pub fn admission_features(store: &EmbeddingStore, admission_of: &HashMap<String, String>) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for (id, row) in store.ids().iter().zip(store.rows()) {
        let adm = admission_of
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("row `{id}` has no admission")))?;
        groups.entry(adm.clone()).or_default().push(row.iter().map(|&x| x as f64).collect());
    }
    groups.into_iter().map(|(k, v)| Ok((k, aggregate_admission(&v)?))).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Indices outside fold `i`, ascending.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Usage(format!("need at least 2 folds, got {k}")));
    }
    Ok(())
}

/// Each class is shuffled with the seeded stream, then dealt to folds
/// round-robin with a counter that carries over from one class to the next.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<FoldPlan> {
    check_k(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut counter = 0;
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Usage(format!(
                "class {} has {} members, fewer than {k} folds",
                class as u8,
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[counter % k].push(i);
            counter += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { k, seed, folds })
}

/// Unstratified folds after a seeded shuffle.
pub fn plain_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    check_k(k)?;
    if n < k {
        return Err(Error::Usage(format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (c, i) in order.into_iter().enumerate() {
        folds[c % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { k, seed, folds })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 256,
            epochs: 50,
            lr: 1e-3,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Standardize with training statistics; constant columns keep scale 1.
#[derive(Clone, Debug, PartialEq)]
struct Scaler {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaler {
    fn fit(rows: &[&[f64]], dim: usize) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(*r).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut().zip(*r).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m) / n);
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Scaler { mean, scale }
    }

    fn apply<'a>(&'a self, row: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s)
    }
}

/// Feed-forward head with exactly one ReLU hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub kind: TaskKind,
    params: ParamStore<f64>,
    features: Scaler,
    target: Scaler,
}

impl HeadModel {
    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    fn design(&self, rows: &[&[f64]]) -> Tensor<f64> {
        let d = self.features.mean.len();
        let data = rows.iter().flat_map(|r| self.features.apply(r)).collect();
        Tensor::new(vec![rows.len(), d], data).expect("rows have the model dimension")
    }

    /// Probabilities (classification) or target-scale values (regression).
    pub fn predict(&self, rows: &[&[f64]]) -> Result<Vec<f64>> {
        let d = self.features.mean.len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape {
                op: "predict",
                lhs: vec![d],
                rhs: vec![r.len()],
            });
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.params.register(&mut g, false);
        let x = g.constant(self.design(rows));
        let out = forward(&mut g, &p, x)?;
        let raw = g.value(out).data();
        Ok(match self.kind {
            TaskKind::Classification => raw.iter().map(|&v| sigmoid(v)).collect(),
            TaskKind::Regression => raw.iter().map(|&v| v * self.target.scale[0] + self.target.mean[0]).collect(),
        })
    }
}

fn forward(g: &mut Graph<f64>, p: &crate::tensor::ParamVars, x: crate::tensor::Var) -> Result<crate::tensor::Var> {
    let h = g.matmul(x, p.get("w1")?, false)?;
    let h = g.add_bias(h, p.get("b1")?)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.get("w2")?, false)?;
    g.add_bias(o, p.get("b2")?)
}

/// Trains on `rows`/`targets` with minibatch Adam; deterministic given the seed.
pub fn train_head(rows: &[&[f64]], targets: &[f64], kind: TaskKind, config: &HeadConfig) -> Result<HeadModel> {
    config.validate()?;
    if rows.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if rows.len() != targets.len() {
        return Err(Error::Input(format!("{} rows vs {} targets", rows.len(), targets.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(Error::Input("feature rows must share one positive dimension".into()));
    }
    if rows.iter().flat_map(|r| r.iter()).chain(targets).any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite feature or target".into()));
    }
    if kind == TaskKind::Classification {
        if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Input(format!("classification target {bad} is not 0 or 1")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    params.insert("w1", normal_tensor(&[d, config.hidden], (2.0 / d as f64).sqrt(), &mut rng))?;
    params.insert("b1", Tensor::zeros(&[config.hidden]))?;
    params.insert("w2", normal_tensor(&[config.hidden, 1], (1.0 / config.hidden as f64).sqrt(), &mut rng))?;
    params.insert("b2", Tensor::zeros(&[1]))?;
    let target = match kind {
        TaskKind::Classification => Scaler {
            mean: vec![0.0],
            scale: vec![1.0],
        },
        TaskKind::Regression => {
            let t: Vec<[f64; 1]> = targets.iter().map(|&t| [t]).collect();
            Scaler::fit(&t.iter().map(|r| &r[..]).collect::<Vec<_>>(), 1)
        }
    };
    let mut model = HeadModel {
        kind,
        params,
        features: Scaler::fit(rows, d),
        target,
    };
    let y: Vec<f64> = targets.iter().map(|&t| (t - model.target.mean[0]) / model.target.scale[0]).collect();
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let batch_rows: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let batch_y: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let p = model.params.register(&mut g, true);
            let x = g.constant(model.design(&batch_rows));
            let out = forward(&mut g, &p, x)?;
            let loss = match kind {
                TaskKind::Classification => g.bce_with_logits(out, &batch_y)?,
                TaskKind::Regression => g.squared_error(out, &batch_y)?,
            };
            let grads = g.backward(loss)?;
            let grads = model.params.collect_grads(&p, &grads);
            opt.step(&mut model.params, &grads)?;
        }
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub head: HeadConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            seed: 42,
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub positives: usize,
    /// (metric, value) pairs in report order.
    pub metrics: Vec<(&'static str, f64)>,
    pub roc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
}

impl FoldResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub kind: TaskKind,
    pub folds: Vec<FoldResult>,
}

impl CvReport {
    pub fn metric_names(&self) -> Vec<&'static str> {
        self.folds.first().map(|f| f.metrics.iter().map(|(n, _)| *n).collect()).unwrap_or_default()
    }

    /// Mean and sample standard deviation of a metric across folds.
    pub fn summary(&self, name: &str) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self.folds.iter().filter_map(|f| f.metric(name)).collect();
        (!vals.is_empty()).then(|| mean_std(&vals))
    }

    /// Per-fold table followed by `mean` and `std` rows.
    pub fn to_tsv(&self) -> String {
        let names = self.metric_names();
        let mut out = String::from("fold\tn_train\tn_test\tpositives");
        for n in &names {
            write!(out, "\t{n}").unwrap();
        }
        out.push('\n');
        for f in &self.folds {
            write!(out, "{}\t{}\t{}\t{}", f.fold, f.n_train, f.n_test, f.positives).unwrap();
            for (_, v) in &f.metrics {
                write!(out, "\t{v:.6}").unwrap();
            }
            out.push('\n');
        }
        for (row, pick) in [("mean", 0), ("std", 1)] {
            write!(out, "{row}\t\t\t").unwrap();
            for n in &names {
                let (m, s) = self.summary(n).expect("metric present");
                write!(out, "\t{:.6}", if pick == 0 { m } else { s }).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Writes `cv_results.tsv` and, for classification, `fold{i}_roc.tsv` /
    /// `fold{i}_pr.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        atomic_write(&dir.join("cv_results.tsv"), self.to_tsv().as_bytes())?;
        if self.kind == TaskKind::Classification {
            for f in &self.folds {
                let curve = |header: &str, pts: &[(f64, f64)]| {
                    let mut s = format!("{header}\n");
                    for (x, y) in pts {
                        writeln!(s, "{x}\t{y}").unwrap();
                    }
                    s
                };
                atomic_write(&dir.join(format!("fold{}_roc.tsv", f.fold)), curve("fpr\ttpr", &f.roc).as_bytes())?;
                atomic_write(&dir.join(format!("fold{}_pr.tsv", f.fold)), curve("recall\tprecision", &f.pr).as_bytes())?;
            }
        }
        Ok(())
    }
}

fn evaluate_fold(samples: &[&AdmissionSample], plan: &FoldPlan, fold: usize, kind: TaskKind, config: &CvConfig) -> Result<FoldResult> {
    let train = plan.train_indices(fold);
    let test = &plan.folds[fold];
    let rows = |idx: &[usize]| idx.iter().map(|&i| samples[i].feature.as_slice()).collect::<Vec<_>>();
    let labels = |idx: &[usize]| idx.iter().map(|&i| samples[i].label).collect::<Vec<_>>();
    let head_config = HeadConfig {
        seed: config.head.seed.wrapping_add(fold as u64),
        ..config.head
    };
    let model = train_head(&rows(&train), &labels(&train), kind, &head_config)?;
    let pred = model.predict(&rows(test))?;
    let truth = labels(test);
    let mut out = FoldResult {
        fold,
        n_train: train.len(),
        n_test: test.len(),
        positives: 0,
        metrics: Vec::new(),
        roc: Vec::new(),
        pr: Vec::new(),
    };
    match kind {
        TaskKind::Classification => {
            let y: Vec<bool> = truth.iter().map(|&t| t == 1.0).collect();
            out.positives = y.iter().filter(|&&b| b).count();
            out.metrics = vec![("auroc", auroc(&pred, &y)?), ("auprc", auprc(&pred, &y)?)];
            out.roc = roc_curve(&pred, &y)?;
            out.pr = pr_curve(&pred, &y)?;
        }
        TaskKind::Regression => {
            let train_y = labels(&train);
            let mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
            out.metrics = vec![("mae", mae(&pred, &truth)?), ("baseline_mae", mean_baseline_mae(mean, &truth)?)];
        }
    }
    Ok(out)
}

/// MAE of the constant predictor `train_mean` on `test` targets.
pub fn mean_baseline_mae(train_mean: f64, test: &[f64]) -> Result<f64> {
    mae(&vec![train_mean; test.len()], test)
}

/// Fold plan for a dataset, computed on samples sorted by admission id so
/// that the result does not depend on input order.
pub fn plan_folds<'a>(dataset: &'a Dataset, config: &CvConfig) -> Result<(Vec<&'a AdmissionSample>, FoldPlan)> {
    let mut samples: Vec<&AdmissionSample> = dataset.samples.iter().collect();
    samples.sort_by(|a, b| a.admission_id.cmp(&b.admission_id));
    let plan = match dataset.kind {
        TaskKind::Classification => {
            let y: Vec<bool> = samples.iter().map(|s| s.label == 1.0).collect();
            stratified_folds(&y, config.folds, config.seed)?
        }
        TaskKind::Regression => plain_folds(samples.len(), config.folds, config.seed)?,
    };
    Ok((samples, plan))
}

/// Trains on k−1 folds and scores the held-out fold, for every fold. Folds
/// run on separate threads.
pub fn cross_validate(dataset: &Dataset, config: &CvConfig) -> Result<CvReport> {
    config.head.validate()?;
    let (samples, plan) = plan_folds(dataset, config)?;
    let kind = dataset.kind;
    let results: Vec<Result<FoldResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..plan.k)
            .map(|fold| {
                let (samples, plan) = (&samples, &plan);
                s.spawn(move || evaluate_fold(samples, plan, fold, kind, config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
    });
    Ok(CvReport {
        kind,
        folds: results.into_iter().collect::<Result<_>>()?,
    })
}
