//! Helpers shared by the integration tests: a finite-difference gradient
//! checker and brute-force metric oracles written independently of the
//! library code.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use clinembed::tensor::{Graph, Tensor, Var};
use clinembed::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, for ops with a kink at 0.
pub fn rand_tensor_away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Builds a graph whose inputs are `inputs` (leaves, gradient-tracked where
/// `track[i]`) and whose output is contracted with fixed random weights into
/// a scalar.
fn scalar_loss<F>(g: &mut Graph<f64>, inputs: &[Tensor<f64>], track: &[bool], weights: &[f64], build: &F) -> Result<(Var, Vec<Var>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = inputs.iter().zip(track).map(|(t, &tr)| g.leaf(t.clone(), tr)).collect();
    let out = build(g, &vars)?;
    let n = g.value(out).len();
    let flat = g.reshape(out, &[1, n])?;
    let w = g.constant(Tensor::new(vec![n, 1], weights[..n].to_vec())?);
    Ok((g.matmul(flat, w, false)?, vars))
}

/// Largest elementwise relative error `|a − n| / max(|a|, |n|, floor)`
/// between the tape gradient `a` and the central difference `n`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-6;

/// Returns the max relative error over every tracked input element.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], track: &[bool], build: F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..4096).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let (loss, vars) = scalar_loss(&mut g, inputs, track, &weights, &build)?;
    let grads = g.backward(loss)?;
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = scalar_loss(&mut g, inputs, track, &weights, &build)?;
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for (k, (&v, &tr)) in vars.iter().zip(track).enumerate() {
        if !tr {
            continue;
        }
        let analytic = grads.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[e], numeric, REL_FLOOR));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------- oracles

/// Average rank by counting: 1 + #less + (#equal − 1) / 2.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (oracle_ranks(a), oracle_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

fn oracle_entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// (homogeneity, completeness, v) via H(X|Y) = H(X,Y) − H(Y) on the
/// contingency table.
pub fn oracle_v_measure(classes: &[usize], clusters: &[usize]) -> (f64, f64, f64) {
    let n = classes.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut cl: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ku: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in classes.iter().zip(clusters) {
        *joint.entry((c, k)).or_default() += 1;
        *cl.entry(c).or_default() += 1;
        *ku.entry(k).or_default() += 1;
    }
    let h_joint = oracle_entropy(joint.values().copied(), n);
    let h_c = oracle_entropy(cl.values().copied(), n);
    let h_k = oracle_entropy(ku.values().copied(), n);
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - (h_joint - h_k) / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - (h_joint - h_c) / h_k };
    let v = if h + c > 0.0 { 2.0 * h * c / (h + c) } else { 0.0 };
    (h, c, v)
}

pub fn oracle_ndcg10(ranked: &[String], judgments: &HashMap<String, u32>) -> Option<f64> {
    let dcg = |rels: &[u32]| -> f64 {
        rels.iter()
            .take(10)
            .enumerate()
            .map(|(i, &r)| (2f64.powi(r as i32) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let got: Vec<u32> = ranked.iter().map(|id| *judgments.get(id).unwrap_or(&0)).collect();
    let mut ideal: Vec<u32> = judgments.values().copied().collect();
    ideal.sort_by(|a, b| b.cmp(a));
    let z = dcg(&ideal);
    (z > 0.0).then(|| dcg(&got) / z)
}

/// Pair counting over every positive/negative pair.
pub fn oracle_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Sweeps every distinct score as a `score >= t` threshold, highest first.
pub fn oracle_auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    if n_pos == 0.0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
        let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    Some(ap)
}

/// Row-by-row InfoNCE with explicit cosines and log-sum-exp.
pub fn oracle_info_nce(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = z1.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| cos(&z1[i], &z2[j]) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / n as f64
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

// ------------------------------------------------------------ op catalogue

pub const GRAD_INSTANCES: u64 = 50;
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

/// One random gradient-check instance of a named op.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

fn gc_matmul(seed: u64, trans_b: bool) -> Result<f64> {
    let mut r = rng(seed);
    let s = dims(&mut r, 1, 4, 3);
    let a = rand_tensor(&mut r, &[s[0], s[1]]);
    let b = if trans_b { rand_tensor(&mut r, &[s[2], s[1]]) } else { rand_tensor(&mut r, &[s[1], s[2]]) };
    gradcheck(&[a, b], &[true, true], move |g, v| g.matmul(v[0], v[1], trans_b), seed)
}

fn gc_batch_matmul(seed: u64, trans_b: bool) -> Result<f64> {
    let mut r = rng(seed);
    let s = dims(&mut r, 1, 3, 4);
    let a = rand_tensor(&mut r, &[s[0], s[1], s[2]]);
    let b = if trans_b { rand_tensor(&mut r, &[s[0], s[3], s[2]]) } else { rand_tensor(&mut r, &[s[0], s[2], s[3]]) };
    gradcheck(&[a, b], &[true, true], move |g, v| g.batch_matmul(v[0], v[1], trans_b), seed)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", run: |s| gc_matmul(s, false) },
        OpCase { name: "matmul_trans_b", run: |s| gc_matmul(s, true) },
        OpCase { name: "batch_matmul", run: |s| gc_batch_matmul(s, false) },
        OpCase { name: "batch_matmul_trans_b", run: |s| gc_batch_matmul(s, true) },
        OpCase {
            name: "add",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 2);
                let (a, b) = (rand_tensor(&mut r, &s), rand_tensor(&mut r, &s));
                gradcheck(&[a, b], &[true, true], |g, v| g.add(v[0], v[1]), seed)
            },
        },
        OpCase {
            name: "add_bias",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let (a, b) = (rand_tensor(&mut r, &s), rand_tensor(&mut r, &[s[2]]));
                gradcheck(&[a, b], &[true, true], |g, v| g.add_bias(v[0], v[1]), seed)
            },
        },
        OpCase {
            name: "scale",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 2);
                let a = rand_tensor(&mut r, &s);
                let f = r.random_range(-3.0..3.0);
                gradcheck(&[a], &[true], move |g, v| Ok(g.scale(v[0], f)), seed)
            },
        },
        OpCase {
            name: "softmax",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let axis = r.random_range(0..3);
                let a = rand_tensor(&mut r, &s);
                gradcheck(&[a], &[true], move |g, v| g.softmax(v[0], axis), seed)
            },
        },
        OpCase {
            name: "layer_norm",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 2, 5, 2);
                let x = rand_tensor(&mut r, &s);
                let (gain, bias) = (rand_tensor(&mut r, &[s[1]]), rand_tensor(&mut r, &[s[1]]));
                gradcheck(&[x, gain, bias], &[true, true, true], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), seed)
            },
        },
        OpCase {
            name: "embedding",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 2, 6, 2);
                let table = rand_tensor(&mut r, &s);
                let n = r.random_range(1..8);
                let ids: Vec<usize> = (0..n).map(|_| r.random_range(0..s[0])).collect();
                gradcheck(&[table], &[true], move |g, v| g.embedding(v[0], &ids), seed)
            },
        },
        OpCase {
            name: "dropout",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 5, 2);
                let a = rand_tensor(&mut r, &s);
                let rate = r.random_range(0.1..0.6);
                // Same mask on every evaluation.
                gradcheck(&[a], &[true], move |g, v| Ok(g.dropout(v[0], rate, &mut rng(seed + 7))), seed)
            },
        },
        OpCase {
            name: "relu",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 5, 2);
                let a = rand_tensor_away_from_zero(&mut r, &s);
                gradcheck(&[a], &[true], |g, v| Ok(g.relu(v[0])), seed)
            },
        },
        OpCase {
            name: "cross_entropy",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 5, 2);
                let logits = rand_tensor(&mut r, &[s[0], s[1] + 1]);
                let targets: Vec<usize> = (0..s[0]).map(|_| r.random_range(0..=s[1])).collect();
                gradcheck(&[logits], &[true], move |g, v| g.cross_entropy(v[0], &targets, None), seed)
            },
        },
        OpCase {
            name: "cross_entropy_weighted",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 5, 2);
                let logits = rand_tensor(&mut r, &[s[0], s[1] + 1]);
                let targets: Vec<usize> = (0..s[0]).map(|_| r.random_range(0..=s[1])).collect();
                let weights: Vec<f64> = (0..s[0]).map(|i| if i % 3 == 2 { 0.0 } else { r.random_range(0.1..1.0) }).collect();
                gradcheck(&[logits], &[true], move |g, v| g.cross_entropy(v[0], &targets, Some(&weights)), seed)
            },
        },
        OpCase {
            name: "cosine_matrix",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let (a, b) = (rand_tensor(&mut r, &[s[0], s[2]]), rand_tensor(&mut r, &[s[1], s[2]]));
                gradcheck(&[a, b], &[true, true], |g, v| g.cosine_matrix(v[0], v[1]), seed)
            },
        },
        OpCase {
            name: "concat",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let (a, b) = (rand_tensor(&mut r, &[s[0], s[1]]), rand_tensor(&mut r, &[s[0], s[2]]));
                gradcheck(&[a, b], &[true, true], |g, v| g.concat(v[0], v[1]), seed)
            },
        },
        OpCase {
            name: "mean",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let axis = r.random_range(0..3);
                let a = rand_tensor(&mut r, &s);
                gradcheck(&[a], &[true], move |g, v| g.mean(v[0], axis), seed)
            },
        },
        OpCase {
            name: "masked_mean",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let a = rand_tensor(&mut r, &s);
                let mut mask: Vec<bool> = (0..s[0] * s[1]).map(|_| r.random::<bool>()).collect();
                for b in 0..s[0] {
                    mask[b * s[1]] = true;
                }
                gradcheck(&[a], &[true], move |g, v| g.masked_mean(v[0], &mask), seed)
            },
        },
        OpCase {
            name: "reshape",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 2);
                let a = rand_tensor(&mut r, &s);
                gradcheck(&[a], &[true], move |g, v| g.reshape(v[0], &[s[1], s[0]]), seed)
            },
        },
        OpCase {
            name: "permute",
            run: |seed| {
                let mut r = rng(seed);
                let s = dims(&mut r, 1, 4, 3);
                let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
                let perm = perms[r.random_range(0..6)];
                let a = rand_tensor(&mut r, &s);
                gradcheck(&[a], &[true], move |g, v| g.permute(v[0], &perm), seed)
            },
        },
        OpCase {
            name: "bce_with_logits",
            run: |seed| {
                let mut r = rng(seed);
                let n = r.random_range(1..8);
                let a = Tensor::from_fn(&[n], |_| r.random_range(-4.0..4.0));
                let t: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
                gradcheck(&[a], &[true], move |g, v| g.bce_with_logits(v[0], &t), seed)
            },
        },
        OpCase {
            name: "squared_error",
            run: |seed| {
                let mut r = rng(seed);
                let n = r.random_range(1..8);
                let a = rand_tensor(&mut r, &[n]);
                let t: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
                gradcheck(&[a], &[true], move |g, v| g.squared_error(v[0], &t), seed)
            },
        },
    ]
}

/// Worst relative error of an op over `GRAD_INSTANCES` seeds.
pub fn worst_over_instances(case: &OpCase) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_INSTANCES {
        worst = worst.max((case.run)(seed * 1000 + 17)?);
    }
    Ok(worst)
}

// ------------------------------------------------------- metric agreement

pub const METRIC_INSTANCES: u64 = 200;
pub const METRIC_TOLERANCE: f64 = 1e-9;

/// Scores on a coarse grid so ties are common.
fn tied_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = r.random_range(2..=6);
    (0..n).map(|_| r.random_range(0..levels) as f64 / 4.0).collect()
}

fn both_classes(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
    labels[0] = true;
    labels[1] = false;
    labels
}

/// Max |library − oracle| per metric over `METRIC_INSTANCES` random cases
/// of size at most 12. Cases where a metric is undefined must be undefined
/// on both sides; a disagreement there counts as infinite error.
pub fn metric_oracle_errors() -> Vec<(&'static str, f64)> {
    use clinembed::eval::metrics::{auprc, auroc, ndcg_at_10, spearman, v_measure};
    let mut worst = [0.0f64; 5];
    let mut bump = |i: usize, got: Option<f64>, want: Option<f64>| {
        let e = match (got, want) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        worst[i] = worst[i].max(e);
    };
    for seed in 0..METRIC_INSTANCES {
        let mut r = rng(0xfeed + seed);
        let n = r.random_range(2..=12);

        let (a, b) = (tied_scores(&mut r, n), tied_scores(&mut r, n));
        bump(0, spearman(&a, &b).ok(), oracle_spearman(&a, &b));

        let classes: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let clusters: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let vm = v_measure(&classes, &clusters).unwrap();
        let (h, c, v) = oracle_v_measure(&classes, &clusters);
        bump(1, Some(vm.v), Some(v));
        bump(1, Some(vm.homogeneity), Some(h));
        bump(1, Some(vm.completeness), Some(c));

        let ranked: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
        let mut judgments = HashMap::new();
        for i in 0..r.random_range(0..=n + 3) {
            let rel = r.random_range(0..4);
            judgments.insert(format!("d{}", (i * 7 + seed as usize) % (n + 3)), rel);
        }
        bump(2, ndcg_at_10(&ranked, &judgments).unwrap(), oracle_ndcg10(&ranked, &judgments));

        let scores = tied_scores(&mut r, n);
        let labels = both_classes(&mut r, n);
        bump(3, auroc(&scores, &labels).ok(), oracle_auroc(&scores, &labels));
        bump(4, auprc(&scores, &labels).ok(), oracle_auprc(&scores, &labels));
    }
    vec![
        ("spearman", worst[0]),
        ("v_measure", worst[1]),
        ("ndcg@10", worst[2]),
        ("auroc", worst[3]),
        ("auprc", worst[4]),
    ]
}

// ------------------------------------------------------- synthetic setup

use clinembed::corpus::{preprocess_corpus, Vocabulary};
use clinembed::encoder::EncoderConfig;
use clinembed::eval::ClusterTask;
use clinembed::hybrid::{cosine, EmbeddingStore};
use clinembed::synth::{generate_synthetic_corpus, SyntheticCorpus};

pub struct SynthSetup {
    pub corpus: SyntheticCorpus,
    pub vocab: Vocabulary,
    pub config: EncoderConfig,
    /// Encoded sentences, one per document.
    pub ids: Vec<Vec<usize>>,
    pub task: ClusterTask,
}

pub fn synth_setup(n: usize, topics: usize, seed: u64, config: EncoderConfig) -> SynthSetup {
    let corpus = generate_synthetic_corpus(n, topics, seed).unwrap();
    let records = preprocess_corpus(&corpus.documents).unwrap();
    assert_eq!(records.len(), n);
    let vocab = Vocabulary::build(&records, 1).unwrap();
    let config = EncoderConfig { vocab_size: vocab.len(), ..config };
    let ids = records.iter().map(|r| vocab.encode_sentence(&r.text, config.max_seq_len)).collect();
    let items = corpus.documents.iter().zip(&corpus.topics).map(|(d, t)| (d.text.clone(), t.clone())).collect();
    let task = ClusterTask::new(items).unwrap();
    SynthSetup { corpus, vocab, config, ids, task }
}

/// Mean cosine over same-topic and different-topic pairs of task items.
pub fn topic_cosines(store: &EmbeddingStore, task: &ClusterTask) -> (f64, f64) {
    let rows: Vec<&[f32]> = task.items.iter().map(|(t, _)| store.get(t).unwrap()).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = cosine(rows[i], rows[j]).unwrap();
            if task.items[i].1 == task.items[j].1 {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra as f64, inter / n_inter as f64)
}

// ------------------------------------------------------- TSDAE fixtures

use clinembed::encoder::EncoderModel;
use clinembed::tsdae::DecoderModel;

pub fn tsdae_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig { vocab_size, d_model: 16, n_layers: 1, n_heads: 2, d_ffn: 24, max_seq_len: 16, dropout_rate: 0.1 }
}

/// Decoder whose final layer norm has zero gain and bias: every logit is 0.
pub fn uniform_decoder(config: &EncoderConfig) -> DecoderModel<f64> {
    let mut dec = DecoderModel::<f64>::new(config, 3).unwrap();
    for name in ["ln_f.g", "ln_f.b"] {
        dec.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    dec
}

/// Encoder/decoder pair that reproduces `original` with overwhelming
/// margins. Token embeddings are scaled one-hot rows, every decoder block
/// is switched off, and position `t` points at `original[t + 1]`.
pub fn perfect_models(config: &EncoderConfig, original: &[usize]) -> (EncoderModel<f64>, DecoderModel<f64>) {
    let (v, d) = (config.vocab_size, config.d_model);
    assert!(v <= d && original.len() <= config.max_seq_len);
    let mut enc = EncoderModel::<f64>::new(*config, 1).unwrap();
    let emb = enc.params_mut().get_mut("tok_emb").unwrap();
    emb.data_mut().fill(0.0);
    for i in 0..v {
        emb.data_mut()[i * d + i] = 1.0;
    }
    let mut dec = DecoderModel::<f64>::new(config, 2).unwrap();
    let names: Vec<String> = dec.params().names().to_vec();
    for n in &names {
        dec.params_mut().get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let pos = dec.params_mut().get_mut("pos_emb").unwrap();
    for (t, &next) in original[1..].iter().enumerate() {
        pos.data_mut()[t * d + next] = 10.0;
    }
    dec.params_mut().get_mut("ln_f.g").unwrap().data_mut().fill(100.0);
    (enc, dec)
}

// ------------------------------------------------------- golden corpus

use clinembed::corpus::{read_jsonl, RawDocument, SentenceRecord};

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn golden_documents() -> Vec<RawDocument> {
    read_jsonl(&data_path("golden_corpus.jsonl")).unwrap()
}

/// `(doc_id, index, text)` rows of the golden segmentation.
pub fn golden_sentences() -> Vec<(String, usize, String)> {
    std::fs::read_to_string(data_path("golden_sentences.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut f = l.splitn(3, '\t');
            (f.next().unwrap().to_string(), f.next().unwrap().parse().unwrap(), f.next().unwrap().to_string())
        })
        .collect()
}

/// Problems found when preprocessing the golden corpus; empty means pass.
pub fn golden_corpus_problems() -> Vec<String> {
    let docs = golden_documents();
    let mut problems = Vec::new();
    if docs.len() != 50 {
        problems.push(format!("golden corpus has {} documents", docs.len()));
    }
    let records: Vec<SentenceRecord> = clinembed::corpus::preprocess_corpus(&docs).unwrap();
    for r in &records {
        if r.text.contains(['=', '_', '\n', '\r']) {
            problems.push(format!("{}: forbidden character in {:?}", r.record_id(), r.text));
        }
        if r.word_count < 5 || r.text.split_whitespace().count() < 5 {
            problems.push(format!("{}: fragment {:?}", r.record_id(), r.text));
        }
    }
    let got: Vec<(String, usize, String)> = records.iter().map(|r| (r.doc_id.clone(), r.index, r.text.clone())).collect();
    let want = golden_sentences();
    if got != want {
        let first = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(got.len().min(want.len()));
        problems.push(format!(
            "segmentation differs from golden file at row {first}: got {:?}, want {:?} ({} vs {} rows)",
            got.get(first),
            want.get(first),
            got.len(),
            want.len()
        ));
    }
    problems
}

// ------------------------------------------------------- hybrid invariant

/// Over `pairs` random vector pairs with random component widths, the max
/// |hybrid cosine − mean of component cosines| and whether every hybrid
/// width was d₁ + d₂.
pub fn hybrid_cosine_gap(pairs: usize, seed: u64) -> (f64, bool) {
    use clinembed::hybrid::concat_embeddings;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut dims_ok = true;
    for _ in 0..pairs {
        let (d1, d2) = (r.random_range(1..64), r.random_range(1..64));
        let mut vec_of = |d: usize| -> Vec<f32> { (0..d).map(|_| r.random_range(-3.0f32..3.0)).collect() };
        let (a1, a2, b1, b2) = (vec_of(d1), vec_of(d1), vec_of(d2), vec_of(d2));
        let ids = vec!["x".to_string(), "y".to_string()];
        let a = EmbeddingStore::from_rows("a", d1, ids.clone(), vec![a1.clone(), a2.clone()]).unwrap();
        let b = EmbeddingStore::from_rows("b", d2, ids, vec![b1.clone(), b2.clone()]).unwrap();
        let h = concat_embeddings(&a, &b, true).unwrap();
        dims_ok &= h.dim() == d1 + d2;
        let want = (cosine(&a1, &a2).unwrap() + cosine(&b1, &b2).unwrap()) / 2.0;
        worst = worst.max((cosine(h.row(0), h.row(1)).unwrap() - want).abs());
    }
    (worst, dims_ok)
}

// ------------------------------------------------------- prediction data

use clinembed::predict::{AdmissionSample, Dataset, TaskKind};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

pub const COHORT: usize = 10_000;
pub const COHORT_POSITIVES: usize = 1_095;

/// Binary cohort with the mortality class ratio. With `oracle` the first
/// feature is the label itself; otherwise labels are shuffled against the
/// features so nothing is learnable.
pub fn mortality_dataset(oracle: bool, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut labels: Vec<f64> = (0..COHORT).map(|i| if i < COHORT_POSITIVES { 1.0 } else { 0.0 }).collect();
    labels.shuffle(&mut r);
    let mut features: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let mut f: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
            f[0] = y;
            f
        })
        .collect();
    if !oracle {
        features.shuffle(&mut r);
    }
    let samples = labels
        .into_iter()
        .zip(features)
        .enumerate()
        .map(|(i, (label, feature))| AdmissionSample { admission_id: format!("adm-{i:05}"), feature, label })
        .collect();
    Dataset::new(4, TaskKind::Classification, samples).unwrap()
}

/// eGFR-like regression target that is an affine function of the first
/// feature plus small noise.
pub fn egfr_dataset(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| {
            let feature: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut r)).collect();
            let noise: f64 = StandardNormal.sample(&mut r);
            let label = 60.0 + 20.0 * feature[0] + 0.5 * noise;
            AdmissionSample { admission_id: format!("adm-{i:05}"), feature, label }
        })
        .collect();
    Dataset::new(4, TaskKind::Regression, samples).unwrap()
}
