//! Metric functions. All arithmetic is `f64`.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// 1-based ranks with ties sharing the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Input("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ as the Pearson correlation of average ranks.
pub fn spearman(gold: &[f64], predicted: &[f64]) -> Result<f64> {
    if let Some(v) = gold.iter().chain(predicted).find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite score {v}")));
    }
    if gold.len() != predicted.len() {
        return Err(Error::Input(format!("length mismatch: {} vs {}", gold.len(), predicted.len())));
    }
    pearson(&average_ranks(gold), &average_ranks(predicted))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean (natural log).
pub fn v_measure<A: Ord, B: Ord>(classes: &[A], clusters: &[B]) -> Result<VMeasure> {
    if classes.len() != clusters.len() {
        return Err(Error::Input(format!(
            "{} class labels vs {} cluster labels",
            classes.len(),
            clusters.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::Input("v-measure of an empty labelling".into()));
    }
    let n = classes.len() as f64;
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut class_count: BTreeMap<&A, usize> = BTreeMap::new();
    let mut cluster_count: BTreeMap<&B, usize> = BTreeMap::new();
    for (a, b) in classes.iter().zip(clusters) {
        *joint.entry((a, b)).or_default() += 1;
        *class_count.entry(a).or_default() += 1;
        *cluster_count.entry(b).or_default() += 1;
    }
    let h_class = entropy(class_count.values().copied(), n);
    let h_cluster = entropy(cluster_count.values().copied(), n);
    // H(class|cluster) = -Σ n_ck/N · ln(n_ck / n_k)
    let (mut h_class_given, mut h_cluster_given) = (0.0, 0.0);
    for (&(a, b), &c) in &joint {
        let c = c as f64;
        h_class_given -= c / n * (c / cluster_count[b] as f64).ln();
        h_cluster_given -= c / n * (c / class_count[a] as f64).ln();
    }
    let homogeneity = if h_class == 0.0 { 1.0 } else { 1.0 - h_class_given / h_class };
    let completeness = if h_cluster == 0.0 { 1.0 } else { 1.0 - h_cluster_given / h_cluster };
    let v = if homogeneity + completeness > 0.0 {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    } else {
        0.0
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v,
    })
}

/// nDCG over the first ten entries of `ranked`. `Ok(None)` when the query has
/// no relevant judged document (ideal DCG is zero).
pub fn ndcg_at_10<S: AsRef<str>>(ranked: &[S], judgments: &HashMap<String, u32>) -> Result<Option<f64>> {
    if ranked.is_empty() {
        return Err(Error::Input("empty ranking".into()));
    }
    let gain = |rel: u32| 2f64.powi(rel as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let dcg: f64 = ranked
        .iter()
        .take(10)
        .enumerate()
        .map(|(i, id)| gain(judgments.get(id.as_ref()).copied().unwrap_or(0)) / discount(i))
        .sum();
    let mut ideal: Vec<u32> = judgments.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let z: f64 = ideal.iter().take(10).enumerate().map(|(i, &r)| gain(r) / discount(i)).sum();
    Ok(if z == 0.0 { None } else { Some(dcg / z) })
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // rank-sum form of the Mann-Whitney statistic
    let ranks = average_ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Score thresholds in descending order with cumulative (tp, fp) at each.
fn threshold_counts(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == order.len() || scores[order[i + 1]] != scores[k] {
            out.push((scores[k], tp, fp));
        }
    }
    out
}

/// Average precision: Σ ΔRecall · Precision over distinct thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in threshold_counts(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / n_pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// `(fpr, tpr)` points from the origin through every distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        threshold_counts(scores, labels)
            .into_iter()
            .map(|(_, tp, fp)| (fp as f64 / n_neg, tp as f64 / n_pos)),
    );
    Ok(pts)
}

/// `(recall, precision)` at every distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    if n_pos == 0.0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one positive".into()));
    }
    Ok(threshold_counts(scores, labels)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / n_pos, tp as f64 / (tp + fp) as f64))
        .collect())
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("MAE of an empty set".into()));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / targets.len() as f64)
}

/// Sample mean and sample standard deviation (`n − 1` denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
