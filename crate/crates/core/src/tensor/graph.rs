use rand::Rng;

use super::{axis_split, gemm_into, softmax_in_place, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, factor: T },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    Relu { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    CosineMatrix { a: Var, b: Var, a_unit: Vec<T>, b_unit: Vec<T>, a_norm: Vec<T>, b_norm: Vec<T> },
    Concat { a: Var, b: Var },
    Mean { a: Var, axis: usize },
    MaskedMean { a: Var, mask: Vec<bool>, counts: Vec<usize> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<T> },
    SquaredError { pred: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only operation tape. Node indices are a topological order.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `a [m x k] · b [k x n]`, or `a · bᵀ` for `b [n x k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm_into(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let d = *sa.last().unwrap_or(&0);
        if sb.iter().product::<usize>() != d || sb.len() != 1 {
            return Err(shape_err("add_bias", sa, sb));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % d])
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, factor }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let mut out = self.data(a).to_vec();
        softmax_in_place(&mut out, &shape, axis);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, &[a]))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let rows = if d == 0 { 0 } else { self.data(x).len() / d };
        let (g, b) = (self.data(gain), self.data(bias));
        let xs = self.data(x);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Gathers rows of `table [V x d]`, producing `[ids.len() x d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(shape_err("embedding", shape, &[ids.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Inverted dropout with a mask drawn from `rng`. A zero rate is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.data(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Dropout { a, mask }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu { a }, &[a])
    }

    /// Weighted softmax cross-entropy `Σ_i w_i · (−log p_i[target_i])` over the
    /// rows of `logits [n x C]`. With `weights == None` every row weighs `1/n`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("cross_entropy", &shape, &[targets.len()]));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target class {bad} out of range for {c} classes")));
        }
        let weights = match weights {
            Some(w) if w.len() != n => return Err(shape_err("cross_entropy", &shape, &[w.len()])),
            Some(w) => w.to_vec(),
            None => vec![T::one() / T::of(n.max(1) as f64); n],
        };
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        let x = self.data(logits);
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            if weights[r] != T::zero() {
                loss = loss + weights[r] * (lse - row[targets[r]]);
            }
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Pairwise cosine similarities between the rows of `a [n x d]` and `b [m x d]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("cosine_matrix", &sa, &sb));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let normalize = |data: &[T], rows: usize, side: &str| -> Result<(Vec<T>, Vec<T>)> {
            let mut unit = data.to_vec();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut unit[r * d..(r + 1) * d];
                let norm = super::l2_norm(row);
                if norm == T::zero() || !norm.is_finite() {
                    return Err(Error::Numeric(format!("zero-norm row {r} in {side} operand of cosine similarity")));
                }
                row.iter_mut().for_each(|v| *v = *v / norm);
                norms.push(norm);
            }
            Ok((unit, norms))
        };
        let (a_unit, a_norm) = normalize(self.data(a), n, "left")?;
        let (b_unit, b_norm) = normalize(self.data(b), m, "right")?;
        let mut out = vec![T::zero(); n * m];
        gemm_into(n, d, m, &a_unit, false, &b_unit, true, &mut out, false);
        let op = Op::CosineMatrix { a, b, a_unit, b_unit, a_norm, b_norm };
        Ok(self.push(vec![n, m], out, op, &[a, b]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat", &sa, &sb));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = sa[..sa.len() - 1].iter().product::<usize>();
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&xa[r * da..(r + 1) * da]);
            out.extend_from_slice(&xb[r * db..(r + 1) * db]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        Ok(self.push(shape, out, Op::Concat { a, b }, &[a, b]))
    }

    /// Mean over `axis`, removing it from the shape (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Usage(format!("cannot take mean over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[(o * len + j) * inner + i];
                }
            }
        }
        let ln = T::of(len as f64);
        out.iter_mut().for_each(|v| *v = *v / ln);
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(new_shape, out, Op::Mean { a, axis }, &[a]))
    }

    /// Mean of `a [B x S x d]` over the positions where `mask [B x S]` is true.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(shape_err("masked_mean", &shape, &[mask.len()]));
        }
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let x = self.data(a);
        let mut out = vec![T::zero(); b * d];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            for si in 0..s {
                if mask[bi * s + si] {
                    counts[bi] += 1;
                    let row = &x[(bi * s + si) * d..(bi * s + si + 1) * d];
                    for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            if counts[bi] == 0 {
                return Err(Error::Input(format!("row {bi} has no unmasked positions")));
            }
            let c = T::of(counts[bi] as f64);
            out[bi * d..(bi + 1) * d].iter_mut().for_each(|v| *v = *v / c);
        }
        let op = Op::MaskedMean { a, mask: mask.to_vec(), counts };
        Ok(self.push(vec![b, d], out, op, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(a), &shape, perm);
        Ok(self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let x = self.data(logits);
        if x.len() != targets.len() || x.is_empty() {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let n = T::of(x.len() as f64);
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let op = Op::BceWithLogits { logits, targets: targets.to_vec() };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Mean squared error between `pred` and `targets`.
    pub fn squared_error(&mut self, pred: Var, targets: &[T]) -> Result<Var> {
        let x = self.data(pred);
        if x.len() != targets.len() || x.is_empty() {
            return Err(shape_err("squared_error", self.shape(pred), &[targets.len()]));
        }
        let n = T::of(x.len() as f64);
        let loss = x.iter().zip(targets).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        let op = Op::SquaredError { pred, targets: targets.to_vec() };
        Ok(self.push(vec![1], vec![loss], op, &[pred]))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad && matches!(n.op, Op::Leaf))
                    .map(|data| Tensor {
                        shape: n.value.shape().to_vec(),
                        data,
                    })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let sa = self.shape(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC · op(B)ᵀ
                    gemm_into(m, n, k, gy, false, xb, !*trans_b, &mut da, false);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // B is [n x k]: dB = dCᵀ · A
                        gemm_into(n, m, k, gy, true, xa, false, &mut db, false);
                    } else {
                        gemm_into(k, m, n, xa, true, gy, false, &mut db, false);
                    }
                    acc(*b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm_into(
                            m,
                            n,
                            k,
                            &gy[i * m * n..(i + 1) * m * n],
                            false,
                            &xb[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let g = &gy[i * m * n..(i + 1) * m * n];
                        let x = &xa[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_into(n, m, k, g, true, x, false, out, false);
                        } else {
                            gemm_into(k, m, n, x, true, g, false, out, false);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, gy.to_vec());
                }
            }
            Op::AddBias { a, bias } => {
                if self.wants(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.wants(*bias) {
                    let d = self.data(*bias).len();
                    let mut db = vec![T::zero(); d];
                    for (i, &g) in gy.iter().enumerate() {
                        db[i % d] = db[i % d] + g;
                    }
                    acc(*bias, db);
                }
            }
            Op::Scale { a, factor } => {
                acc(*a, gy.iter().map(|&g| g * *factor).collect());
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: T = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (gy[at(j)] - s);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.data(*gain).len();
                let rows = rstd.len();
                let g = self.data(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (i, (&gv, &h)) in gy.iter().zip(xhat).enumerate() {
                        dg[i % d] = dg[i % d] + gv * h;
                    }
                    acc(*gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for (i, &gv) in gy.iter().enumerate() {
                        db[i % d] = db[i % d] + gv;
                    }
                    acc(*bias, db);
                }
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); gy.len()];
                    for r in 0..rows {
                        let sl = r * d..(r + 1) * d;
                        let dh: Vec<T> = gy[sl.clone()].iter().zip(g).map(|(&a, &b)| a * b).collect();
                        let h = &xhat[sl.clone()];
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut dt = vec![T::zero(); shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + gy[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Dropout { a, mask } => {
                acc(*a, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                acc(
                    *a,
                    gy.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect(),
                );
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = self.shape(*logits)[1];
                let g = gy[0];
                let mut dx = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dx[r * c..(r + 1) * c];
                    row[t] = row[t] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * w * g);
                }
                acc(*logits, dx);
            }
            Op::CosineMatrix { a, b, a_unit, b_unit, a_norm, b_norm } => {
                let (n, m) = (a_norm.len(), b_norm.len());
                let d = self.shape(*a)[1];
                // row sums of G ⊙ S (for a) and column sums (for b)
                let mut rs = vec![T::zero(); n];
                let mut cs = vec![T::zero(); m];
                for i in 0..n {
                    for j in 0..m {
                        let gs = gy[i * m + j] * y[i * m + j];
                        rs[i] = rs[i] + gs;
                        cs[j] = cs[j] + gs;
                    }
                }
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * d];
                    gemm_into(n, m, d, gy, false, b_unit, false, &mut da, false);
                    for i in 0..n {
                        for k in 0..d {
                            let v = &mut da[i * d + k];
                            *v = (*v - rs[i] * a_unit[i * d + k]) / a_norm[i];
                        }
                    }
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); m * d];
                    gemm_into(m, n, d, gy, true, a_unit, false, &mut db, false);
                    for j in 0..m {
                        for k in 0..d {
                            let v = &mut db[j * d + k];
                            *v = (*v - cs[j] * b_unit[j * d + k]) / b_norm[j];
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Concat { a, b } => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                let rows = gy.len() / (da + db);
                let mut ga = Vec::with_capacity(rows * da);
                let mut gb = Vec::with_capacity(rows * db);
                for r in 0..rows {
                    let row = &gy[r * (da + db)..(r + 1) * (da + db)];
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Mean { a, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let ln = T::of(len as f64);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[(o * len + j) * inner + i] = gy[o * inner + i] / ln;
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::MaskedMean { a, mask, counts } => {
                let shape = self.shape(*a);
                let (b, s, d) = (shape[0], shape[1], shape[2]);
                let mut dx = vec![T::zero(); b * s * d];
                for bi in 0..b {
                    let c = T::of(counts[bi] as f64);
                    for si in 0..s {
                        if mask[bi * s + si] {
                            for j in 0..d {
                                dx[(bi * s + si) * d + j] = gy[bi * d + j] / c;
                            }
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape { a } => acc(*a, gy.to_vec()),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*a, permute_data(gy, node.value.shape(), &inverse));
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.data(*logits);
                let n = T::of(x.len() as f64);
                let g = gy[0];
                acc(
                    *logits,
                    x.iter()
                        .zip(targets)
                        .map(|(&v, &t)| (sigmoid(v) - t) * g / n)
                        .collect(),
                );
            }
            Op::SquaredError { pred, targets } => {
                let x = self.data(*pred);
                let n = T::of(x.len() as f64);
                let g = gy[0];
                acc(
                    *pred,
                    x.iter()
                        .zip(targets)
                        .map(|(&p, &t)| T::of(2.0) * (p - t) * g / n)
                        .collect(),
                );
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
        slot => *slot = Some(contrib),
    }
}

fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Gradients of leaf nodes from one backward pass.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for constants and for leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
