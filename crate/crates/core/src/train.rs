//! Pieces shared by the two encoder training loops.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::binio::atomic_write;
use crate::error::Result;

/// Per-step training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub steps: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn push(&mut self, step: usize, loss: f64) {
        self.steps.push((step, loss));
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|&(_, l)| l)
    }

    /// Mean loss of the first `n` steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        let n = n.min(self.len()).max(1);
        self.losses().take(n).sum::<f64>() / n as f64
    }

    /// Mean loss of the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.len()).max(1);
        self.losses().skip(self.len().saturating_sub(n)).sum::<f64>() / n as f64
    }

    /// `step<TAB>loss` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (step, loss) in &self.steps {
            writeln!(out, "{step}\t{loss}").unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_tsv().as_bytes())
    }
}

/// Draws mini-batches from a reshuffled index order, dropping each epoch's
/// remainder.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next<R: Rng>(&mut self, batch_size: usize, rng: &mut R) -> &[usize] {
        let size = batch_size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + size];
        self.pos += size;
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sampler_covers_each_epoch_without_repeats() {
        let mut s = BatchSampler::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..3 {
            seen.extend_from_slice(s.next(3, &mut rng));
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn trace_window_means() {
        let mut t = LossTrace::default();
        for (i, l) in [4.0, 2.0, 1.0, 1.0].into_iter().enumerate() {
            t.push(i, l);
        }
        assert_eq!(t.head_mean(2), 3.0);
        assert_eq!(t.tail_mean(2), 1.0);
        assert_eq!(t.to_tsv().lines().next(), Some("0\t4"));
    }
}
