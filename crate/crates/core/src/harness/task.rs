//! Synthetic sequence tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::transformer::{Batch, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Predict the input token at every position.
    Copy,
    /// Position `i` predicts input position `T − 1 − i`.
    Reverse,
    /// One label per sequence: its most frequent token.
    Majority,
}

impl TaskKind {
    pub fn is_sequence_labelling(self) -> bool {
        !matches!(self, TaskKind::Majority)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Examples at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let tokens = indices.iter().map(|&i| self.tokens[i].clone()).collect();
        let targets = match &self.targets {
            Targets::Tokens(t) => Targets::Tokens(indices.iter().map(|&i| t[i].clone()).collect()),
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        };
        Batch { tokens, targets }
    }

    /// Consecutive examples `start..start + len` (clamped to the split).
    pub fn range(&self, start: usize, len: usize) -> Batch {
        let end = (start + len).min(self.len());
        self.batch(&(start..end).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub train: Split,
    pub eval: Split,
}

pub fn reverse_target(input: &[usize]) -> Vec<usize> {
    input.iter().rev().copied().collect()
}

/// Most frequent token; ties go to the smallest token id.
pub fn majority_label(input: &[usize]) -> usize {
    let max = input.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &x in input {
        counts[x] += 1;
    }
    let mut best = 0;
    for (tok, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = tok;
        }
    }
    best
}

fn make_split<R: Rng>(rng: &mut R, kind: TaskKind, vocab: usize, t: usize, n: usize) -> Split {
    let tokens: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..t).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let targets = match kind {
        TaskKind::Copy => Targets::Tokens(tokens.clone()),
        TaskKind::Reverse => Targets::Tokens(tokens.iter().map(|x| reverse_target(x)).collect()),
        TaskKind::Majority => Targets::Labels(tokens.iter().map(|x| majority_label(x)).collect()),
    };
    Split { tokens, targets }
}

/// Uniform random token sequences with task targets. Train and eval are
/// drawn from one stream, train first.
pub fn make_task(
    kind: TaskKind,
    vocab: usize,
    t: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<Dataset> {
    if vocab < 2 || t < 2 {
        return Err(Error::Config(format!(
            "tasks need vocab >= 2 and T >= 2, got vocab {vocab}, T {t}"
        )));
    }
    let mut rng = seeded(seed);
    let train = make_split(&mut rng, kind, vocab, t, n_train);
    let eval = make_split(&mut rng, kind, vocab, t, n_eval);
    Ok(Dataset {
        kind,
        vocab,
        seq_len: t,
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_example() {
        assert_eq!(reverse_target(&[3, 1, 2, 0]), vec![0, 2, 1, 3]);
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_label(&[5, 5, 2, 5]), 5);
        assert_eq!(majority_label(&[4, 1, 4, 1]), 1);
    }

    #[test]
    fn deterministic() {
        let a = make_task(TaskKind::Reverse, 8, 6, 20, 5, 3).unwrap();
        let b = make_task(TaskKind::Reverse, 8, 6, 20, 5, 3).unwrap();
        assert_eq!(a, b);
        assert!(make_task(TaskKind::Copy, 1, 4, 1, 1, 0).is_err());
    }
}
