//! Synthetic sequence-to-sequence tasks.

use std::fmt;
use std::str::FromStr;

use crate::numerics::SeededRng;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Each token is replaced by its image under a fixed seeded permutation.
    TokenMap,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::TokenMap => "token-map",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "token-map" | "map" => Ok(TaskKind::TokenMap),
            other => Err(TrainError::Config(format!(
                "unknown task {other:?} (expected copy, reverse or token-map)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    mapping: Vec<usize>,
}

impl ToyTask {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self, TrainError> {
        if vocab_size < 2 || min_len == 0 || min_len > max_len {
            return Err(TrainError::Config(format!(
                "task needs vocab_size >= 2 and 1 <= min_len <= max_len, got {vocab_size}, {min_len}..={max_len}"
            )));
        }
        let mut mapping: Vec<usize> = (0..vocab_size).collect();
        if kind == TaskKind::TokenMap {
            SeededRng::stream(seed, u64::MAX).shuffle(&mut mapping);
        }
        Ok(Self {
            kind,
            vocab_size,
            min_len,
            max_len,
            seed,
            mapping,
        })
    }

    pub fn target(&self, src: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::TokenMap => src.iter().map(|&t| self.mapping[t]).collect(),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Example {
        let len = rng.range_inclusive(self.min_len, self.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.below(self.vocab_size)).collect();
        let tgt = self.target(&src);
        Example { src, tgt }
    }

    /// Fixed held-out set, independent of any training seed.
    pub fn eval_set(&self, n: usize) -> Vec<Example> {
        let mut rng = SeededRng::stream(self.seed, 0);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}
