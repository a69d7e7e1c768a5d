//! Synthetic sequence tasks with deterministic, split-disjoint generation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{stream, LABEL_DATA};
use crate::vocab::{Token, FIRST_SYMBOL};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    ToyTranslation,
    AnswerChoice,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort, TaskKind::ToyTranslation, TaskKind::AnswerChoice];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::ToyTranslation => "toy-translation",
            TaskKind::AnswerChoice => "answer-choice",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }

    /// Single-label classification rather than free generation.
    pub fn is_choice(self) -> bool {
        self == TaskKind::AnswerChoice
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Example {
    pub source: Vec<Token>,
    /// Target symbols; EOS is appended when the example is fed to the model.
    pub target: Vec<Token>,
}

impl Example {
    pub fn new(source: Vec<Token>, target: Vec<Token>) -> Self {
        Self { source, target }
    }

    /// `target ++ [EOS]`.
    pub fn target_with_eos(&self) -> Vec<Token> {
        let mut y = self.target.clone();
        y.push(crate::vocab::EOS);
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary, reserved tokens included.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Symbol permutation used by toy-translation, derived from the task seed.
pub fn translation_map(vocab_size: usize, seed: u64) -> Vec<Token> {
    let mut syms: Vec<Token> = (FIRST_SYMBOL..vocab_size as Token).collect();
    syms.shuffle(&mut stream(seed, &[LABEL_DATA, 1]));
    syms
}

fn lookup(map: &[Token], t: Token) -> Token {
    map[(t - FIRST_SYMBOL) as usize]
}

/// Target for `source` under `kind`. `map` is only read by toy-translation.
pub fn apply_task(kind: TaskKind, source: &[Token], map: &[Token]) -> Vec<Token> {
    match kind {
        TaskKind::Copy => source.to_vec(),
        TaskKind::Reverse => source.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut s = source.to_vec();
            s.sort_unstable();
            s
        }
        TaskKind::ToyTranslation => {
            let mut s: Vec<Token> = source.iter().map(|&t| lookup(map, t)).collect();
            for pair in s.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
            s
        }
        TaskKind::AnswerChoice => {
            // majority symbol; ties go to the smallest id
            let mut best: Option<(usize, Token)> = None;
            for &t in source {
                let n = source.iter().filter(|&&u| u == t).count();
                if best.is_none_or(|(bn, bt)| n > bn || (n == bn && t < bt)) {
                    best = Some((n, t));
                }
            }
            best.map(|(_, t)| alloc::vec![t]).unwrap_or_default()
        }
    }
}

/// Number of distinct sources a `TaskSpec` can produce, saturating at `u128::MAX`.
fn n_distinct(symbols: usize, min_len: usize, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    for len in min_len..=max_len {
        let count = (symbols as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        total = total.saturating_add(count);
    }
    total
}

fn decode_index(mut i: u128, symbols: usize, min_len: usize, max_len: usize) -> Vec<Token> {
    for len in min_len..=max_len {
        let count = (symbols as u128).pow(len as u32);
        if i < count {
            let mut s = alloc::vec![FIRST_SYMBOL; len];
            for slot in s.iter_mut().rev() {
                *slot = FIRST_SYMBOL + (i % symbols as u128) as Token;
                i /= symbols as u128;
            }
            return s;
        }
        i -= count;
    }
    unreachable!("index below the instance count")
}

/// Generates train/valid/test splits. Sources are distinct across the whole
/// dataset, so the splits are disjoint as sets of pairs.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    let fail = |m: alloc::string::String| Err(Error::Generation(m));
    if spec.vocab_size <= FIRST_SYMBOL as usize {
        return fail(format!("vocab_size {} leaves no symbols", spec.vocab_size));
    }
    let symbols = spec.vocab_size - FIRST_SYMBOL as usize;
    if spec.kind == TaskKind::ToyTranslation && symbols < 2 {
        return fail("toy-translation needs at least two symbols".into());
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return fail(format!("length range {}..={} is empty or contains 0", spec.min_len, spec.max_len));
    }
    let total = spec.n_train + spec.n_valid + spec.n_test;
    let available = n_distinct(symbols, spec.min_len, spec.max_len);
    if total as u128 > available {
        return fail(format!("{total} examples requested but only {available} distinct instances exist"));
    }
    let mut rng = stream(spec.seed, &[LABEL_DATA, 0]);
    let sources: Vec<Vec<Token>> = if available <= 4 * total as u128 {
        let mut all: Vec<Vec<Token>> =
            (0..available).map(|i| decode_index(i, symbols, spec.min_len, spec.max_len)).collect();
        all.shuffle(&mut rng);
        all.truncate(total);
        all
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(total);
        while out.len() < total {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let s: Vec<Token> =
                (0..len).map(|_| FIRST_SYMBOL + rng.random_range(0..symbols) as Token).collect();
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let map = translation_map(spec.vocab_size, spec.seed);
    let mut examples = sources.into_iter().map(|s| {
        let t = apply_task(spec.kind, &s, &map);
        Example::new(s, t)
    });
    let train = examples.by_ref().take(spec.n_train).collect();
    let valid = examples.by_ref().take(spec.n_valid).collect();
    let test = examples.collect();
    Ok(Dataset { train, valid, test })
}

/// Checks that every example leaves room for a `K`-token warmup, the
/// separator and BOS/EOS inside `max_seq_len`.
pub fn check_lengths(examples: &[Example], max_seq_len: usize, max_warmup_len: usize) -> Result<()> {
    let limit = max_seq_len.saturating_sub(max_warmup_len + 3);
    for (i, e) in examples.iter().enumerate() {
        for (what, len) in [("source", e.source.len()), ("target", e.target.len())] {
            if len == 0 || len > limit {
                return Err(Error::Length(format!("example {i}: {what} length {len} not in 1..={limit}")));
            }
        }
    }
    Ok(())
}
