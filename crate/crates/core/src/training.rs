//! Warmup-sampling and plain sequence-to-sequence objectives, and the
//! per-epoch optimisation step shared by both.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::decoding::{sample_warmups, SamplerConfig};
use crate::model::{Net, Parameters};
use crate::rng::{derive_seed, stream, LABEL_DROPOUT, LABEL_SAMPLE, LABEL_SHUFFLE};
use crate::tasks::Example;
use crate::vocab::Token;
use crate::{Error, Real, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Mode {
    Warmup,
    BaselineSft,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Warmup => "warmup",
            Mode::BaselineSft => "baseline-sft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Mode::Warmup),
            "baseline-sft" => Ok(Mode::BaselineSft),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GradMode {
    /// Sampled warmups are constants; only the conditional NLL is differentiated.
    Pathwise,
    /// Adds the score-function term for the warmup distribution.
    ScoreFunction,
}

impl GradMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradMode::Pathwise => "pathwise",
            GradMode::ScoreFunction => "score-function",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pathwise" => Ok(GradMode::Pathwise),
            "score-function" => Ok(GradMode::ScoreFunction),
            _ => Err(Error::Config(format!("unknown grad_mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub mode: Mode,
    pub grad_mode: GradMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Ignored in baseline mode; its `seed` field is overridden per example.
    pub sampler: SamplerConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub selection_metric: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Warmup,
            grad_mode: GradMode::Pathwise,
            learning_rate: 3e-4,
            epochs: 10,
            batch_size: 32,
            sampler: SamplerConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            selection_metric: "exact_match".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if !crate::metrics::MetricReport::NAMES.contains(&self.selection_metric.as_str()) {
            return Err(Error::Config(format!("unknown selection_metric {:?}", self.selection_metric)));
        }
        if self.mode == Mode::Warmup {
            self.sampler.validate()?;
        }
        Ok(())
    }

    /// Warmup length the model must make room for (0 in baseline mode).
    pub fn effective_k(&self) -> usize {
        match self.mode {
            Mode::Warmup => self.sampler.max_warmup_len,
            Mode::BaselineSft => 0,
        }
    }
}

/// Loss of one example and its gradient, one tensor per parameter array.
#[derive(Debug, Clone)]
pub struct ExampleOutcome<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    /// The warmups the loss averaged over (empty in baseline mode).
    pub warmups: Vec<Vec<Token>>,
}

/// Distinct warmups with their multiplicities, in first-seen order.
fn group(warmups: &[Vec<Token>]) -> Vec<(&[Token], usize)> {
    let mut groups: Vec<(&[Token], usize)> = Vec::new();
    for w in warmups {
        match groups.iter_mut().find(|(g, _)| *g == w.as_slice()) {
            Some((_, n)) => *n += 1,
            None => groups.push((w, 1)),
        }
    }
    groups
}

/// Monte Carlo warmup loss `(1/n) Σ_i NLL(y | x, c_i)` for given warmups.
///
/// Identical warmups share one forward pass, weighted by their count, so the
/// value and gradient equal the plain average exactly. In score-function
/// mode each distinct warmup also contributes
/// `(count/n) · A_i · log P(c_i | x)`, where the advantage `A_i` is `ℓ_i`
/// minus the mean of the other samples' losses (no baseline when `n = 1`).
pub fn loss_from_warmups<T: Real>(
    params: &Parameters<T>,
    x: &[Token],
    y: &[Token],
    warmups: &[Vec<Token>],
    max_k: usize,
    grad_mode: GradMode,
    dropout: Option<ChaCha8Rng>,
    with_grad: bool,
) -> Result<ExampleOutcome<T>> {
    let n = warmups.len();
    if n == 0 {
        return Err(Error::Contract("at least one warmup is required".into()));
    }
    let groups = group(warmups);
    let score = grad_mode == GradMode::ScoreFunction && max_k > 0;
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    if let Some(rng) = dropout {
        net = net.with_dropout(rng);
    }
    let cross = net.condition(&mut tape, x)?;
    let mut terms = Vec::with_capacity(groups.len());
    for (c, _) in &groups {
        terms.push(net.target_terms(&mut tape, x, c, y, cross.as_ref(), score.then_some(max_k))?);
    }
    let losses: Vec<f64> = terms.iter().map(|t| tape.scalar(t.nll).as_f64()).collect();
    let loss: f64 = groups.iter().zip(&losses).map(|((_, k), l)| *k as f64 * l).sum::<f64>() / n as f64;

    let mut root: Option<Var> = None;
    let mut push = |tape: &mut Tape<'_, T>, v: Var| -> Result<()> {
        root = Some(match root {
            None => v,
            Some(r) => tape.add(r, v)?,
        });
        Ok(())
    };
    for ((_, count), t) in groups.iter().zip(&terms) {
        let v = tape.scale(t.nll, T::lit(*count as f64 / n as f64));
        push(&mut tape, v)?;
    }
    if score {
        let total: f64 = groups.iter().zip(&losses).map(|((_, k), l)| *k as f64 * l).sum();
        for (((_, count), t), &l) in groups.iter().zip(&terms).zip(&losses) {
            let advantage = match (n, groups.len()) {
                (1, _) => l,
                (_, 1) => 0.0,
                _ => l - (total - l) / (n - 1) as f64,
            };
            if advantage == 0.0 {
                continue;
            }
            let lp = t.warmup_log_prob.expect("requested above");
            let v = tape.scale(lp, T::lit(*count as f64 / n as f64 * advantage));
            push(&mut tape, v)?;
        }
    }
    let root = root.expect("at least one group");
    let grads = if with_grad {
        let mut g = tape.backward(root)?;
        net.vars().iter().map(|&v| g.take(v)).collect()
    } else {
        Vec::new()
    };
    Ok(ExampleOutcome { loss, grads, warmups: warmups.to_vec() })
}

/// Samples `n` warmups (no gradient flows through sampling) and returns the
/// Monte Carlo loss. `y` ends with EOS.
pub fn warmup_example_loss<T: Real>(
    params: &Parameters<T>,
    x: &[Token],
    y: &[Token],
    sampler: &SamplerConfig,
    grad_mode: GradMode,
    dropout: Option<ChaCha8Rng>,
    with_grad: bool,
) -> Result<ExampleOutcome<T>> {
    let warmups: Vec<Vec<Token>> = sample_warmups(params, x, sampler)?.into_iter().map(|w| w.tokens).collect();
    loss_from_warmups(params, x, y, &warmups, sampler.max_warmup_len, grad_mode, dropout, with_grad)
}

/// Plain NLL of `y` after the context `[.., SEP]`: the empty-warmup case.
pub fn baseline_sft_loss<T: Real>(
    params: &Parameters<T>,
    x: &[Token],
    y: &[Token],
    dropout: Option<ChaCha8Rng>,
    with_grad: bool,
) -> Result<ExampleOutcome<T>> {
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    if let Some(rng) = dropout {
        net = net.with_dropout(rng);
    }
    let cross = net.condition(&mut tape, x)?;
    let terms = net.target_terms(&mut tape, x, &[], y, cross.as_ref(), None)?;
    let loss = tape.scalar(terms.nll).as_f64();
    let grads = if with_grad {
        let mut g = tape.backward(terms.nll)?;
        net.vars().iter().map(|&v| g.take(v)).collect()
    } else {
        Vec::new()
    };
    Ok(ExampleOutcome { loss, grads, warmups: Vec::new() })
}

/// Sampler seed for visiting example `index` in `epoch`.
pub fn sample_seed(master: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(master, &[LABEL_SAMPLE, epoch as u64, index as u64])
}

/// Loss and gradient of dataset example `index` during `epoch`. Every random
/// draw comes from streams keyed by `(seed, epoch, index)`, so the result
/// does not depend on evaluation order.
pub fn example_outcome<T: Real>(
    params: &Parameters<T>,
    cfg: &TrainConfig,
    example: &Example,
    epoch: usize,
    index: usize,
) -> Result<ExampleOutcome<T>> {
    let y = example.target_with_eos();
    let dropout = (params.config().dropout_rate > 0.0)
        .then(|| stream(cfg.seed, &[LABEL_DROPOUT, epoch as u64, index as u64]));
    match cfg.mode {
        Mode::BaselineSft => baseline_sft_loss(params, &example.source, &y, dropout, true),
        Mode::Warmup => {
            let sampler = cfg.sampler.with_seed(sample_seed(cfg.seed, epoch, index));
            warmup_example_loss(params, &example.source, &y, &sampler, cfg.grad_mode, dropout, true)
        }
    }
}

/// Order in which an epoch visits the dataset.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[LABEL_SHUFFLE, epoch as u64]));
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// Parameters plus optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub params: Parameters<T>,
    adam: AdamState<T>,
    adam_cfg: AdamConfig,
    cfg: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(params: Parameters<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(params.tensors());
        Ok(Self { params, adam, adam_cfg: AdamConfig::with_lr(cfg.learning_rate), cfg })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over `data` with examples evaluated in order on this thread.
    pub fn train_epoch(&mut self, data: &[Example], epoch: usize) -> Result<EpochStats> {
        let cfg = self.cfg.clone();
        self.train_epoch_with(data, epoch, |params, jobs| {
            jobs.iter().map(|&(i, e)| example_outcome(params, &cfg, e, epoch, i)).collect()
        })
    }

    /// One pass over `data`. `run` evaluates a batch of `(dataset index,
    /// example)` jobs against the current parameters and must return the
    /// outcomes in job order; it may fan the work out as it likes.
    pub fn train_epoch_with<F>(&mut self, data: &[Example], epoch: usize, mut run: F) -> Result<EpochStats>
    where
        F: FnMut(&Parameters<T>, &[(usize, &Example)]) -> Vec<Result<ExampleOutcome<T>>>,
    {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let order = epoch_order(self.cfg.seed, epoch, data.len());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let jobs: Vec<(usize, &Example)> = chunk.iter().map(|&i| (i, &data[i])).collect();
            let outcomes = run(&self.params, &jobs);
            if outcomes.len() != jobs.len() {
                return Err(Error::Contract("batch runner returned the wrong number of outcomes".into()));
            }
            let mut acc: Vec<Tensor<T>> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for ((i, _), out) in jobs.iter().zip(outcomes) {
                let out = out?;
                if !out.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b}, example {i}"
                    )));
                }
                loss_sum += out.loss;
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    if a.shape() != g.shape() {
                        return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), a.shape())));
                    }
                    a.add_assign(g);
                }
            }
            let inv = T::lit(1.0 / jobs.len() as f64);
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|v| *v = *v * inv);
            }
            if let Some(max) = self.cfg.clip_norm {
                clip_grad_norm(&mut acc, max);
            }
            adam_step(self.params.tensors_mut(), &acc, &mut self.adam, &self.adam_cfg)?;
            batches += 1;
        }
        Ok(EpochStats { mean_loss: loss_sum / data.len() as f64, batches })
    }
}

/// One line of the per-epoch result stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    /// Wall-clock time, absent when timing is disabled for reproducible output.
    pub seconds: Option<f64>,
}

/// Epoch with the highest validation metric; ties go to the earliest.
pub fn select_checkpoint(records: &[EpochRecord]) -> Result<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in records {
        if best.is_none_or(|b| r.valid_metric > b.valid_metric) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch).ok_or_else(|| Error::Contract("no epoch records".into()))
}
