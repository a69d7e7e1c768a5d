//! Warmup sampling, separator handling and greedy decoding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::distr::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernels::log_softmax_row;
use crate::model::{warmup_support, Arch, Parameters, Session};
use crate::rng::{stream, LABEL_SAMPLE};
use crate::vocab::{Token, BOS, EOS, PAD, SEP};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub beam_size: usize,
    /// Longest warmup `K`; a warmup that reaches it stops without an EOS.
    pub max_warmup_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_samples: 4, beam_size: 4, max_warmup_len: 8, temperature: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.beam_size == 0 {
            return Err(Error::Config("n_samples and beam_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSample {
    pub tokens: Vec<Token>,
    /// `log P(c | x)`, stop event included.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerationOutput {
    pub warmup: Vec<Token>,
    pub target: Vec<Token>,
    /// `warmup ++ [SEP] ++ target`, plus the EOS when one was emitted.
    pub full: Vec<Token>,
}

fn support_log_probs<T: Real>(logits: &[T], support: &[bool], temperature: f64) -> Vec<f64> {
    let x: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let mut out = vec![0.0; x.len()];
    log_softmax_row(&x, Some(support), &mut out);
    out
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    -Float::ln(-Float::ln(u))
}

struct Beam<'p, T: Real> {
    session: Session<'p, T>,
    tokens: Vec<Token>,
    log_prob: f64,
}

/// Draws `n_samples` warmups with a sampled beam search.
///
/// Each live beam proposes `beam_size` distinct continuations, drawn without
/// replacement (Gumbel top-k) from the temperature-scaled distribution over
/// the warmup support. Continuations that stop (EOS, or length `K`) retire
/// straight away; the rest compete for `beam_size` live slots by cumulative
/// log-probability. The returned warmups are drawn from the retired set with
/// probability proportional to `exp(log_prob)`, independently and with
/// replacement.
///
/// When no live candidate is ever pruned the retired set holds every
/// warmup, and the draws follow `P(c | x)` exactly.
pub fn sample_warmups<T: Real>(params: &Parameters<T>, x: &[Token], cfg: &SamplerConfig) -> Result<Vec<WarmupSample>> {
    cfg.validate()?;
    let k_max = cfg.max_warmup_len;
    if k_max == 0 {
        return Ok(vec![WarmupSample { tokens: Vec::new(), log_prob: 0.0 }; cfg.n_samples]);
    }
    let mut rng = stream(cfg.seed, &[LABEL_SAMPLE]);
    let support = warmup_support(params.config().vocab_size);
    let mut live = vec![Beam { session: Session::start(params, x)?, tokens: Vec::new(), log_prob: 0.0 }];
    let mut retired: Vec<(Vec<Token>, f64)> = Vec::new();

    while !live.is_empty() {
        let mut candidates: Vec<(usize, Token, f64)> = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            let lp = support_log_probs(beam.session.logits(), &support, 1.0);
            let lq = if cfg.temperature == 1.0 {
                lp.clone()
            } else {
                support_log_probs(beam.session.logits(), &support, cfg.temperature)
            };
            let mut keys: Vec<(f64, Token)> =
                (0..lq.len()).filter(|&j| support[j]).map(|j| (lq[j] + gumbel(&mut rng), j as Token)).collect();
            keys.sort_by(|a, b| b.0.total_cmp(&a.0));
            keys.truncate(cfg.beam_size);
            for (_, tok) in keys {
                let total = beam.log_prob + lp[tok as usize];
                if tok == EOS {
                    retired.push((beam.tokens.clone(), total));
                } else if beam.tokens.len() + 1 == k_max {
                    let mut t = beam.tokens.clone();
                    t.push(tok);
                    retired.push((t, total));
                } else {
                    candidates.push((b, tok, total));
                }
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        candidates.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(candidates.len());
        for (b, tok, total) in candidates {
            let mut session = live[b].session.clone();
            session.push(tok)?;
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            next.push(Beam { session, tokens, log_prob: total });
        }
        live = next;
    }

    let max = retired.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = retired.iter().map(|r| Float::exp(r.1 - max)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let mut u = rng.random::<f64>() * total;
        let mut pick = retired.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let (tokens, log_prob) = retired[pick].clone();
        out.push(WarmupSample { tokens, log_prob });
    }
    Ok(out)
}

/// `c ++ [SEP]`.
pub fn attach_separator(c: &[Token]) -> Result<Vec<Token>> {
    if c.contains(&SEP) {
        return Err(Error::Contract("warmup already contains a separator".into()));
    }
    let mut out = Vec::with_capacity(c.len() + 1);
    out.extend_from_slice(c);
    out.push(SEP);
    Ok(out)
}

/// Tokens strictly after the first SEP, cut at the first EOS.
pub fn extract_target(full: &[Token]) -> Result<Vec<Token>> {
    let at = full
        .iter()
        .position(|&t| t == SEP)
        .ok_or_else(|| Error::Extraction("no separator in generated sequence".into()))?;
    let rest = &full[at + 1..];
    let end = rest.iter().position(|&t| t == EOS).unwrap_or(rest.len());
    Ok(rest[..end].to_vec())
}

fn argmax(lp: &[f64], support: &[bool]) -> Token {
    let mut best = (f64::NEG_INFINITY, EOS);
    for (j, &v) in lp.iter().enumerate() {
        if support[j] && v > best.0 {
            best = (v, j as Token);
        }
    }
    best.1
}

/// Greedy continuation of an open session until EOS or `max_len` tokens.
/// Returns the emitted tokens without the EOS, and whether EOS was emitted.
/// With `feed_all` every emitted token is pushed back into the session;
/// otherwise the final one is not (it needs no successor) and `max_len` is
/// capped by the position table.
fn greedy_continue<T: Real>(
    session: &mut Session<'_, T>,
    support: &[bool],
    max_len: usize,
    feed_all: bool,
) -> Result<(Vec<Token>, bool)> {
    let mut out = Vec::new();
    let max_len = if feed_all { max_len } else { max_len.min(session.remaining() + 1) };
    while out.len() < max_len {
        let tok = argmax(&support_log_probs(session.logits(), support, 1.0), support);
        if tok == EOS {
            return Ok((out, true));
        }
        out.push(tok);
        if feed_all || out.len() < max_len {
            session.push(tok)?;
        }
    }
    Ok((out, false))
}

fn open_session<'p, T: Real>(params: &'p Parameters<T>, x: &[Token], context: &[Token]) -> Result<Session<'p, T>> {
    let ctx = match params.config().arch {
        Arch::EncoderDecoder => match context.split_first() {
            Some((&BOS, rest)) => rest,
            _ => return Err(Error::Contract("encoder-decoder context must start with BOS".into())),
        },
        Arch::DecoderOnly => context,
    };
    let mut s = Session::start(params, x)?;
    for &t in ctx {
        s.push(t)?;
    }
    Ok(s)
}

/// Greedy target decoding after `context` (as built by
/// [`crate::model::warmup_context`], so BOS-prefixed for encoder-decoder
/// models). PAD, BOS and SEP are never emitted. The EOS is not returned.
pub fn greedy_decode<T: Real>(params: &Parameters<T>, x: &[Token], context: &[Token], max_len: usize) -> Result<Vec<Token>> {
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let mut s = open_session(params, x, context)?;
    let support = warmup_support(params.config().vocab_size);
    Ok(greedy_continue(&mut s, &support, max_len, false)?.0)
}

/// Greedy warmup of at most `K` symbols (EOS ends it early).
pub fn greedy_warmup<T: Real>(params: &Parameters<T>, x: &[Token], k_max: usize) -> Result<Vec<Token>> {
    let mut s = Session::start(params, x)?;
    let support = warmup_support(params.config().vocab_size);
    Ok(greedy_continue(&mut s, &support, k_max, false)?.0)
}

/// Two-phase inference: a warmup (greedy, or one sampled draw when
/// `sample_warmup` is set), then SEP, then a greedy target of at most
/// `max_target_len` tokens.
pub fn inference_generate<T: Real>(
    params: &Parameters<T>,
    x: &[Token],
    cfg: &SamplerConfig,
    sample_warmup: bool,
    max_target_len: usize,
) -> Result<GenerationOutput> {
    let support = warmup_support(params.config().vocab_size);
    let mut s = Session::start(params, x)?;
    let warmup = if sample_warmup {
        let one = SamplerConfig { n_samples: 1, ..cfg.clone() };
        let c = sample_warmups(params, x, &one)?.swap_remove(0).tokens;
        for &t in &c {
            s.push(t)?;
        }
        c
    } else {
        greedy_continue(&mut s, &support, cfg.max_warmup_len, true)?.0
    };
    s.push(SEP)?;
    let (target, stopped) = if max_target_len == 0 {
        (Vec::new(), false)
    } else {
        greedy_continue(&mut s, &support, max_target_len, false)?
    };
    let mut full = attach_separator(&warmup)?;
    full.extend_from_slice(&target);
    if stopped {
        full.push(EOS);
    }
    Ok(GenerationOutput { warmup, target, full })
}

/// Tokens that may never appear inside a warmup or a target.
pub fn is_reserved_in_output(t: Token) -> bool {
    matches!(t, PAD | BOS | SEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, sequence_log_prob, warmup_context, ModelConfig};
    use crate::vocab::FIRST_SYMBOL;
    use alloc::collections::BTreeMap;

    fn cfg(arch: Arch, vocab: usize) -> ModelConfig {
        ModelConfig {
            arch,
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers_encoder: usize::from(arch == Arch::EncoderDecoder),
            n_layers_decoder: 1,
            d_ff: 8,
            max_seq_len: 12,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn separator_contract() {
        assert_eq!(attach_separator(&[]).unwrap(), vec![SEP]);
        assert_eq!(attach_separator(&[4, 5]).unwrap(), vec![4, 5, SEP]);
        assert!(matches!(attach_separator(&attach_separator(&[4]).unwrap()), Err(Error::Contract(_))));
    }

    #[test]
    fn extraction() {
        assert_eq!(extract_target(&[4, 5, SEP, 6, 7, EOS]).unwrap(), vec![6, 7]);
        assert_eq!(extract_target(&[SEP, EOS]).unwrap(), Vec::<Token>::new());
        assert!(matches!(extract_target(&[4, 5, EOS]), Err(Error::Extraction(_))));
    }

    #[test]
    fn empty_warmups_at_k0() {
        let p = init_model::<f64>(&cfg(Arch::DecoderOnly, 8), 1).unwrap();
        let s = sample_warmups(&p, &[4, 5], &SamplerConfig { max_warmup_len: 0, ..Default::default() }).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|w| w.tokens.is_empty() && w.log_prob == 0.0));
    }

    #[test]
    fn samples_respect_contracts_and_log_probs() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let p = init_model::<f64>(&cfg(arch, 9), 2).unwrap();
            let sc = SamplerConfig { n_samples: 6, max_warmup_len: 3, seed: 11, ..Default::default() };
            let a = sample_warmups(&p, &[4, 6, 5], &sc).unwrap();
            assert_eq!(a, sample_warmups(&p, &[4, 6, 5], &sc).unwrap());
            for w in &a {
                assert!(w.tokens.len() <= 3 && w.tokens.iter().all(|&t| t >= FIRST_SYMBOL));
                let exact = sequence_log_prob(&p, &[4, 6, 5], &w.tokens, 3).unwrap();
                assert!((w.log_prob - exact).abs() < 1e-10 && w.log_prob <= 0.0);
            }
        }
    }

    #[test]
    fn cold_single_beam_is_greedy() {
        let p = init_model::<f64>(&cfg(Arch::EncoderDecoder, 9), 3).unwrap();
        let greedy = greedy_warmup(&p, &[5, 7], 4).unwrap();
        let sc = SamplerConfig { n_samples: 5, beam_size: 1, max_warmup_len: 4, temperature: 1e-9, seed: 4 };
        for w in sample_warmups(&p, &[5, 7], &sc).unwrap() {
            assert_eq!(w.tokens, greedy);
        }
    }

    #[test]
    fn frequencies_follow_exact_distribution() {
        // Two symbols, K = 1: the beam covers all three warmups, so draws are exact.
        let p = init_model::<f64>(&cfg(Arch::DecoderOnly, 6), 5).unwrap();
        let x = [4, 5];
        let mut counts: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
        let draws = 10_000;
        for s in 0..draws {
            let sc = SamplerConfig { n_samples: 1, max_warmup_len: 1, seed: s, ..Default::default() };
            *counts.entry(sample_warmups(&p, &x, &sc).unwrap().swap_remove(0).tokens).or_default() += 1;
        }
        let mut mass = 0.0;
        for c in [vec![], vec![4], vec![5]] {
            let prob = sequence_log_prob(&p, &x, &c, 1).unwrap().exp();
            mass += prob;
            let freq = *counts.get(&c).unwrap_or(&0) as f64 / draws as f64;
            let se = (prob * (1.0 - prob) / draws as f64).sqrt();
            assert!((freq - prob).abs() <= 3.0 * se, "{c:?}: {freq} vs {prob}");
        }
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k0_inference_is_plain_greedy_decode() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let p = init_model::<f64>(&cfg(arch, 10), 6).unwrap();
            let sc = SamplerConfig { max_warmup_len: 0, ..Default::default() };
            let out = inference_generate(&p, &[4, 8, 9], &sc, false, 6).unwrap();
            let ctx = warmup_context(arch, &[SEP], &[]);
            assert_eq!(out.target, greedy_decode(&p, &[4, 8, 9], &ctx, 6).unwrap());
            assert!(out.warmup.is_empty());
            assert_eq!(out.full.iter().filter(|&&t| t == SEP).count(), 1);
            assert_eq!(extract_target(&out.full).unwrap(), out.target);
        }
    }

    #[test]
    fn two_phase_inference_matches_stepwise_decoding() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let p = init_model::<f64>(&cfg(arch, 10), 8).unwrap();
            let sc = SamplerConfig { max_warmup_len: 3, ..Default::default() };
            let x = [5, 6, 9];
            let out = inference_generate(&p, &x, &sc, false, 6).unwrap();
            assert_eq!(out.warmup, greedy_warmup(&p, &x, 3).unwrap());
            let ctx = warmup_context(arch, &attach_separator(&out.warmup).unwrap(), &[]);
            assert_eq!(out.target, greedy_decode(&p, &x, &ctx, 6).unwrap());
            let sampled = inference_generate(&p, &x, &sc.with_seed(3), true, 6).unwrap();
            assert_eq!(sampled.full.iter().filter(|&&t| t == SEP).count(), 1);
        }
    }

    #[test]
    fn greedy_limits() {
        let p = init_model::<f64>(&cfg(Arch::DecoderOnly, 10), 6).unwrap();
        assert!(greedy_decode(&p, &[4], &[SEP], 0).unwrap().is_empty());
        let a = greedy_decode(&p, &[4], &[SEP], 5).unwrap();
        assert_eq!(a, greedy_decode(&p, &[4], &[SEP], 5).unwrap());
        assert!(a.len() <= 5 && a.iter().all(|&t| !is_reserved_in_output(t) && t != EOS));
    }

    #[test]
    fn forced_path_is_followed() {
        // Every block's output is zeroed and the hidden state becomes the
        // normalised one-hot position embedding, so out.w routes target
        // positions 0, 1, 2 to a, b, EOS.
        let mut p = init_model::<f64>(&cfg(Arch::DecoderOnly, 8), 1).unwrap();
        let names: Vec<alloc::string::String> = p.names().to_vec();
        for (name, t) in names.iter().zip(p.tensors_mut()) {
            let keep = name.ends_with(".g") || name == "pos_emb";
            if !keep {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            if name == "pos_emb" {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = if i % 8 == i / 8 { 1.0 } else { 0.0 };
                }
            }
            if name == "out.w" {
                let w = t.data_mut();
                w[4] = 10.0; // row 0, column 4
                w[8 + 5] = 10.0;
                w[2 * 8 + EOS as usize] = 10.0;
            }
        }
        assert_eq!(greedy_decode(&p, &[6], &[SEP], 5).unwrap(), vec![4, 5]);
        assert_eq!(greedy_decode(&p, &[6], &[SEP], 1).unwrap(), vec![4]);
    }
}
