//! Corpus metrics over token sequences.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::decoding::{inference_generate, GenerationOutput, SamplerConfig};
use crate::model::Parameters;
use crate::tasks::{Example, TaskKind};
use crate::vocab::{Token, Vocab};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub bleu: f64,
    pub chrf: f64,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none", default))]
    pub macro_f1: Option<f64>,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none", default))]
    pub accuracy: Option<f64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = ["exact_match", "token_accuracy", "bleu", "chrf", "macro_f1", "accuracy"];

    pub fn get(&self, name: &str) -> Result<f64> {
        let v = match name {
            "exact_match" => Some(self.exact_match),
            "token_accuracy" => Some(self.token_accuracy),
            "bleu" => Some(self.bleu),
            "chrf" => Some(self.chrf),
            "macro_f1" => self.macro_f1,
            "accuracy" => self.accuracy,
            _ => return Err(Error::Config(format!("unknown metric {name:?}"))),
        };
        v.ok_or_else(|| Error::Config(format!("metric {name} is only reported for choice tasks")))
    }
}

fn check_corpus(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

pub fn exact_match(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / hyps.len() as f64)
}

/// Positionwise matches over the shorter length, divided by the longer one.
pub fn token_accuracy(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let longest = h.len().max(r.len());
            if longest == 0 {
                return 1.0;
            }
            h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / longest as f64
        })
        .sum();
    Ok(total / hyps.len() as f64)
}

fn ngram_counts<K: Ord + Clone>(seq: &[K], n: usize) -> BTreeMap<&[K], usize> {
    let mut m = BTreeMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, hypothesis n-grams, reference n-grams)`.
fn ngram_stats<K: Ord + Clone>(h: &[K], r: &[K], n: usize) -> (usize, usize, usize) {
    let hc = ngram_counts(h, n);
    let rc = ngram_counts(r, n);
    let matched = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    (matched, h.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1))
}

/// Corpus BLEU (0..100) up to 4-grams. Every order's precision is smoothed
/// as `(matches + 1) / (total + 1)`; the brevity penalty uses corpus lengths.
pub fn corpus_bleu(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut m, mut t) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (mm, tt, _) = ngram_stats(h, r, n);
            m += mm;
            t += tt;
        }
        log_p += Float::ln((m as f64 + 1.0) / (t as f64 + 1.0));
    }
    let bp = if hyp_len >= ref_len { 1.0 } else { Float::exp(1.0 - ref_len as f64 / hyp_len as f64) };
    Ok(100.0 * bp * Float::exp(log_p / 4.0))
}

fn spell(vocab: &Vocab, seq: &[Token]) -> Vec<char> {
    seq.iter().flat_map(|&t| vocab.name(t).unwrap_or("?").chars()).collect()
}

/// chrF with β = 2 over symbol-name character n-grams (n = 1..6) plus token
/// unigrams, from corpus-level counts. Precision and recall are averaged
/// over the orders for which they are defined, then combined.
pub fn corpus_chrf(hyps: &[Vec<Token>], refs: &[Vec<Token>], vocab: &Vocab) -> Result<f64> {
    check_corpus(hyps, refs)?;
    // [matches, hyp total, ref total] per order; index 6 is the token unigram
    let mut stats = [[0usize; 3]; 7];
    for (h, r) in hyps.iter().zip(refs) {
        let (hc, rc) = (spell(vocab, h), spell(vocab, r));
        for n in 1..=6 {
            let (m, th, tr) = ngram_stats(&hc, &rc, n);
            stats[n - 1][0] += m;
            stats[n - 1][1] += th;
            stats[n - 1][2] += tr;
        }
        let (m, th, tr) = ngram_stats(h, r, 1);
        stats[6][0] += m;
        stats[6][1] += th;
        stats[6][2] += tr;
    }
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0, 0.0, 0);
    for [m, th, tr] in stats {
        if th > 0 {
            p_sum += m as f64 / th as f64;
            p_n += 1;
        }
        if tr > 0 {
            r_sum += m as f64 / tr as f64;
            r_n += 1;
        }
    }
    if p_n == 0 && r_n == 0 {
        return Ok(100.0);
    }
    let p = if p_n > 0 { p_sum / p_n as f64 } else { 0.0 };
    let r = if r_n > 0 { r_sum / r_n as f64 } else { 0.0 };
    let beta2 = 4.0;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + beta2) * p * r / (beta2 * p + r))
}

/// `(macro F1, accuracy)` over single-token labels. A prediction's label is
/// its first token; an empty prediction matches no class.
pub fn choice_scores(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<(f64, f64)> {
    check_corpus(hyps, refs)?;
    let mut classes = BTreeSet::new();
    let pairs: Vec<(Option<Token>, Option<Token>)> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| (h.first().copied(), r.first().copied()))
        .inspect(|(h, r)| {
            classes.extend(h.iter().chain(r.iter()).copied());
        })
        .collect();
    let correct = pairs.iter().filter(|(h, r)| h.is_some() && h == r).count();
    let mut f1_sum = 0.0;
    for &c in &classes {
        let tp = pairs.iter().filter(|(h, r)| *h == Some(c) && *r == Some(c)).count();
        let fp = pairs.iter().filter(|(h, r)| *h == Some(c) && *r != Some(c)).count();
        let fneg = pairs.iter().filter(|(h, r)| *h != Some(c) && *r == Some(c)).count();
        let denom = 2 * tp + fp + fneg;
        f1_sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    let macro_f1 = if classes.is_empty() { 0.0 } else { f1_sum / classes.len() as f64 };
    Ok((macro_f1, correct as f64 / pairs.len() as f64))
}

/// All metrics for a corpus of generated targets.
pub fn score(hyps: &[Vec<Token>], refs: &[Vec<Token>], kind: TaskKind, vocab: &Vocab) -> Result<MetricReport> {
    let choice = if kind.is_choice() { Some(choice_scores(hyps, refs)?) } else { None };
    Ok(MetricReport {
        exact_match: exact_match(hyps, refs)?,
        token_accuracy: token_accuracy(hyps, refs)?,
        bleu: corpus_bleu(hyps, refs)?,
        chrf: corpus_chrf(hyps, refs, vocab)?,
        macro_f1: choice.map(|c| c.0),
        accuracy: choice.map(|c| c.1),
    })
}

/// Runs two-phase inference on every example and scores the targets.
/// Returns the report together with the generations, in example order.
pub fn evaluate<T: Real>(
    params: &Parameters<T>,
    examples: &[Example],
    kind: TaskKind,
    vocab: &Vocab,
    sampler: &SamplerConfig,
    max_target_len: usize,
) -> Result<(MetricReport, Vec<GenerationOutput>)> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluate needs at least one example".into()));
    }
    let outputs = examples
        .iter()
        .map(|e| inference_generate(params, &e.source, sampler, false, max_target_len))
        .collect::<Result<Vec<_>>>()?;
    let hyps: Vec<Vec<Token>> = outputs.iter().map(|o| o.target.clone()).collect();
    let refs: Vec<Vec<Token>> = examples.iter().map(|e| e.target.clone()).collect();
    Ok((score(&hyps, &refs, kind, vocab)?, outputs))
}

/// Percentage of distinct warmup tokens that occur in the reference,
/// averaged over pairs with a non-empty warmup.
pub fn overlap_rate(pairs: &[(Vec<Token>, Vec<Token>)]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (warmup, reference) in pairs {
        let types: BTreeSet<Token> = warmup.iter().copied().collect();
        if types.is_empty() {
            continue;
        }
        let hit = types.iter().filter(|t| reference.contains(t)).count();
        sum += hit as f64 / types.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("overlap_rate needs at least one non-empty warmup".into()));
    }
    Ok(100.0 * sum / n as f64)
}

/// Human-readable one-line summary.
pub fn summary_line(r: &MetricReport) -> String {
    let mut s = format!(
        "exact_match={:.4} token_accuracy={:.4} bleu={:.2} chrf={:.2}",
        r.exact_match, r.token_accuracy, r.bleu, r.chrf
    );
    if let (Some(f), Some(a)) = (r.macro_f1, r.accuracy) {
        s.push_str(&format!(" macro_f1={f:.4} accuracy={a:.4}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn bleu_hand_computation() {
        // p1..p4 = 4/5, 3/4, 2/3, 1/2; no brevity penalty.
        let b = corpus_bleu(&[vec![4, 5, 6, 7]], &[vec![4, 5, 6, 8]]).unwrap();
        let expected = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 66.874_030_497_642_2).abs() < 1e-9);
    }

    #[test]
    fn identical_and_disjoint_corpora() {
        let v = Vocab::new(12).unwrap();
        let refs = vec![vec![4, 5, 6], vec![7, 8]];
        let r = score(&refs, &refs, TaskKind::Copy, &v).unwrap();
        assert_eq!((r.exact_match, r.token_accuracy), (1.0, 1.0));
        assert!((r.bleu - 100.0).abs() < 1e-12 && (r.chrf - 100.0).abs() < 1e-12);
        assert!(r.macro_f1.is_none());
        let other = vec![vec![9, 10, 11], vec![10, 9]];
        let r = score(&other, &refs, TaskKind::Copy, &v).unwrap();
        assert_eq!(r.exact_match, 0.0);
        assert!(r.bleu < 40.0 && r.chrf == 0.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = corpus_bleu(&[vec![4, 5]], &[vec![4, 5, 6, 7]]).unwrap();
        let p = (3.0f64 / 3.0 * 2.0 / 2.0 * 1.0 / 1.0 * 1.0 / 1.0).powf(0.25);
        assert!((b - 100.0 * (1.0f64 - 2.0).exp() * p).abs() < 1e-9);
    }

    #[test]
    fn token_accuracy_penalises_length() {
        assert_eq!(token_accuracy(&[vec![4, 5]], &[vec![4, 5, 6, 7]]).unwrap(), 0.5);
        assert_eq!(token_accuracy(&[vec![]], &[vec![]]).unwrap(), 1.0);
    }

    #[test]
    fn choice_metrics() {
        let (f1, acc) = choice_scores(&[vec![4], vec![5], vec![4], vec![]], &[vec![4], vec![4], vec![4], vec![5]]).unwrap();
        assert_eq!(acc, 0.5);
        // class 4: tp 2, fp 0, fn 1 -> 0.8; class 5: tp 0, fp 1, fn 1 -> 0
        assert!((f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_rate(&[(vec![4, 5], vec![5, 4, 6])]).unwrap(), 100.0);
        assert_eq!(overlap_rate(&[(vec![4, 5], vec![6])]).unwrap(), 0.0);
        assert_eq!(overlap_rate(&[(vec![4, 5, 6, 7], vec![4, 5, 9]), (vec![], vec![4])]).unwrap(), 50.0);
        assert!(overlap_rate(&[(vec![], vec![4])]).is_err());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(corpus_bleu(&[], &[]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn self_score_is_maximal_and_order_invariant(
            corpus in proptest::collection::vec(proptest::collection::vec(4u32..10, 1..6), 1..6),
            other in proptest::collection::vec(proptest::collection::vec(4u32..10, 0..6), 6),
        ) {
            let v = Vocab::new(10).unwrap();
            let hyps: Vec<Vec<Token>> = other[..corpus.len()].to_vec();
            let best = corpus_bleu(&corpus, &corpus).unwrap();
            prop_assert!(corpus_bleu(&hyps, &corpus).unwrap() <= best + 1e-9);
            prop_assert!(corpus_chrf(&hyps, &corpus, &v).unwrap() <= corpus_chrf(&corpus, &corpus, &v).unwrap() + 1e-9);
            let mut rh = hyps.clone();
            let mut rr = corpus.clone();
            rh.reverse();
            rr.reverse();
            prop_assert!((corpus_bleu(&hyps, &corpus).unwrap() - corpus_bleu(&rh, &rr).unwrap()).abs() < 1e-9);
            prop_assert!((corpus_chrf(&hyps, &corpus, &v).unwrap() - corpus_chrf(&rh, &rr, &v).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn overlap_ignores_order_and_duplicates(w in proptest::collection::vec(4u32..9, 1..6), r in proptest::collection::vec(4u32..9, 0..6)) {
            let base = overlap_rate(&[(w.clone(), r.clone())]).unwrap();
            let mut shuffled = w.clone();
            shuffled.reverse();
            shuffled.extend_from_slice(&w);
            prop_assert_eq!(base, overlap_rate(&[(shuffled, r)]).unwrap());
        }
    }
}
