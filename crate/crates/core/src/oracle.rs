//! Exact expectations over every warmup of length `<= K`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::decoding::attach_separator;
use crate::model::{conditional_target_nll, sequence_log_prob, Net, Parameters};
use crate::vocab::{Token, FIRST_SYMBOL};
use crate::{Error, Result, Tape, Tensor};

/// Largest symbol count and warmup length enumerated without an override.
pub const MAX_ENUM_SYMBOLS: usize = 8;
pub const MAX_ENUM_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpectationReport {
    /// `E_c[P(y | c, x)]`.
    pub exact_expected_prob: f64,
    /// `E_c[-log P(y | c, x)]`.
    pub exact_expected_nll: f64,
    /// `-log E_c[P(y | c, x)]`.
    pub neg_log_expected_prob: f64,
    pub jensen_gap: f64,
    /// `Σ_c P(c | x)`; one up to rounding.
    pub mass: f64,
    pub n_warmups: usize,
}

/// `P(y | c, x)`, computed as `exp(-NLL)`.
pub fn reward(params: &Parameters<f64>, x: &[Token], c: &[Token], y: &[Token]) -> Result<f64> {
    Ok(Float::exp(-conditional_target_nll(params, x, &attach_separator(c)?, y)?))
}

/// Every warmup of length `0..=k` over `symbols` symbols, shortest first.
pub fn all_warmups(symbols: usize, k: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..k {
        let mut next = Vec::with_capacity(frontier.len() * symbols);
        for prefix in &frontier {
            for s in 0..symbols {
                let mut c: Vec<Token> = prefix.clone();
                c.push(FIRST_SYMBOL + s as Token);
                next.push(c);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn guard(params: &Parameters<f64>, max_k: usize, allow_large: bool) -> Result<usize> {
    let symbols = params.config().vocab_size - FIRST_SYMBOL as usize;
    if !allow_large && (symbols > MAX_ENUM_SYMBOLS || max_k > MAX_ENUM_K) {
        return Err(Error::Cost(format!(
            "enumeration over {symbols} symbols with K = {max_k} exceeds {MAX_ENUM_SYMBOLS} symbols / K = {MAX_ENUM_K}"
        )));
    }
    Ok(symbols)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + Float::ln(v.iter().map(|&a| Float::exp(a - max)).sum::<f64>())
}

/// Exact `E_c` statistics of the target likelihood. `y` ends with EOS.
pub fn enumerate_expectation(
    params: &Parameters<f64>,
    x: &[Token],
    y: &[Token],
    max_k: usize,
    allow_large: bool,
) -> Result<ExpectationReport> {
    let symbols = guard(params, max_k, allow_large)?;
    let warmups = all_warmups(symbols, max_k);
    let mut log_pc = Vec::with_capacity(warmups.len());
    let mut nll = Vec::with_capacity(warmups.len());
    for c in &warmups {
        log_pc.push(sequence_log_prob(params, x, c, max_k)?);
        nll.push(conditional_target_nll(params, x, &attach_separator(c)?, y)?);
    }
    let mass: f64 = log_pc.iter().map(|&l| Float::exp(l)).sum();
    let expected_nll: f64 = log_pc.iter().zip(&nll).map(|(&l, &n)| Float::exp(l) * n).sum();
    let joint: Vec<f64> = log_pc.iter().zip(&nll).map(|(&l, &n)| l - n).collect();
    let log_expected_prob = log_sum_exp(&joint);
    Ok(ExpectationReport {
        exact_expected_prob: Float::exp(log_expected_prob),
        exact_expected_nll: expected_nll,
        neg_log_expected_prob: -log_expected_prob,
        jensen_gap: expected_nll + log_expected_prob,
        mass,
        n_warmups: warmups.len(),
    })
}

/// `E_c[-log P(y | c, x)] = Σ_c P(c | x) · NLL(c)` and its exact gradient
/// with respect to every parameter array (layout order).
pub fn expected_nll_gradient(
    params: &Parameters<f64>,
    x: &[Token],
    y: &[Token],
    max_k: usize,
    allow_large: bool,
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let symbols = guard(params, max_k, allow_large)?;
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    let cross = net.condition(&mut tape, x)?;
    let mut total = None;
    for c in all_warmups(symbols, max_k) {
        let terms = net.target_terms(&mut tape, x, &c, y, cross.as_ref(), Some(max_k))?;
        let lp = terms.warmup_log_prob.expect("requested");
        let p = tape.exp(lp);
        let term = tape.mul(p, terms.nll)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let root = total.expect("the empty warmup is always enumerated");
    let mut grads = tape.backward(root)?;
    let value = tape.scalar(root);
    Ok((value, net.vars().iter().map(|&v| grads.take(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{baseline_nll, init_model, Arch, ModelConfig};
    use crate::vocab::EOS;

    fn tiny(arch: Arch, vocab: usize, seed: u64) -> Parameters<f64> {
        let cfg = ModelConfig {
            arch,
            vocab_size: vocab,
            d_model: 4,
            n_heads: 1,
            n_layers_encoder: usize::from(arch == Arch::EncoderDecoder),
            n_layers_decoder: 1,
            d_ff: 4,
            max_seq_len: 10,
            dropout_rate: 0.0,
        };
        init_model(&cfg, seed).unwrap()
    }

    #[test]
    fn warmup_enumeration_counts() {
        assert_eq!(all_warmups(3, 2).len(), 1 + 3 + 9);
        assert_eq!(all_warmups(5, 0), vec![Vec::<Token>::new()]);
    }

    #[test]
    fn k0_has_no_gap() {
        let p = tiny(Arch::EncoderDecoder, 7, 1);
        let y = [5, 6, EOS];
        let r = enumerate_expectation(&p, &[4, 6], &y, 0, false).unwrap();
        let base = baseline_nll(&p, &[4, 6], &y).unwrap();
        assert_eq!(r.jensen_gap, 0.0);
        assert_eq!(r.exact_expected_nll, base);
        assert_eq!(r.neg_log_expected_prob, base);
    }

    #[test]
    fn mass_and_gap() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let p = tiny(arch, 7, 2);
            let r = enumerate_expectation(&p, &[4, 5, 6], &[6, EOS], 2, false).unwrap();
            assert!((r.mass - 1.0).abs() < 1e-9);
            assert!(r.jensen_gap > 0.0);
            assert!(r.exact_expected_prob > 0.0 && r.exact_expected_prob <= 1.0);
            assert_eq!(r.n_warmups, 13);
        }
    }

    #[test]
    fn rewards_reproduce_expected_prob() {
        let p = tiny(Arch::DecoderOnly, 7, 3);
        let (x, y) = ([5, 4], [4, 4, EOS]);
        let r = enumerate_expectation(&p, &x, &y, 2, false).unwrap();
        let mut sum = 0.0;
        for c in all_warmups(3, 2) {
            let w = reward(&p, &x, &c, &y).unwrap();
            assert!(w > 0.0 && w <= 1.0);
            sum += sequence_log_prob(&p, &x, &c, 2).unwrap().exp() * w;
        }
        assert!((sum - r.exact_expected_prob).abs() < 1e-10);
    }

    #[test]
    fn cost_guard() {
        let p = tiny(Arch::DecoderOnly, 14, 3);
        assert!(matches!(enumerate_expectation(&p, &[4], &[EOS], 1, false), Err(Error::Cost(_))));
        assert!(enumerate_expectation(&p, &[4], &[EOS], 1, true).is_ok());
        let p = tiny(Arch::DecoderOnly, 6, 3);
        assert!(matches!(enumerate_expectation(&p, &[4], &[EOS], 4, false), Err(Error::Cost(_))));
    }

    #[test]
    fn expected_nll_gradient_matches_finite_differences() {
        let p = tiny(Arch::EncoderDecoder, 6, 4);
        let (x, y) = ([4, 5], [5, EOS]);
        let (value, grads) = expected_nll_gradient(&p, &x, &y, 2, false).unwrap();
        let r = enumerate_expectation(&p, &x, &y, 2, false).unwrap();
        assert!((value - r.exact_expected_nll).abs() < 1e-12);
        let h = 1e-5;
        for (ti, g) in grads.iter().enumerate() {
            for i in (0..g.len()).step_by(3) {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[i] -= h;
                let fp = enumerate_expectation(&plus, &x, &y, 2, false).unwrap().exact_expected_nll;
                let fm = enumerate_expectation(&minus, &x, &y, 2, false).unwrap().exact_expected_nll;
                let fd = (fp - fm) / (2.0 * h);
                let err = crate::gradcheck::relative_error(g.data()[i], fd);
                assert!(err < 1e-5 || (g.data()[i] - fd).abs() < 1e-9, "{} [{i}]: {} vs {fd}", p.names()[ti], g.data()[i]);
            }
        }
    }
}
