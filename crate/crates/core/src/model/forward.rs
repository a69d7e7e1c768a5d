use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{warmup_context, Arch, BlockIndex, ModelConfig, Parameters, Stream, SEG_SOURCE};
use crate::tape::AttnMask;
use crate::vocab::{Token, BOS, EOS, PAD, SEP};
use crate::{Error, Real, Result, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Next-token support while generating a warmup: everything but PAD, BOS
/// and SEP (EOS stays in as the stop action).
pub fn warmup_support(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size as Token).map(|t| t != PAD && t != BOS && t != SEP).collect()
}

/// Encoder input for a source sequence: the symbols followed by EOS.
pub(crate) fn source_tokens(x: &[Token]) -> Vec<Token> {
    let mut s = Vec::with_capacity(x.len() + 1);
    s.extend_from_slice(x);
    s.push(EOS);
    s
}

/// Cross-attention keys/values of the encoder memory, one pair per
/// decoder layer, shared by every decoder pass over the same source.
#[derive(Debug, Clone)]
pub struct CrossKv {
    layers: Vec<(Var, Var)>,
    key_valid: Vec<bool>,
}

/// Taped terms of one `(x, c, y)` evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TargetTerms {
    /// `-Σ_t log P(y_t | x, c, SEP, y_<t)`.
    pub nll: Var,
    /// `log P(c | x)` under the warmup-generation measure, when requested.
    pub warmup_log_prob: Option<Var>,
}

/// Parameters bound to a tape, plus the optional dropout stream.
pub struct Net<'p, T: Real> {
    params: &'p Parameters<T>,
    vars: Vec<Var>,
    dropout: Option<ChaCha8Rng>,
}

impl<'p, T: Real> Net<'p, T> {
    pub fn bind(tape: &mut Tape<'p, T>, params: &'p Parameters<T>) -> Self {
        let vars = params.tensors().iter().map(|t| tape.param(t)).collect();
        Self { params, vars, dropout: None }
    }

    /// Enables dropout (at the configured rate) with the given stream.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        if self.params.config().dropout_rate > 0.0 {
            self.dropout = Some(rng);
        }
        self
    }

    pub fn config(&self) -> &'p ModelConfig {
        self.params.config()
    }

    /// Tape leaves of the parameters, in layout order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn dropout(&mut self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let rate = self.params.config().dropout_rate;
        let Some(rng) = self.dropout.as_mut() else { return Ok(x) };
        let keep = T::lit(1.0 / (1.0 - rate));
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let m = tape.leaf(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        let v = self.params.config().vocab_size;
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(t) => Err(Error::Index(format!("token {t} outside vocab of {v}"))),
            None => Ok(()),
        }
    }

    fn embed(&mut self, tape: &mut Tape<'p, T>, tokens: &[Token], segs: &[usize], pos: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let max = self.params.config().max_seq_len;
        if let Some(p) = pos.iter().find(|&&p| p >= max) {
            return Err(Error::Length(format!("segment position {p} exceeds max_seq_len {max}")));
        }
        let l = self.params.layout();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let t = tape.gather(self.v(l.tok), &ids)?;
        let p = tape.gather(self.v(l.pos), pos)?;
        let s = tape.gather(self.v(l.seg), segs)?;
        let tp = tape.add(t, p)?;
        let e = tape.add(tp, s)?;
        self.dropout(tape, e)
    }

    fn ln(&self, tape: &mut Tape<'p, T>, x: Var, (g, b): (usize, usize)) -> Result<Var> {
        tape.layer_norm(x, self.v(g), self.v(b), T::lit(LN_EPS))
    }

    fn mha(&self, tape: &mut Tape<'p, T>, q_in: Var, kv: (Var, Var), w: [usize; 4], mask: &AttnMask) -> Result<Var> {
        let q = tape.matmul(q_in, self.v(w[0]))?;
        let a = tape.attention(q, kv.0, kv.1, self.params.config().n_heads, mask)?;
        tape.matmul(a, self.v(w[3]))
    }

    fn block(
        &mut self,
        tape: &mut Tape<'p, T>,
        blk: &BlockIndex,
        x: Var,
        self_mask: &AttnMask,
        cross: Option<((Var, Var), &AttnMask)>,
    ) -> Result<Var> {
        let h = self.ln(tape, x, blk.ln1)?;
        let k = tape.matmul(h, self.v(blk.attn[1]))?;
        let v = tape.matmul(h, self.v(blk.attn[2]))?;
        let a = self.mha(tape, h, (k, v), blk.attn, self_mask)?;
        let a = self.dropout(tape, a)?;
        let mut x = tape.add(x, a)?;
        if let (Some((lnx, w)), Some((kv, mask))) = (blk.cross, cross) {
            let h = self.ln(tape, x, lnx)?;
            let a = self.mha(tape, h, kv, w, mask)?;
            let a = self.dropout(tape, a)?;
            x = tape.add(x, a)?;
        }
        let h = self.ln(tape, x, blk.ln2)?;
        let f = tape.linear(h, self.v(blk.w1), Some(self.v(blk.b1)))?;
        let f = tape.gelu(f);
        let f = tape.linear(f, self.v(blk.w2), Some(self.v(blk.b2)))?;
        let f = self.dropout(tape, f)?;
        tape.add(x, f)
    }

    /// Encoder memory for a raw token sequence. PAD keys are masked out.
    pub fn encode(&mut self, tape: &mut Tape<'p, T>, src: &[Token]) -> Result<Var> {
        let cfg = self.params.config();
        if cfg.arch != Arch::EncoderDecoder {
            return Err(Error::Arch("encode requires an encoder-decoder model".into()));
        }
        if src.is_empty() || src.len() > cfg.max_seq_len {
            return Err(Error::Length(format!("source length {} not in 1..={}", src.len(), cfg.max_seq_len)));
        }
        let pos: Vec<usize> = (0..src.len()).collect();
        let segs = vec![SEG_SOURCE; src.len()];
        let mut x = self.embed(tape, src, &segs, &pos)?;
        let mask = AttnMask { causal: false, offset: 0, key_valid: Some(src.iter().map(|&t| t != PAD).collect()) };
        let layout = self.params.layout();
        for blk in &layout.encoder {
            x = self.block(tape, blk, x, &mask, None)?;
        }
        self.ln(tape, x, layout.encoder_ln.expect("encoder-decoder has a final encoder norm"))
    }

    /// Projects encoder memory to per-layer cross-attention keys/values.
    pub fn cross_kv(&mut self, tape: &mut Tape<'p, T>, memory: Var, src: &[Token]) -> Result<CrossKv> {
        let layout = self.params.layout();
        let mut layers = Vec::with_capacity(layout.decoder.len());
        for blk in &layout.decoder {
            let (_, w) = blk.cross.ok_or_else(|| Error::Arch("decoder has no cross-attention".into()))?;
            let k = tape.matmul(memory, self.v(w[1]))?;
            let v = tape.matmul(memory, self.v(w[2]))?;
            layers.push((k, v));
        }
        Ok(CrossKv { layers, key_valid: src.iter().map(|&t| t != PAD).collect() })
    }

    /// Encodes `x ++ [EOS]` and returns its cross-attention projections.
    pub fn condition(&mut self, tape: &mut Tape<'p, T>, x: &[Token]) -> Result<Option<CrossKv>> {
        match self.params.config().arch {
            Arch::DecoderOnly => Ok(None),
            Arch::EncoderDecoder => {
                let src = source_tokens(x);
                let mem = self.encode(tape, &src)?;
                Ok(Some(self.cross_kv(tape, mem, &src)?))
            }
        }
    }

    /// Final-normed decoder states for every row of `stream`.
    pub fn decoder_hidden(&mut self, tape: &mut Tape<'p, T>, stream: &Stream, cross: Option<&CrossKv>) -> Result<Var> {
        let arch = self.params.config().arch;
        match (arch, cross) {
            (Arch::EncoderDecoder, None) => return Err(Error::Arch("encoder-decoder needs encoder memory".into())),
            (Arch::DecoderOnly, Some(_)) => return Err(Error::Arch("decoder-only takes no encoder memory".into())),
            _ => {}
        }
        let mut x = self.embed(tape, &stream.tokens, &stream.segs, &stream.pos)?;
        let self_mask = AttnMask { causal: true, offset: 0, key_valid: None };
        let cross_mask = cross.map(|c| AttnMask { causal: false, offset: 0, key_valid: Some(c.key_valid.clone()) });
        let layout = self.params.layout();
        for (i, blk) in layout.decoder.iter().enumerate() {
            let cr = match (cross, cross_mask.as_ref()) {
                (Some(c), Some(m)) => Some((c.layers[i], m)),
                _ => None,
            };
            x = self.block(tape, blk, x, &self_mask, cr)?;
        }
        self.ln(tape, x, layout.decoder_ln)
    }

    pub fn project(&mut self, tape: &mut Tape<'p, T>, hidden: Var) -> Result<Var> {
        let l = self.params.layout();
        tape.linear(hidden, self.v(l.out_w), Some(self.v(l.out_b)))
    }

    /// One forward pass over `[.., c, SEP, y_<T]` yielding the target NLL and,
    /// when `max_k` is given, `log P(c | x)` read off the same pass.
    pub fn target_terms(
        &mut self,
        tape: &mut Tape<'p, T>,
        x: &[Token],
        c: &[Token],
        y: &[Token],
        cross: Option<&CrossKv>,
        max_k: Option<usize>,
    ) -> Result<TargetTerms> {
        check_warmup(c, max_k)?;
        check_target(y)?;
        let arch = self.params.config().arch;
        let mut c_sep = Vec::with_capacity(c.len() + 1);
        c_sep.extend_from_slice(c);
        c_sep.push(SEP);
        let ctx = warmup_context(arch, &c_sep, &y[..y.len() - 1]);
        let stream = Stream::new(arch, x, &ctx)?;
        let hidden = self.decoder_hidden(tape, &stream, cross)?;

        let first = warmup_first_row(arch, x.len());
        let sep_row = first + c.len() + 1;
        let rows = tape.slice_rows(hidden, sep_row, y.len())?;
        let logits = self.project(tape, rows)?;
        let lp = tape.log_softmax(logits, None)?;
        let picks: Vec<(usize, usize)> = y.iter().enumerate().map(|(j, &t)| (j, t as usize)).collect();
        let ll = tape.pick_sum(lp, &picks)?;
        let nll = tape.scale(ll, -T::one());

        let warmup_log_prob = match max_k {
            None => None,
            Some(k_max) => Some(self.warmup_log_prob_from(tape, hidden, first, c, k_max)?),
        };
        Ok(TargetTerms { nll, warmup_log_prob })
    }

    fn warmup_log_prob_from(
        &mut self,
        tape: &mut Tape<'p, T>,
        hidden: Var,
        first: usize,
        c: &[Token],
        max_k: usize,
    ) -> Result<Var> {
        let stops = c.len() < max_k;
        let n_rows = c.len() + usize::from(stops);
        if n_rows == 0 {
            return Ok(tape.leaf(Tensor::scalar(T::zero())));
        }
        let rows = tape.slice_rows(hidden, first, n_rows)?;
        let logits = self.project(tape, rows)?;
        let support = warmup_support(self.params.config().vocab_size);
        let lp = tape.log_softmax(logits, Some(&support))?;
        let mut picks: Vec<(usize, usize)> = c.iter().enumerate().map(|(t, &tok)| (t, tok as usize)).collect();
        if stops {
            picks.push((c.len(), EOS as usize));
        }
        tape.pick_sum(lp, &picks)
    }

    /// `log P(c | x)` on its own forward pass over `[.., c]`.
    pub fn warmup_log_prob(
        &mut self,
        tape: &mut Tape<'p, T>,
        x: &[Token],
        c: &[Token],
        cross: Option<&CrossKv>,
        max_k: usize,
    ) -> Result<Var> {
        check_warmup(c, Some(max_k))?;
        let arch = self.params.config().arch;
        let ctx = warmup_context(arch, c, &[]);
        let stream = Stream::new(arch, x, &ctx)?;
        let hidden = self.decoder_hidden(tape, &stream, cross)?;
        self.warmup_log_prob_from(tape, hidden, warmup_first_row(arch, x.len()), c, max_k)
    }
}

/// Row whose output predicts the first warmup token.
fn warmup_first_row(arch: Arch, source_len: usize) -> usize {
    match arch {
        Arch::EncoderDecoder => 0,
        Arch::DecoderOnly => source_len - 1,
    }
}

fn check_warmup(c: &[Token], max_k: Option<usize>) -> Result<()> {
    if let Some(t) = c.iter().find(|&&t| matches!(t, PAD | BOS | SEP | EOS)) {
        return Err(Error::Contract(format!("warmup contains reserved token {t}")));
    }
    if let Some(k) = max_k {
        if c.len() > k {
            return Err(Error::Contract(format!("warmup length {} exceeds K = {k}", c.len())));
        }
    }
    Ok(())
}

fn check_target(y: &[Token]) -> Result<()> {
    if y.last() != Some(&EOS) {
        return Err(Error::Contract("target must end with EOS".into()));
    }
    if y[..y.len() - 1].iter().any(|&t| matches!(t, PAD | BOS | SEP | EOS)) {
        return Err(Error::Contract("target contains a reserved token before EOS".into()));
    }
    Ok(())
}

/// Strips the trailing separator, checking there is exactly one.
fn split_separator(c_with_sep: &[Token]) -> Result<&[Token]> {
    match c_with_sep.split_last() {
        Some((&SEP, c)) if !c.contains(&SEP) => Ok(c),
        _ => Err(Error::Contract("warmup must end with exactly one SEP".into())),
    }
}

/// Source for the decoder: encoder memory or, for decoder-only models, the
/// raw input prefix.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a, T> {
    Memory(&'a Tensor<T>, &'a [Token]),
    Prefix(&'a [Token]),
}

/// Encoder memory `[len(src)×d_model]` for a raw token sequence.
pub fn encode<T: Real>(params: &Parameters<T>, src: &[Token]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    let m = net.encode(&mut tape, src)?;
    Ok(tape.value(m).clone())
}

/// Logits for every row of the decoder stream. For decoder-only models the
/// stream is `x ++ context`, so rows cover the source too.
pub fn next_token_logits<T: Real>(
    params: &Parameters<T>,
    cond: Conditioning<'_, T>,
    context: &[Token],
) -> Result<Tensor<T>> {
    let arch = params.config().arch;
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    let (stream, cross) = match (arch, cond) {
        (Arch::EncoderDecoder, Conditioning::Memory(mem, src)) => {
            if mem.rows() != src.len() {
                return Err(Error::Shape("memory rows differ from source length".into()));
            }
            let m = tape.leaf(mem.clone());
            let cross = net.cross_kv(&mut tape, m, src)?;
            (Stream::new(arch, &[], context)?, Some(cross))
        }
        (Arch::DecoderOnly, Conditioning::Prefix(x)) => (Stream::new(arch, x, context)?, None),
        (Arch::EncoderDecoder, _) => return Err(Error::Arch("encoder-decoder needs encoder memory".into())),
        (Arch::DecoderOnly, _) => return Err(Error::Arch("decoder-only takes a source prefix, not memory".into())),
    };
    let h = net.decoder_hidden(&mut tape, &stream, cross.as_ref())?;
    let l = net.project(&mut tape, h)?;
    Ok(tape.value(l).clone())
}

/// `-Σ_t log P(y_t | x, c, SEP, y_<t)`; `c_with_sep` must end with its one SEP
/// and `y` with EOS.
pub fn conditional_target_nll<T: Real>(
    params: &Parameters<T>,
    x: &[Token],
    c_with_sep: &[Token],
    y: &[Token],
) -> Result<T> {
    let c = split_separator(c_with_sep)?;
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    let cross = net.condition(&mut tape, x)?;
    let terms = net.target_terms(&mut tape, x, c, y, cross.as_ref(), None)?;
    Ok(tape.scalar(terms.nll))
}

/// Plain sequence-to-sequence NLL: the empty-warmup case.
pub fn baseline_nll<T: Real>(params: &Parameters<T>, x: &[Token], y: &[Token]) -> Result<T> {
    conditional_target_nll(params, x, &[SEP], y)
}

/// `log P(c | x)`: per-step probabilities over the warmup support, times
/// the probability of stopping (EOS) unless `c` already has length `max_k`,
/// where stopping is forced.
pub fn sequence_log_prob<T: Real>(params: &Parameters<T>, x: &[Token], c: &[Token], max_k: usize) -> Result<T> {
    check_warmup(c, Some(max_k))?;
    if max_k == 0 {
        return Ok(T::zero());
    }
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, params);
    let cross = net.condition(&mut tape, x)?;
    let lp = net.warmup_log_prob(&mut tape, x, c, cross.as_ref(), max_k)?;
    Ok(tape.scalar(lp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use crate::model::init_model;
    use crate::tensor::cross_entropy;

    #[test]
    fn encode_shape_and_pad_invariance() {
        let p = init_model::<f64>(&tiny(Arch::EncoderDecoder), 1).unwrap();
        let m = encode(&p, &[4, 5, 6]).unwrap();
        assert_eq!(m.shape(), &[3, 8]);
        let padded = encode(&p, &[4, 5, 6, PAD, PAD]).unwrap();
        for i in 0..3 {
            for (a, b) in m.row(i).iter().zip(padded.row(i)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let swapped = encode(&p, &[5, 4, 6]).unwrap();
        assert_ne!(m, swapped);
    }

    #[test]
    fn encode_errors() {
        let p = init_model::<f64>(&tiny(Arch::DecoderOnly), 1).unwrap();
        assert!(matches!(encode(&p, &[4]), Err(Error::Arch(_))));
        let p = init_model::<f64>(&tiny(Arch::EncoderDecoder), 1).unwrap();
        assert!(matches!(encode(&p, &[4; 17]), Err(Error::Length(_))));
    }

    #[test]
    fn logits_are_causal() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let p = init_model::<f64>(&tiny(arch), 2).unwrap();
            let x = [4, 7, 5];
            let src = source_tokens(&x);
            let mem = encode(&p, &src).ok();
            let cond = match &mem {
                Some(m) => Conditioning::Memory(m, &src),
                None => Conditioning::Prefix(&x),
            };
            let ctx_a = warmup_context(arch, &[6, SEP], &[8, 9]);
            let mut ctx_b = ctx_a.clone();
            let last = ctx_b.len() - 1;
            ctx_b[last] = 4;
            let a = next_token_logits(&p, cond, &ctx_a).unwrap();
            let b = next_token_logits(&p, cond, &ctx_b).unwrap();
            assert_eq!(a.shape()[1], 10);
            for r in 0..a.rows() - 1 {
                assert_eq!(a.row(r), b.row(r));
            }
            assert_ne!(a.row(a.rows() - 1), b.row(b.rows() - 1));
        }
    }

    #[test]
    fn memory_arch_mismatch() {
        let p = init_model::<f64>(&tiny(Arch::EncoderDecoder), 1).unwrap();
        assert!(matches!(next_token_logits(&p, Conditioning::Prefix(&[4]), &[BOS]), Err(Error::Arch(_))));
        let p = init_model::<f64>(&tiny(Arch::DecoderOnly), 1).unwrap();
        let m = Tensor::zeros(&[1, 8]);
        assert!(matches!(next_token_logits(&p, Conditioning::Memory(&m, &[4]), &[]), Err(Error::Arch(_))));
    }

    #[test]
    fn nll_is_sum_of_per_position_cross_entropy() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let p = init_model::<f64>(&tiny(arch), 9).unwrap();
            let x = [4, 5, 9];
            let c = [7, 6];
            let y = [8, 4, EOS];
            let nll = conditional_target_nll(&p, &x, &[7, 6, SEP], &y).unwrap();
            let src = source_tokens(&x);
            let mem = encode(&p, &src).ok();
            let cond = match &mem {
                Some(m) => Conditioning::Memory(m, &src),
                None => Conditioning::Prefix(&x),
            };
            let mut oracle = 0.0;
            for j in 0..y.len() {
                let ctx = warmup_context(arch, &[c[0], c[1], SEP], &y[..j]);
                let logits = next_token_logits(&p, cond, &ctx).unwrap();
                let last = Tensor::new(vec![10], logits.row(logits.rows() - 1).to_vec()).unwrap();
                oracle += cross_entropy(&last, y[j] as usize).unwrap();
            }
            assert!((nll - oracle).abs() <= 1e-10, "{arch:?}: {nll} vs {oracle}");
        }
    }

    #[test]
    fn nll_contracts() {
        let p = init_model::<f64>(&tiny(Arch::DecoderOnly), 9).unwrap();
        assert!(matches!(conditional_target_nll(&p, &[4], &[5], &[6, EOS]), Err(Error::Contract(_))));
        assert!(matches!(conditional_target_nll(&p, &[4], &[SEP, SEP], &[6, EOS]), Err(Error::Contract(_))));
        assert!(matches!(conditional_target_nll(&p, &[4], &[SEP], &[6]), Err(Error::Contract(_))));
        let only_eos = conditional_target_nll(&p, &[4], &[SEP], &[EOS]).unwrap();
        assert!(only_eos >= 0.0);
    }

    #[test]
    fn log_prob_of_forced_stop() {
        let p = init_model::<f64>(&tiny(Arch::EncoderDecoder), 3).unwrap();
        assert_eq!(sequence_log_prob(&p, &[4], &[], 0).unwrap(), 0.0);
        assert!(sequence_log_prob(&p, &[4], &[5], 0).is_err());
        assert!(matches!(sequence_log_prob(&p, &[4], &[SEP], 2), Err(Error::Contract(_))));
        assert!(sequence_log_prob(&p, &[4], &[5, 6], 3).unwrap() <= 0.0);
    }
}
