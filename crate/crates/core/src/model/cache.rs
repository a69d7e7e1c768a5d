use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::forward::source_tokens;
use super::{encode, Arch, Parameters, SEG_SOURCE, SEG_TARGET, SEG_WARMUP};
use crate::kernels::{self, AttnMask};
use crate::vocab::{Token, BOS, PAD, SEP};
use crate::{Error, Real, Result};

#[derive(Debug)]
struct CrossCache<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
    mask: AttnMask,
    n: usize,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
}

/// Incremental no-gradient decoder with a key/value cache.
///
/// After [`Session::start`] the session has consumed the source (and BOS for
/// encoder-decoder models); [`Session::logits`] is the next-token
/// distribution and [`Session::push`] feeds one more token. Cloning forks
/// the decoder state; encoder projections are shared.
#[derive(Debug, Clone)]
pub struct Session<'p, T: Real> {
    params: &'p Parameters<T>,
    cross: Option<Rc<CrossCache<T>>>,
    layers: Vec<LayerCache<T>>,
    len: usize,
    segment: usize,
    seg_pos: usize,
    logits: Vec<T>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn start(params: &'p Parameters<T>, x: &[Token]) -> Result<Self> {
        let cfg = params.config();
        let layers = vec![LayerCache { keys: Vec::new(), values: Vec::new() }; cfg.n_layers_decoder];
        let mut s = Self { params, cross: None, layers, len: 0, segment: SEG_SOURCE, seg_pos: 0, logits: Vec::new() };
        match cfg.arch {
            Arch::EncoderDecoder => {
                let src = source_tokens(x);
                let mem = encode(params, &src)?;
                let d = cfg.d_model;
                let n = src.len();
                let t = params.tensors();
                let layers = params
                    .layout()
                    .decoder
                    .iter()
                    .map(|blk| {
                        let (_, w) = blk.cross.expect("encoder-decoder blocks have cross-attention");
                        (
                            kernels::matmul(mem.data(), t[w[1]].data(), n, d, d),
                            kernels::matmul(mem.data(), t[w[2]].data(), n, d, d),
                        )
                    })
                    .collect();
                let mask = AttnMask { causal: false, offset: 0, key_valid: Some(src.iter().map(|&t| t != PAD).collect()) };
                s.cross = Some(Rc::new(CrossCache { layers, mask, n }));
                s.segment = SEG_WARMUP;
                s.step(BOS)?;
            }
            Arch::DecoderOnly => {
                if x.is_empty() {
                    return Err(Error::Contract("decoder-only decoding needs a non-empty source".into()));
                }
                for &t in x {
                    s.step(t)?;
                }
                s.segment = SEG_WARMUP;
                s.seg_pos = 0;
            }
        }
        Ok(s)
    }

    /// Logits for the next token.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Tokens consumed so far on the decoder side (source included for
    /// decoder-only models).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// How many more tokens the current segment's position table can take.
    pub fn remaining(&self) -> usize {
        self.params.config().max_seq_len.saturating_sub(self.seg_pos)
    }

    /// True once a separator has been consumed.
    pub fn in_target(&self) -> bool {
        self.segment == SEG_TARGET
    }

    /// Feeds one token. The first SEP after the source opens the target segment.
    pub fn push(&mut self, token: Token) -> Result<()> {
        if token == SEP && self.segment == SEG_WARMUP {
            self.segment = SEG_TARGET;
            self.seg_pos = 0;
        }
        self.step(token)
    }

    fn step(&mut self, token: Token) -> Result<()> {
        let p = self.params;
        let cfg = p.config();
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        if token as usize >= v {
            return Err(Error::Index(alloc::format!("token {token} outside vocab of {v}")));
        }
        if self.seg_pos >= cfg.max_seq_len {
            return Err(Error::Length(alloc::format!("segment position {} exceeds max_seq_len", self.seg_pos)));
        }
        let t = p.tensors();
        let l = p.layout();
        let tok = t[l.tok].row(token as usize);
        let pos = t[l.pos].row(self.seg_pos);
        let seg = t[l.seg].row(self.segment);
        let mut x: Vec<T> = tok.iter().zip(pos).zip(seg).map(|((&a, &b), &c)| (a + b) + c).collect();
        let n = self.len + 1;
        let heads = cfg.n_heads;
        let all = AttnMask::default();
        let mut h = vec![T::zero(); d];

        for (li, blk) in l.decoder.iter().enumerate() {
            kernels::layer_norm_row(&x, t[blk.ln1.0].data(), t[blk.ln1.1].data(), T::lit(1e-5), &mut h);
            let q = kernels::vecmat(&h, t[blk.attn[0]].data(), d, d);
            let k = kernels::vecmat(&h, t[blk.attn[1]].data(), d, d);
            let vv = kernels::vecmat(&h, t[blk.attn[2]].data(), d, d);
            let cache = &mut self.layers[li];
            cache.keys.extend_from_slice(&k);
            cache.values.extend_from_slice(&vv);
            let (a, _) = kernels::attention(&q, &cache.keys, &cache.values, 1, n, d, heads, &all);
            let o = kernels::vecmat(&a, t[blk.attn[3]].data(), d, d);
            for (xi, oi) in x.iter_mut().zip(o) {
                *xi = *xi + oi;
            }
            if let (Some((lnx, w)), Some(cross)) = (blk.cross, self.cross.as_ref()) {
                kernels::layer_norm_row(&x, t[lnx.0].data(), t[lnx.1].data(), T::lit(1e-5), &mut h);
                let q = kernels::vecmat(&h, t[w[0]].data(), d, d);
                let (ck, cv) = &cross.layers[li];
                let (a, _) = kernels::attention(&q, ck, cv, 1, cross.n, d, heads, &cross.mask);
                let o = kernels::vecmat(&a, t[w[3]].data(), d, d);
                for (xi, oi) in x.iter_mut().zip(o) {
                    *xi = *xi + oi;
                }
            }
            kernels::layer_norm_row(&x, t[blk.ln2.0].data(), t[blk.ln2.1].data(), T::lit(1e-5), &mut h);
            let mut f = kernels::vecmat(&h, t[blk.w1].data(), d, cfg.d_ff);
            for (fi, &b) in f.iter_mut().zip(t[blk.b1].data()) {
                *fi = kernels::gelu(*fi + b);
            }
            let f2 = kernels::vecmat(&f, t[blk.w2].data(), cfg.d_ff, d);
            for ((xi, fi), &b) in x.iter_mut().zip(f2).zip(t[blk.b2].data()) {
                *xi = *xi + (fi + b);
            }
        }
        kernels::layer_norm_row(&x, t[l.decoder_ln.0].data(), t[l.decoder_ln.1].data(), T::lit(1e-5), &mut h);
        let mut logits = kernels::vecmat(&h, t[l.out_w].data(), d, v);
        for (o, &b) in logits.iter_mut().zip(t[l.out_b].data()) {
            *o = *o + b;
        }
        self.logits = logits;
        self.len = n;
        self.seg_pos += 1;
        Ok(())
    }
}
