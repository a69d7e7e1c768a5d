//! Tiny pre-layer-norm transformer in encoder-decoder and decoder-only form.
//!
//! Token streams are split into three segments: source (`x`), warmup
//! (`BOS`/`c`) and target (`SEP`, `y`). Each token embeds as
//! `tok + pos + seg`, where `pos` counts from zero inside its segment.

mod cache;
mod forward;
mod params;

pub use cache::Session;
pub use forward::{
    baseline_nll, conditional_target_nll, encode, next_token_logits, sequence_log_prob, warmup_support,
    Conditioning, Net, TargetTerms,
};
pub use params::{init_model, BlockIndex, Layout, Parameters};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::vocab::{Token, BOS, SEP};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Arch {
    EncoderDecoder,
    DecoderOnly,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::EncoderDecoder => "encoder-decoder",
            Arch::DecoderOnly => "decoder-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder-decoder" => Ok(Arch::EncoderDecoder),
            "decoder-only" => Ok(Arch::DecoderOnly),
            _ => Err(Error::Config(format!("unknown arch {s:?}"))),
        }
    }
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_encoder: usize,
    pub n_layers_decoder: usize,
    pub d_ff: usize,
    /// Longest segment (source, warmup or target stream) the position table covers.
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= crate::vocab::FIRST_SYMBOL as usize {
            return bad(format!("vocab_size {} leaves no symbols", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers_decoder == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("n_layers_decoder, d_ff and max_seq_len must be positive".into());
        }
        match self.arch {
            Arch::DecoderOnly if self.n_layers_encoder != 0 => {
                return bad("decoder-only requires n_layers_encoder = 0".into())
            }
            Arch::EncoderDecoder if self.n_layers_encoder == 0 => {
                return bad("encoder-decoder requires n_layers_encoder > 0".into())
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv_text(&self) -> String {
        format!(
            "arch={}\nvocab_size={}\nd_model={}\nn_heads={}\nn_layers_encoder={}\nn_layers_decoder={}\nd_ff={}\nmax_seq_len={}\ndropout_rate={}\n",
            self.arch.as_str(),
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers_encoder,
            self.n_layers_decoder,
            self.d_ff,
            self.max_seq_len,
            self.dropout_rate
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv: Vec<(&str, &str)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line without '=': {line:?}")))?;
            kv.push((k.trim(), v.trim()));
        }
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Config(format!("missing model key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Config(format!("bad integer for {key}")))
        };
        const KNOWN: [&str; 9] = [
            "arch",
            "vocab_size",
            "d_model",
            "n_heads",
            "n_layers_encoder",
            "n_layers_decoder",
            "d_ff",
            "max_seq_len",
            "dropout_rate",
        ];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KNOWN.contains(k)) {
            return Err(Error::Config(format!("unknown model key {k}")));
        }
        let cfg = Self {
            arch: Arch::parse(get("arch")?)?,
            vocab_size: num("vocab_size")?,
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            n_layers_encoder: num("n_layers_encoder")?,
            n_layers_decoder: num("n_layers_decoder")?,
            d_ff: num("d_ff")?,
            max_seq_len: num("max_seq_len")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::Config("bad float for dropout_rate".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) const SEG_SOURCE: usize = 0;
pub(crate) const SEG_WARMUP: usize = 1;
pub(crate) const SEG_TARGET: usize = 2;
pub(crate) const N_SEGMENTS: usize = 3;

/// Decoder-side token stream with segment and position ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    pub tokens: Vec<Token>,
    pub segs: Vec<usize>,
    pub pos: Vec<usize>,
    /// Length of the source prefix inside `tokens` (decoder-only), else 0.
    pub source_len: usize,
}

impl Stream {
    /// Lays out `x ++ context` (decoder-only) or `context` (encoder-decoder).
    /// Tokens before the first `SEP` of `context` form the warmup segment;
    /// `SEP` and everything after it form the target segment.
    pub fn new(arch: Arch, x: &[Token], context: &[Token]) -> Result<Self> {
        let mut s = Stream { tokens: Vec::new(), segs: Vec::new(), pos: Vec::new(), source_len: 0 };
        match arch {
            Arch::DecoderOnly => {
                if x.is_empty() {
                    return Err(Error::Contract("decoder-only context needs a non-empty source".into()));
                }
                for (i, &t) in x.iter().enumerate() {
                    s.tokens.push(t);
                    s.segs.push(SEG_SOURCE);
                    s.pos.push(i);
                }
                s.source_len = x.len();
            }
            Arch::EncoderDecoder => {
                if context.first() != Some(&BOS) {
                    return Err(Error::Contract("encoder-decoder decoder input must start with BOS".into()));
                }
            }
        }
        let mut seg = SEG_WARMUP;
        let mut p = 0;
        for &t in context {
            if t == SEP && seg == SEG_WARMUP {
                seg = SEG_TARGET;
                p = 0;
            }
            s.tokens.push(t);
            s.segs.push(seg);
            s.pos.push(p);
            p += 1;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Decoder context for a warmup `c` followed by `SEP` and a target prefix.
pub fn warmup_context(arch: Arch, c_with_sep: &[Token], y_prefix: &[Token]) -> Vec<Token> {
    let mut ctx = Vec::with_capacity(c_with_sep.len() + y_prefix.len() + 1);
    if arch == Arch::EncoderDecoder {
        ctx.push(BOS);
    }
    ctx.extend_from_slice(c_with_sep);
    ctx.extend_from_slice(y_prefix);
    ctx
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::vocab::EOS;

    pub(crate) fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers_encoder: if arch == Arch::EncoderDecoder { 1 } else { 0 },
            n_layers_decoder: 1,
            d_ff: 12,
            max_seq_len: 16,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Arch::DecoderOnly);
        assert!(c.validate().is_ok());
        c.n_layers_encoder = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny(Arch::EncoderDecoder);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_text_round_trip() {
        let c = tiny(Arch::EncoderDecoder);
        assert_eq!(ModelConfig::from_kv_text(&c.to_kv_text()).unwrap(), c);
        assert!(ModelConfig::from_kv_text("bogus=1\n").is_err());
    }

    #[test]
    fn stream_segments_restart_positions() {
        let s = Stream::new(Arch::DecoderOnly, &[5, 6], &[7, SEP, 8, EOS]).unwrap();
        assert_eq!(s.segs, vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(s.pos, vec![0, 1, 0, 0, 1, 2]);
        let s = Stream::new(Arch::EncoderDecoder, &[5], &[BOS, SEP, 9]).unwrap();
        assert_eq!(s.segs, vec![1, 2, 2]);
        assert_eq!(s.pos, vec![0, 0, 1]);
        assert!(Stream::new(Arch::EncoderDecoder, &[5], &[SEP]).is_err());
    }
}
