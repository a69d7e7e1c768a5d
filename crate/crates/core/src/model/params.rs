use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::{Arch, ModelConfig, N_SEGMENTS};
use crate::rng::{stream, LABEL_INIT};
use crate::{Error, Real, Result, Tensor};

/// Indices of one transformer block's arrays inside [`Parameters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    pub ln1: (usize, usize),
    pub attn: [usize; 4],
    pub cross: Option<((usize, usize), [usize; 4])>,
    pub ln2: (usize, usize),
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Where every named array lives; fully determined by the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub seg: usize,
    pub encoder: Vec<BlockIndex>,
    pub encoder_ln: Option<(usize, usize)>,
    pub decoder: Vec<BlockIndex>,
    pub decoder_ln: (usize, usize),
    pub out_w: usize,
    pub out_b: usize,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.g"), vec![d], Init::Ones),
            self.add(format!("{prefix}.b"), vec![d], Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> [usize; 4] {
        ["wq", "wk", "wv", "wo"].map(|w| self.add(format!("{prefix}.{w}"), vec![d, d], Init::Xavier))
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, cross: bool) -> BlockIndex {
        let d = cfg.d_model;
        let ln1 = self.ln(&format!("{prefix}.ln1"), d);
        let attn = self.attn(&format!("{prefix}.attn"), d);
        let cross = cross.then(|| {
            let ln = self.ln(&format!("{prefix}.lnx"), d);
            (ln, self.attn(&format!("{prefix}.xattn"), d))
        });
        let ln2 = self.ln(&format!("{prefix}.ln2"), d);
        let w1 = self.add(format!("{prefix}.ffn.w1"), vec![d, cfg.d_ff], Init::Xavier);
        let b1 = self.add(format!("{prefix}.ffn.b1"), vec![cfg.d_ff], Init::Zeros);
        let w2 = self.add(format!("{prefix}.ffn.w2"), vec![cfg.d_ff, d], Init::Xavier);
        let b2 = self.add(format!("{prefix}.ffn.b2"), vec![d], Init::Zeros);
        BlockIndex { ln1, attn, cross, ln2, w1, b1, w2, b2 }
    }
}

fn build(cfg: &ModelConfig) -> (Builder, Layout) {
    let mut b = Builder { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
    let d = cfg.d_model;
    let tok = b.add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Xavier);
    let pos = b.add("pos_emb".into(), vec![cfg.max_seq_len, d], Init::Xavier);
    let seg = b.add("seg_emb".into(), vec![N_SEGMENTS, d], Init::Xavier);
    let encoder: Vec<BlockIndex> =
        (0..cfg.n_layers_encoder).map(|i| b.block(&format!("enc.{i}"), cfg, false)).collect();
    let encoder_ln = (cfg.n_layers_encoder > 0).then(|| b.ln("enc.ln_f", d));
    let cross = cfg.arch == Arch::EncoderDecoder;
    let decoder: Vec<BlockIndex> =
        (0..cfg.n_layers_decoder).map(|i| b.block(&format!("dec.{i}"), cfg, cross)).collect();
    let decoder_ln = b.ln("dec.ln_f", d);
    let out_w = b.add("out.w".into(), vec![d, cfg.vocab_size], Init::Xavier);
    let out_b = b.add("out.b".into(), vec![cfg.vocab_size], Init::Zeros);
    let layout = Layout { tok, pos, seg, encoder, encoder_ln, decoder, decoder_ln, out_w, out_b };
    (b, layout)
}

/// Named trainable arrays of a model, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    /// Assembles parameters from arrays in layout order, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (b, layout) = build(&config);
        if named.len() != b.names.len() {
            return Err(Error::Shape(format!("expected {} arrays, got {}", b.names.len(), named.len())));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "array {name} {:?} where {want} {shape:?} was expected",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self { config, layout, names: b.names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Deterministic initialisation: Xavier-uniform matrices (embeddings
/// included), zero biases, unit layer-norm gains.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    config.validate()?;
    let (b, layout) = build(config);
    let mut rng = stream(seed, &[LABEL_INIT]);
    let tensors = b
        .shapes
        .iter()
        .zip(&b.inits)
        .map(|(shape, init)| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Xavier => {
                let limit = Float::sqrt(6.0 / (shape[0] + shape[1]) as f64);
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| T::lit(rng.random_range(-limit..limit))).collect();
                Tensor::new(shape.clone(), data).expect("layout shapes are consistent")
            }
        })
        .collect();
    Ok(Parameters { config: config.clone(), layout, names: b.names, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let c = tiny(Arch::EncoderDecoder);
        let a = init_model::<f32>(&c, 3).unwrap();
        assert_eq!(a, init_model::<f32>(&c, 3).unwrap());
        assert_ne!(a, init_model::<f32>(&c, 4).unwrap());
        assert_eq!(a.get("tok_emb").unwrap().shape(), &[10, 8]);
        assert!(a.get("dec.0.xattn.wq").is_some());
    }

    #[test]
    fn decoder_only_has_no_cross_attention() {
        let p = init_model::<f64>(&tiny(Arch::DecoderOnly), 0).unwrap();
        assert!(p.names().iter().all(|n| !n.contains("xattn") && !n.starts_with("enc")));
    }

    #[test]
    fn from_named_checks_names() {
        let p = init_model::<f64>(&tiny(Arch::DecoderOnly), 0).unwrap();
        let mut named: Vec<_> = p.named().map(|(n, t)| (String::from(n), t.clone())).collect();
        assert_eq!(Parameters::from_named(p.config().clone(), named.clone()).unwrap(), p);
        named.swap(0, 1);
        assert!(Parameters::from_named(p.config().clone(), named).is_err());
    }
}
