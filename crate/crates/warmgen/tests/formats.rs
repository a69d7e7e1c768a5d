use proptest::prelude::*;

use warmgen::checkpoint::{decode, encode};
use warmgen::config::ExperimentConfig;
use warmgen::dataset::{format_examples, parse_examples};
use warmgen_core::model::{init_model, Arch, ModelConfig, Parameters};
use warmgen_core::tasks::{Example, TaskKind};
use warmgen_core::training::{GradMode, Mode};
use warmgen_core::vocab::FIRST_SYMBOL;

fn model_config(arch: Arch, vocab: usize, d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        arch,
        vocab_size: vocab,
        d_model: d,
        n_heads: 2,
        n_layers_encoder: if arch == Arch::EncoderDecoder { layers } else { 0 },
        n_layers_decoder: layers,
        d_ff: d + 2,
        max_seq_len: 10,
        dropout_rate: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        dec_only in any::<bool>(),
        vocab in 5usize..12,
        half_d in 1usize..5,
        layers in 1usize..3,
        seed in any::<u64>(),
        bits in proptest::collection::vec(any::<u32>(), 1..64),
    ) {
        let arch = if dec_only { Arch::DecoderOnly } else { Arch::EncoderDecoder };
        let mut p: Parameters<f32> = init_model(&model_config(arch, vocab, 2 * half_d, layers), seed).unwrap();
        // arbitrary bit patterns, NaN payloads and signed zeros included
        for (i, b) in bits.iter().enumerate() {
            let t = i % p.tensors().len();
            let n = p.tensors()[t].len();
            p.tensors_mut()[t].data_mut()[(*b as usize) % n] = f32::from_bits(*b);
        }
        let bytes = encode(&p);
        let q = decode(&bytes, "mem").unwrap();
        prop_assert_eq!(q.config(), p.config());
        prop_assert_eq!(q.names(), p.names());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
        prop_assert_eq!(encode(&q), bytes);
    }

    #[test]
    fn every_truncation_is_rejected(cut in 0usize..400) {
        let p: Parameters<f32> = init_model(&model_config(Arch::DecoderOnly, 6, 2, 1), 1).unwrap();
        let bytes = encode(&p);
        let cut = cut % bytes.len();
        prop_assert!(decode(&bytes[..cut], "mem").is_err());
    }

    #[test]
    fn dataset_text_round_trip(
        rows in proptest::collection::vec(
            (proptest::collection::vec(FIRST_SYMBOL..40, 1..8), proptest::collection::vec(FIRST_SYMBOL..40, 1..8)),
            0..20,
        )
    ) {
        let examples: Vec<Example> = rows.into_iter().map(|(s, t)| Example::new(s, t)).collect();
        prop_assert_eq!(parse_examples(&format_examples(&examples), "mem").unwrap(), examples);
    }

    #[test]
    fn config_text_round_trip(
        task in 0usize..5,
        sft in any::<bool>(),
        score in any::<bool>(),
        lr in 1e-6f64..1.0,
        clip in proptest::option::of(0.01f64..10.0),
        seed in any::<u64>(),
        temperature in 0.05f64..4.0,
    ) {
        let cfg = ExperimentConfig {
            task: TaskKind::ALL[task],
            mode: if sft { Mode::BaselineSft } else { Mode::Warmup },
            grad_mode: if score { GradMode::ScoreFunction } else { GradMode::Pathwise },
            learning_rate: lr,
            clip_norm: clip,
            seed,
            temperature,
            ..Default::default()
        };
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
