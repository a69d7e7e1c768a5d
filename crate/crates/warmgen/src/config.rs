//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are errors. `WGEN_SEED` in the environment
//! overrides `seed`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use warmgen_core::decoding::SamplerConfig;
use warmgen_core::model::{Arch, ModelConfig};
use warmgen_core::tasks::{TaskKind, TaskSpec};
use warmgen_core::training::{GradMode, Mode, TrainConfig};

use crate::error::{io_err, Error, Result};

pub const SEED_ENV: &str = "WGEN_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Read `train.tsv`, `valid.tsv` and `test.tsv` from here instead of generating.
    pub data_dir: Option<PathBuf>,

    pub arch: Arch,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_encoder: usize,
    pub n_layers_decoder: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,

    pub mode: Mode,
    pub grad_mode: GradMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub n_samples: usize,
    pub beam_size: usize,
    pub max_warmup_len: usize,
    pub temperature: f64,
    pub selection_metric: String,
    pub seed: u64,

    /// Worker threads per batch; 1 runs everything on the calling thread.
    pub threads: usize,
    /// Write wall-clock seconds into epoch records (null otherwise).
    pub record_timing: bool,
    /// Sample the inference warmup instead of decoding it greedily.
    pub sample_eval_warmups: bool,
    /// Longest generated target; 0 means `max_seq_len`.
    pub max_target_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Copy,
            vocab_size: 16,
            min_len: 3,
            max_len: 10,
            n_train: 5000,
            n_valid: 200,
            n_test: 500,
            data_dir: None,
            arch: Arch::EncoderDecoder,
            d_model: 32,
            n_heads: 4,
            n_layers_encoder: 2,
            n_layers_decoder: 2,
            d_ff: 64,
            max_seq_len: 24,
            dropout_rate: 0.0,
            mode: Mode::Warmup,
            grad_mode: GradMode::Pathwise,
            learning_rate: 3e-4,
            epochs: 10,
            batch_size: 32,
            clip_norm: Some(1.0),
            n_samples: 4,
            beam_size: 4,
            max_warmup_len: 8,
            temperature: 1.0,
            selection_metric: "exact_match".into(),
            seed: 0,
            threads: 1,
            record_timing: true,
            sample_eval_warmups: false,
            max_target_len: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("bad value {v:?} for {key}: expected true or false")),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `WGEN_SEED` when it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let core = |e: warmgen_core::Error| e.to_string();
        match key {
            "task" => self.task = TaskKind::parse(v).map_err(core)?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "min_len" => self.min_len = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_valid" => self.n_valid = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "arch" => self.arch = Arch::parse(v).map_err(core)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_heads" => self.n_heads = parse_num(key, v)?,
            "n_layers_encoder" => self.n_layers_encoder = parse_num(key, v)?,
            "n_layers_decoder" => self.n_layers_decoder = parse_num(key, v)?,
            "d_ff" => self.d_ff = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "dropout_rate" => self.dropout_rate = parse_num(key, v)?,
            "mode" => self.mode = Mode::parse(v).map_err(core)?,
            "grad_mode" => self.grad_mode = GradMode::parse(v).map_err(core)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "n_samples" => self.n_samples = parse_num(key, v)?,
            "beam_size" => self.beam_size = parse_num(key, v)?,
            "max_warmup_len" => self.max_warmup_len = parse_num(key, v)?,
            "temperature" => self.temperature = parse_num(key, v)?,
            "selection_metric" => self.selection_metric = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "record_timing" => self.record_timing = parse_bool(key, v)?,
            "sample_eval_warmups" => self.sample_eval_warmups = parse_bool(key, v)?,
            "max_target_len" => self.max_target_len = parse_num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("task", self.task.as_str().into());
        kv("vocab_size", self.vocab_size.to_string());
        kv("min_len", self.min_len.to_string());
        kv("max_len", self.max_len.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_valid", self.n_valid.to_string());
        kv("n_test", self.n_test.to_string());
        kv("data_dir", self.data_dir.as_ref().map_or("none".into(), |p| p.display().to_string()));
        kv("arch", self.arch.as_str().into());
        kv("d_model", self.d_model.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("n_layers_encoder", self.n_layers_encoder.to_string());
        kv("n_layers_decoder", self.n_layers_decoder.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("mode", self.mode.as_str().into());
        kv("grad_mode", self.grad_mode.as_str().into());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("clip_norm", self.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("n_samples", self.n_samples.to_string());
        kv("beam_size", self.beam_size.to_string());
        kv("max_warmup_len", self.max_warmup_len.to_string());
        kv("temperature", self.temperature.to_string());
        kv("selection_metric", self.selection_metric.clone());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("record_timing", self.record_timing.to_string());
        kv("sample_eval_warmups", self.sample_eval_warmups.to_string());
        kv("max_target_len", self.max_target_len.to_string());
        s
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            n_train: self.n_train,
            n_valid: self.n_valid,
            n_test: self.n_test,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers_encoder: if self.arch == Arch::DecoderOnly { 0 } else { self.n_layers_encoder },
            n_layers_decoder: self.n_layers_decoder,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_samples: self.n_samples,
            beam_size: self.beam_size,
            max_warmup_len: self.max_warmup_len,
            temperature: self.temperature,
            seed: self.seed,
        }
    }

    /// Sampler used at inference: no warmup phase for baseline models.
    pub fn inference_sampler(&self) -> SamplerConfig {
        let mut s = self.sampler();
        if self.mode == Mode::BaselineSft {
            s.max_warmup_len = 0;
        }
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            grad_mode: self.grad_mode,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            sampler: self.sampler(),
            clip_norm: self.clip_norm,
            seed: self.seed,
            selection_metric: self.selection_metric.clone(),
        }
    }

    pub fn target_limit(&self) -> usize {
        if self.max_target_len == 0 {
            self.max_seq_len
        } else {
            self.max_target_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.task.is_choice() != matches!(self.selection_metric.as_str(), "macro_f1" | "accuracy")
            && matches!(self.selection_metric.as_str(), "macro_f1" | "accuracy")
        {
            return Err(Error::Config(format!("{} is only defined for answer-choice", self.selection_metric)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut c = ExperimentConfig::default();
        c.mode = Mode::BaselineSft;
        c.clip_norm = None;
        c.data_dir = Some("/tmp/x".into());
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let e = ExperimentConfig::parse("# c\n\nepochs = 3\nepoch = 4\n").unwrap_err();
        assert!(e.to_string().contains("line 4") && e.to_string().contains("epoch"));
        assert!(ExperimentConfig::parse("epochs 3").is_err());
        assert!(ExperimentConfig::parse("record_timing = yes").is_err());
    }

    #[test]
    fn baseline_inference_has_no_warmup() {
        let c = ExperimentConfig { mode: Mode::BaselineSft, ..Default::default() };
        assert_eq!(c.inference_sampler().max_warmup_len, 0);
        assert_eq!(ExperimentConfig::default().inference_sampler().max_warmup_len, 8);
    }
}
