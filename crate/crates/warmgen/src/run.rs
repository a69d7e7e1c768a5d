//! One training run: data, epochs, checkpoints, selection, test metrics.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.txt            resolved configuration
//! vocab.txt
//! data/{train,valid,test}.tsv
//! checkpoints/epoch_NNN.ckpt   (000 is the initialisation)
//! epochs.jsonl          one record per epoch
//! test_outputs.jsonl    generations of the selected checkpoint
//! results.json
//! manifest.json         written last
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use warmgen_core::decoding::{inference_generate, GenerationOutput, SamplerConfig};
use warmgen_core::metrics::{score, MetricReport};
use warmgen_core::model::{init_model, Parameters};
use warmgen_core::rng::{derive_seed, LABEL_EVAL};
use warmgen_core::tasks::{check_lengths, generate_dataset, Dataset, Example};
use warmgen_core::training::{example_outcome, select_checkpoint, EpochRecord, Trainer};
use warmgen_core::vocab::{Token, Vocab};
use warmgen_core::Real;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{format_examples, read_dataset, write_vocab};
use crate::error::{io_err, Error, Result};
use crate::records::{content_hash, unix_now, write_text, EpochStream, RunManifest};

/// `f` applied to every item, split over `threads` scoped threads in
/// contiguous chunks. Results come back in item order.
pub fn par_map<I, O, F>(threads: usize, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, it)| f(i, it)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || part.iter().enumerate().map(|(j, it)| f(c * chunk + j, it)).collect::<Vec<O>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

/// Inference on every example. Sampled warmups draw from a stream keyed by
/// the example's position, so the output does not depend on `threads`.
pub fn generate_all<T: Real>(
    params: &Parameters<T>,
    examples: &[Example],
    sampler: &SamplerConfig,
    sample_warmup: bool,
    max_target_len: usize,
    threads: usize,
) -> Result<Vec<GenerationOutput>> {
    par_map(threads, examples, |i, e| {
        let s = sampler.with_seed(derive_seed(sampler.seed, &[LABEL_EVAL, i as u64]));
        inference_generate(params, &e.source, &s, sample_warmup, max_target_len)
    })
    .into_iter()
    .map(|r| r.map_err(Error::from))
    .collect()
}

pub fn evaluate_split<T: Real>(
    params: &Parameters<T>,
    examples: &[Example],
    cfg: &ExperimentConfig,
) -> Result<(MetricReport, Vec<GenerationOutput>)> {
    if examples.is_empty() {
        return Err(Error::Check("cannot evaluate an empty split".into()));
    }
    let outputs = generate_all(
        params,
        examples,
        &cfg.inference_sampler(),
        cfg.sample_eval_warmups,
        cfg.target_limit(),
        cfg.threads,
    )?;
    let hyps: Vec<Vec<Token>> = outputs.iter().map(|o| o.target.clone()).collect();
    let refs: Vec<Vec<Token>> = examples.iter().map(|e| e.target.clone()).collect();
    let vocab = Vocab::new(cfg.vocab_size)?;
    Ok((score(&hyps, &refs, cfg.task, &vocab)?, outputs))
}

/// Generated or loaded dataset, length-checked against the model.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match &cfg.data_dir {
        Some(dir) => Dataset {
            train: read_dataset(&dir.join("train.tsv"))?,
            valid: read_dataset(&dir.join("valid.tsv"))?,
            test: read_dataset(&dir.join("test.tsv"))?,
        },
        None => generate_dataset(&cfg.task_spec())?,
    };
    let k = cfg.train_config().effective_k();
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if split.is_empty() {
            return Err(Error::Check(format!("{name} split is empty")));
        }
        check_lengths(split, cfg.max_seq_len, k)?;
        let bad = split.iter().flat_map(|e| e.source.iter().chain(&e.target)).find(|&&t| t as usize >= cfg.vocab_size);
        if let Some(t) = bad {
            return Err(Error::Check(format!("{name} split uses token {t} outside vocab_size {}", cfg.vocab_size)));
        }
    }
    Ok(data)
}

/// Writes the three splits and the vocabulary under `dir`; returns the
/// content hash of the split files.
pub fn write_data(dir: &Path, data: &Dataset, vocab: &Vocab) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let texts = [
        ("train", format_examples(&data.train)),
        ("valid", format_examples(&data.valid)),
        ("test", format_examples(&data.test)),
    ];
    for (name, text) in &texts {
        write_text(&dir.join(format!("{name}.tsv")), text)?;
    }
    write_vocab(&dir.join("vocab.txt"), vocab)?;
    Ok(content_hash(texts.iter().map(|(n, t)| (*n, t.as_bytes()))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub mode: String,
    pub task: String,
    pub best_epoch: usize,
    pub best_checkpoint: String,
    pub valid: MetricReport,
    pub test: MetricReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub results: RunResults,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:03}.ckpt")
}

#[derive(Serialize)]
struct OutputLine<'a> {
    source: &'a [Token],
    reference: &'a [Token],
    warmup: &'a [Token],
    target: &'a [Token],
}

fn write_outputs(path: &Path, examples: &[Example], outputs: &[GenerationOutput]) -> Result<()> {
    let mut text = String::new();
    for (e, o) in examples.iter().zip(outputs) {
        let line = OutputLine { source: &e.source, reference: &e.target, warmup: &o.warmup, target: &o.target };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Reads `(warmup, reference)` pairs back from a `test_outputs.jsonl` file.
pub fn read_output_pairs(path: &Path) -> Result<Vec<(Vec<Token>, Vec<Token>)>> {
    #[derive(Deserialize)]
    struct Line {
        reference: Vec<Token>,
        warmup: Vec<Token>,
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let v: Line = serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            Ok((v.warmup, v.reference))
        })
        .collect()
}

/// Trains one configuration into `out`, which must not already hold a run.
pub fn train_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    if out.join("manifest.json").exists() {
        return Err(Error::Check(format!("{} already holds a finished run", out.display())));
    }
    let started = unix_now();
    std::fs::create_dir_all(out.join("checkpoints")).map_err(io_err(out))?;
    let vocab = Vocab::new(cfg.vocab_size)?;
    let data = prepare_data(cfg)?;
    let data_hash = write_data(&out.join("data"), &data, &vocab)?;
    std::fs::rename(out.join("data/vocab.txt"), out.join("vocab.txt")).map_err(io_err(out))?;
    let config_text = cfg.to_text();
    write_text(&out.join("config.txt"), &config_text)?;

    let mut artifacts = BTreeMap::new();
    for name in ["config.txt", "vocab.txt", "data/train.tsv", "data/valid.tsv", "data/test.tsv"] {
        artifacts.insert(name.to_string(), name.to_string());
    }

    let train_cfg = cfg.train_config();
    let params = init_model::<f32>(&cfg.model_config(), cfg.seed)?;
    save_checkpoint(&out.join(checkpoint_name(0)), &params)?;
    artifacts.insert("checkpoint_000".into(), checkpoint_name(0));
    let mut trainer = Trainer::new(params, train_cfg.clone())?;
    let mut stream = EpochStream::create(&out.join("epochs.jsonl"))?;
    artifacts.insert("epochs".into(), "epochs.jsonl".into());

    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let threads = cfg.threads;
        let stats = trainer.train_epoch_with(&data.train, epoch, |params, jobs| {
            par_map(threads, jobs, |_, &(i, e)| example_outcome(params, &train_cfg, e, epoch, i))
        })?;
        let (valid, _) = evaluate_split(&trainer.params, &data.valid, cfg)?;
        let record = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            valid_metric: valid.get(&cfg.selection_metric)?,
            seconds: cfg.record_timing.then(|| t0.elapsed().as_secs_f64()),
        };
        stream.append(&record)?;
        records.push(record);
        let name = checkpoint_name(epoch);
        save_checkpoint(&out.join(&name), &trainer.params)?;
        artifacts.insert(format!("checkpoint_{epoch:03}"), name);
    }

    let best_epoch = select_checkpoint(&records)?;
    let best_checkpoint = checkpoint_name(best_epoch);
    let best = load_checkpoint(&out.join(&best_checkpoint))?;
    let (valid, _) = evaluate_split(&best, &data.valid, cfg)?;
    let (test, outputs) = evaluate_split(&best, &data.test, cfg)?;
    write_outputs(&out.join("test_outputs.jsonl"), &data.test, &outputs)?;
    artifacts.insert("test_outputs".into(), "test_outputs.jsonl".into());
    let results = RunResults {
        mode: cfg.mode.as_str().into(),
        task: cfg.task.as_str().into(),
        best_epoch,
        best_checkpoint,
        valid,
        test,
    };
    write_text(&out.join("results.json"), &(serde_json::to_string_pretty(&results)? + "\n"))?;
    artifacts.insert("results".into(), "results.json".into());

    let manifest = RunManifest {
        config: config_text,
        data_hash,
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        artifacts,
    };
    manifest.write_new(&out.join("manifest.json"))?;
    Ok(RunOutcome { dir: out.to_path_buf(), records, results })
}

/// Checkpoint plus the configuration it was trained with. A run directory
/// supplies `config.txt`; otherwise defaults are used with the model block
/// taken from the checkpoint.
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(ExperimentConfig, Parameters<f32>)> {
    let params = load_checkpoint(checkpoint)?;
    let guess = checkpoint.parent().and_then(Path::parent).map(|d| d.join("config.txt"));
    let mut cfg = match (config, guess) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(p)) if p.exists() => ExperimentConfig::load(&p)?,
        _ => ExperimentConfig::default(),
    };
    let m = params.config();
    cfg.arch = m.arch;
    cfg.vocab_size = m.vocab_size;
    cfg.d_model = m.d_model;
    cfg.n_heads = m.n_heads;
    cfg.n_layers_encoder = m.n_layers_encoder;
    cfg.n_layers_decoder = m.n_layers_decoder;
    cfg.d_ff = m.d_ff;
    cfg.max_seq_len = m.max_seq_len;
    cfg.dropout_rate = m.dropout_rate;
    Ok((cfg, params))
}

