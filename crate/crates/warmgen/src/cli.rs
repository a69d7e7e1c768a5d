//! Command-line surface. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use warmgen_core::decoding::{extract_target, inference_generate};
use warmgen_core::metrics::overlap_rate;
use warmgen_core::rng::{derive_seed, LABEL_EVAL};
use warmgen_core::tasks::generate_dataset;
use warmgen_core::vocab::Vocab;

use crate::config::ExperimentConfig;
use crate::dataset::{parse_token_line, read_dataset};
use crate::error::{Error, Result};
use crate::harness;
use crate::records::write_text;
use crate::run::{evaluate_split, generate_all, load_model, read_output_pairs, train_run, write_data};

#[derive(Parser, Debug)]
#[command(name = "warmgen", version, about = "Warmup-sequence training for tiny seq2seq transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config and from WGEN_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?.with_env_seed()?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config the checkpoint was trained with; defaults to the run's config.txt.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/valid/test splits and the vocabulary.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration into a fresh run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `threads` from the config.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a checkpoint on a dataset file; prints the metric report as JSON.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate for one source line (token names or ids, space separated).
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        source: String,
        /// Sample the warmup instead of decoding it greedily.
        #[arg(long)]
        sample: bool,
    },
    /// Finite-difference check of model gradients over random tiny configs.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Exact-enumeration checks of sampling, losses and gradients.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        mc_draws: usize,
        #[arg(long, default_value_t = 100_000)]
        sf_draws: usize,
    },
    /// One warmup run per number of sampled warmups, plus combined CSVs.
    AblateN {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated values, e.g. 2,4,6,8.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        /// Runs trained at the same time.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train baseline and warmup modes and write comparison.csv.
    CompareModes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Share of distinct warmup tokens found in the reference.
    AnalyzeOverlap {
        /// A run's test_outputs.jsonl.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        outputs: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sample: bool,
    },
    /// Convert an epochs.jsonl stream to CSV.
    Export {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let data = generate_dataset(&cfg.task_spec())?;
            let hash = write_data(&out, &data, &Vocab::new(cfg.vocab_size)?)?;
            println!(
                "wrote {} train, {} valid, {} test examples to {} (sha256 {hash})",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Train { cfg, out, threads } => {
            let mut cfg = cfg.load()?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let run = train_run(&cfg, &out)?;
            for r in &run.records {
                println!("epoch {} train_loss {:.6} valid {:.4}", r.epoch, r.train_loss, r.valid_metric);
            }
            println!("best epoch {} ({})", run.results.best_epoch, run.results.best_checkpoint);
            println!("test {}", warmgen_core::metrics::summary_line(&run.results.test));
        }
        Command::Eval { model, data } => {
            let (cfg, params) = load_model(&model.checkpoint, model.config.as_deref())?;
            let examples = read_dataset(&data)?;
            let (report, _) = evaluate_split(&params, &examples, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Infer { model, source, sample } => {
            let (cfg, params) = load_model(&model.checkpoint, model.config.as_deref())?;
            let vocab = Vocab::new(cfg.vocab_size)?;
            let x = parse_token_line(&source, &vocab)?;
            let sampler = cfg.inference_sampler();
            let sampler = sampler.with_seed(derive_seed(sampler.seed, &[LABEL_EVAL]));
            let out = inference_generate(&params, &x, &sampler, sample, cfg.target_limit())?;
            let target = extract_target(&out.full)?;
            println!("full:   {}", vocab.render(&out.full));
            println!("warmup: {}", vocab.render(&out.warmup));
            println!("target: {}", vocab.render(&target));
        }
        Command::Gradcheck { configs, seed, tolerance } => {
            let report = harness::gradcheck_suite(configs, seed)?;
            for e in &report.entries {
                println!(
                    "config {:2} {:15} layers {} d_model {:2} vocab {:2} {:8} rel error {:.3e} (worst coordinate {:.1e}, max abs {:.1e})",
                    e.index, e.arch, e.layers, e.d_model, e.vocab_size, e.objective, e.rel_error,
                    e.max_elementwise_rel_error, e.max_abs_error
                );
            }
            println!("max absolute error: {:.3e}", report.max_abs_error);
            println!("max relative error: {:.3e}", report.max_rel_error);
            if report.max_rel_error > tolerance {
                eprintln!("max relative error exceeds {tolerance:e}");
                return Ok(1);
            }
        }
        Command::OracleCheck { seed, mc_draws, sf_draws } => {
            let checks = harness::oracle_suite(seed, mc_draws, sf_draws)?;
            for c in &checks {
                println!("{}", c.line());
            }
            if checks.iter().any(|c| !c.pass) {
                return Ok(1);
            }
        }
        Command::AblateN { cfg, out, n, jobs } => {
            let rows = harness::ablate_n(&cfg.load()?, &n, &out, jobs)?;
            for r in rows {
                println!(
                    "n {} final valid {:.4} final train loss {:.6} test exact match {:.4}",
                    r.n_samples, r.final_valid_metric, r.final_train_loss, r.test_exact_match
                );
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::CompareModes { cfg, out, jobs } => {
            for run in harness::compare_modes(&cfg.load()?, &out, jobs)? {
                println!("{:12} {}", run.results.mode, warmgen_core::metrics::summary_line(&run.results.test));
            }
            println!("wrote {}", out.join("comparison.csv").display());
        }
        Command::AnalyzeOverlap { outputs, checkpoint, data, config, sample } => {
            let pairs = match (outputs, checkpoint, data) {
                (Some(path), _, _) => read_output_pairs(&path)?,
                (None, Some(ckpt), Some(data)) => overlap_pairs(&ckpt, config.as_deref(), &data, sample)?,
                _ => return Err(Error::Config("give --outputs, or --checkpoint with --data".into())),
            };
            println!("overlap rate: {:.2}", overlap_rate(&pairs)?);
        }
        Command::Export { input, output } => {
            let csv = harness::export_epochs(&input)?;
            match output {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(0)
}

type Pairs = Vec<(Vec<warmgen_core::vocab::Token>, Vec<warmgen_core::vocab::Token>)>;

fn overlap_pairs(checkpoint: &Path, config: Option<&Path>, data: &Path, sample: bool) -> Result<Pairs> {
    let (cfg, params) = load_model(checkpoint, config)?;
    let examples = read_dataset(data)?;
    let outputs = generate_all(&params, &examples, &cfg.sampler(), sample, cfg.target_limit(), cfg.threads)?;
    Ok(outputs.into_iter().zip(examples).map(|(o, e)| (o.warmup, e.target)).collect())
}
