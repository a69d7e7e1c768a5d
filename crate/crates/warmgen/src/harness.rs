//! Verification suites and experiment sweeps behind the CLI.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use warmgen_core::decoding::{attach_separator, sample_warmups, SamplerConfig};
use warmgen_core::gradcheck::{parameter_grad_check, GradCheckStats, DEFAULT_STEP};
use warmgen_core::model::{conditional_target_nll, init_model, sequence_log_prob, Arch, ModelConfig, Parameters};
use warmgen_core::oracle::{all_warmups, enumerate_expectation, expected_nll_gradient};
use warmgen_core::rng::{derive_seed, stream};
use warmgen_core::tasks::Example;
use warmgen_core::training::{baseline_sft_loss, loss_from_warmups, warmup_example_loss, GradMode, Mode, Trainer};
use warmgen_core::vocab::{Token, EOS, FIRST_SYMBOL};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};
use crate::records::{epochs_csv, unix_now, write_text, RunManifest};
use crate::run::{train_run, RunOutcome};

// Labels for the harness's own random streams, derived from the master seed.
const LABEL_GRADCHECK: u64 = 0x6763_686b;
const LABEL_ORACLE: u64 = 0x6f72_636c;

/// Outcome of one property check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn tokens(rng: &mut impl Rng, symbols: usize, len: usize) -> Vec<Token> {
    (0..len).map(|_| FIRST_SYMBOL + rng.random_range(0..symbols) as Token).collect()
}

/// Small random model: `symbols` non-special tokens, one or two layers.
pub fn random_tiny_config(rng: &mut impl Rng, symbols: usize, max_d: usize) -> ModelConfig {
    let arch = if rng.random_bool(0.5) { Arch::EncoderDecoder } else { Arch::DecoderOnly };
    let d_model = 2 * rng.random_range(1..=max_d / 2);
    let heads: Vec<usize> = [1, 2, 4].into_iter().filter(|h| d_model % h == 0).collect();
    let layers = rng.random_range(1..=2);
    ModelConfig {
        arch,
        vocab_size: symbols + FIRST_SYMBOL as usize,
        d_model,
        n_heads: heads[rng.random_range(0..heads.len())],
        n_layers_encoder: if arch == Arch::EncoderDecoder { layers } else { 0 },
        n_layers_decoder: layers,
        d_ff: rng.random_range(2..=2 * d_model),
        max_seq_len: 12,
        dropout_rate: 0.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub index: usize,
    pub arch: String,
    pub layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub objective: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed coordinates.
    pub rel_error: f64,
    pub max_elementwise_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

fn all_coords(_: usize, len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// Central-difference check of the model gradients (64-bit) over `n` random
/// tiny configurations. Each configuration checks the baseline NLL and the
/// warmup loss for fixed warmups on every coordinate, and the exactly
/// enumerated expected NLL (which exercises the warmup log-probability path)
/// on a strided subset of coordinates.
pub fn gradcheck_suite(n: usize, seed: u64) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for index in 0..n {
        let mut rng = stream(seed, &[LABEL_GRADCHECK, index as u64]);
        let symbols = rng.random_range(1..=6);
        let cfg = random_tiny_config(&mut rng, symbols, 16);
        let params: Parameters<f64> = init_model(&cfg, rng.random())?;
        let x = {
            let len = rng.random_range(1..=3);
            tokens(&mut rng, symbols, len)
        };
        let mut y = {
            let len = rng.random_range(0..=2);
            tokens(&mut rng, symbols, len)
        };
        y.push(EOS);
        let warmups: Vec<Vec<Token>> = (0..2)
            .map(|_| {
                let len = rng.random_range(0..=2);
                tokens(&mut rng, symbols, len)
            })
            .collect();
        let k = 2;
        let mut record = |objective: &str, st: GradCheckStats| {
            entries.push(GradcheckEntry {
                index,
                arch: cfg.arch.as_str().into(),
                layers: cfg.n_layers_decoder,
                d_model: cfg.d_model,
                vocab_size: cfg.vocab_size,
                objective: objective.into(),
                rel_error: st.vector_rel_error,
                max_elementwise_rel_error: st.max_elementwise_rel_error,
                max_abs_error: st.max_abs_error,
            })
        };
        let err = parameter_grad_check(
            &params,
            DEFAULT_STEP,
            |p, g| baseline_sft_loss(p, &x, &y, None, g).map(|o| (o.loss, o.grads)),
            all_coords,
        )?;
        record("baseline", err);
        let err = parameter_grad_check(
            &params,
            DEFAULT_STEP,
            |p, g| loss_from_warmups(p, &x, &y, &warmups, k, GradMode::Pathwise, None, g).map(|o| (o.loss, o.grads)),
            all_coords,
        )?;
        record("warmup", err);
        let enum_k = if symbols <= 3 { 2 } else { 1 };
        let err = parameter_grad_check(
            &params,
            DEFAULT_STEP,
            |p, g| {
                if g {
                    expected_nll_gradient(p, &x, &y, enum_k, false)
                } else {
                    Ok((enumerate_expectation(p, &x, &y, enum_k, false)?.exact_expected_nll, Vec::new()))
                }
            },
            |_, len| (0..len).step_by(len.div_ceil(16).max(1)).collect(),
        )?;
        record("expected", err);
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let max_abs_error = entries.iter().map(|e| e.max_abs_error).fold(0.0, f64::max);
    Ok(GradcheckReport { entries, max_rel_error, max_abs_error })
}

fn oracle_rng(seed: u64, check: u64, i: usize) -> impl Rng {
    stream(seed, &[LABEL_ORACLE, check, i as u64])
}

/// Random enumerable instance: model, source and EOS-terminated target.
fn instance(rng: &mut impl Rng, symbols: usize) -> Result<(Parameters<f64>, Vec<Token>, Vec<Token>)> {
    let cfg = random_tiny_config(rng, symbols, 8);
    let params = init_model(&cfg, rng.random())?;
    let x = {
        let len = rng.random_range(1..=3);
        tokens(rng, symbols, len)
    };
    let mut y = {
        let len = rng.random_range(1..=3);
        tokens(rng, symbols, len)
    };
    y.push(EOS);
    Ok((params, x, y))
}

/// Σ_c P(c|x) = 1 for random models with up to five symbols and K ≤ 3.
pub fn check_mass(n_models: usize, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for i in 0..n_models {
        let mut rng = oracle_rng(seed, 1, i);
        let symbols = rng.random_range(1..=5);
        let k = rng.random_range(1..=3);
        let (p, x, y) = instance(&mut rng, symbols)?;
        let r = enumerate_expectation(&p, &x, &y, k, false)?;
        worst = worst.max((r.mass - 1.0).abs());
    }
    Ok(Check {
        name: "warmup mass".into(),
        pass: worst <= 1e-9,
        detail: format!("{n_models} models, max |mass - 1| = {worst:.3e} (limit 1e-9)"),
    })
}

/// Expected NLL is at least the NLL of the expected probability, and the
/// gap is exactly zero when K = 0.
pub fn check_jensen(n_trials: usize, seed: u64) -> Result<Check> {
    let mut min_gap = f64::INFINITY;
    let mut k0_nonzero = 0usize;
    let mut k0_trials = 0usize;
    for i in 0..n_trials {
        let mut rng = oracle_rng(seed, 2, i);
        let symbols = rng.random_range(1..=5);
        let k = i % 3;
        let (p, x, y) = instance(&mut rng, symbols)?;
        let r = enumerate_expectation(&p, &x, &y, k, false)?;
        min_gap = min_gap.min(r.exact_expected_nll - r.neg_log_expected_prob);
        if k == 0 {
            k0_trials += 1;
            if r.jensen_gap != 0.0 {
                k0_nonzero += 1;
            }
        }
    }
    Ok(Check {
        name: "jensen inequality".into(),
        pass: min_gap >= -1e-9 && k0_nonzero == 0,
        detail: format!(
            "{n_trials} trials, min gap {min_gap:.3e} (limit -1e-9), {k0_nonzero}/{k0_trials} K=0 trials with nonzero gap"
        ),
    })
}

/// Sampled single-warmup losses and warmup frequencies against exact
/// enumeration. Instances are small enough (at most three symbols, K ≤ 2,
/// beam 4) that the beam never prunes, so the sampler is exact.
pub fn check_monte_carlo(n_instances: usize, draws: usize, seed: u64) -> Result<Check> {
    let mut worst_loss_z = 0.0f64;
    let mut worst_freq_z = 0.0f64;
    let mut failures = 0usize;
    let mut compared = 0usize;
    for i in 0..n_instances {
        let mut rng = oracle_rng(seed, 3, i);
        let symbols = rng.random_range(2..=3);
        let k = rng.random_range(1..=2);
        let (p, x, y) = instance(&mut rng, symbols)?;
        let exact = enumerate_expectation(&p, &x, &y, k, false)?;
        let warmups = all_warmups(symbols, k);
        let mut prob = BTreeMap::new();
        let mut nll = BTreeMap::new();
        for c in &warmups {
            prob.insert(c.clone(), sequence_log_prob(&p, &x, c, k)?.exp());
            nll.insert(c.clone(), conditional_target_nll(&p, &x, &attach_separator(c)?, &y)?);
        }
        let variance: f64 = warmups.iter().map(|c| prob[c] * (nll[c] - exact.exact_expected_nll).powi(2)).sum();
        let mut counts: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
        for d in 0..draws {
            let cfg = SamplerConfig {
                n_samples: 1,
                beam_size: 4,
                max_warmup_len: k,
                temperature: 1.0,
                seed: derive_seed(seed, &[LABEL_ORACLE, 3, i as u64, d as u64]),
            };
            let c = sample_warmups(&p, &x, &cfg)?.swap_remove(0).tokens;
            if !nll.contains_key(&c) {
                return Err(Error::Check(format!("sampled warmup {c:?} outside enumeration")));
            }
            *counts.entry(c).or_default() += 1;
        }
        // Summing per distinct warmup keeps rounding far below the standard
        // error even when the loss barely depends on the warmup.
        let sum: f64 = counts.iter().map(|(c, &k)| k as f64 * nll[c]).sum();
        let n = draws as f64;
        let se = (variance / n).sqrt();
        let z = (sum / n - exact.exact_expected_nll).abs() / se.max(f64::MIN_POSITIVE);
        worst_loss_z = worst_loss_z.max(z);
        failures += usize::from(z > 3.0);
        compared += 1;
        for c in &warmups {
            let q = prob[c];
            let f = counts.get(c).copied().unwrap_or(0) as f64 / n;
            let se = (q * (1.0 - q) / n).sqrt();
            let z = (f - q).abs() / se.max(f64::MIN_POSITIVE);
            worst_freq_z = worst_freq_z.max(z);
            failures += usize::from(z > 3.0);
            compared += 1;
        }
    }
    Ok(Check {
        name: "monte carlo consistency".into(),
        pass: failures == 0,
        detail: format!(
            "{n_instances} instances x {draws} draws: worst loss z {worst_loss_z:.2}, worst frequency z {worst_freq_z:.2}, {failures}/{compared} outside 3 SE"
        ),
    })
}

/// Warmup-mode loss and gradient with K = 0 against baseline SFT.
pub fn check_k0_examples(n_examples: usize, seed: u64) -> Result<Check> {
    let mut worst_loss = 0.0f64;
    let mut worst_grad = 0.0f64;
    for i in 0..n_examples {
        let mut rng = oracle_rng(seed, 5, i);
        let symbols = rng.random_range(1..=6);
        let (p, x, y) = instance(&mut rng, symbols)?;
        let sampler = SamplerConfig { max_warmup_len: 0, seed: rng.random(), ..SamplerConfig::default() };
        let w = warmup_example_loss(&p, &x, &y, &sampler, GradMode::ScoreFunction, None, true)?;
        let b = baseline_sft_loss(&p, &x, &y, None, true)?;
        worst_loss = worst_loss.max((w.loss - b.loss).abs());
        for (gw, gb) in w.grads.iter().zip(&b.grads) {
            for (a, c) in gw.data().iter().zip(gb.data()) {
                worst_grad = worst_grad.max((a - c).abs());
            }
        }
    }
    Ok(Check {
        name: "k=0 reduction (examples)".into(),
        pass: worst_loss <= 1e-12 && worst_grad <= 1e-12,
        detail: format!("{n_examples} examples, max |loss diff| {worst_loss:.3e}, max |grad diff| {worst_grad:.3e} (limit 1e-12)"),
    })
}

/// Two 32-bit training trajectories, warmup mode with K = 0 and baseline,
/// compared parameter by parameter after every epoch.
pub fn check_k0_trajectory(epochs: usize, seed: u64) -> Result<Check> {
    let mut rng = oracle_rng(seed, 5, usize::MAX);
    let cfg = ModelConfig {
        arch: Arch::EncoderDecoder,
        vocab_size: 10,
        d_model: 16,
        n_heads: 2,
        n_layers_encoder: 1,
        n_layers_decoder: 1,
        d_ff: 32,
        max_seq_len: 12,
        dropout_rate: 0.0,
    };
    let data: Vec<Example> = (0..64)
        .map(|_| {
            let len = rng.random_range(1..=5);
            let x = tokens(&mut rng, 6, len);
            Example::new(x.clone(), x.into_iter().rev().collect())
        })
        .collect();
    let base = ExperimentConfig { epochs, batch_size: 8, learning_rate: 1e-3, max_warmup_len: 0, seed, ..Default::default() };
    let init: Parameters<f32> = init_model(&cfg, seed)?;
    let mut a = Trainer::new(init.clone(), ExperimentConfig { mode: Mode::Warmup, ..base.clone() }.train_config())?;
    let mut b = Trainer::new(init, ExperimentConfig { mode: Mode::BaselineSft, ..base }.train_config())?;
    let mut worst = 0.0f64;
    let mut worst_loss = 0.0f64;
    for epoch in 1..=epochs {
        let sa = a.train_epoch(&data, epoch)?;
        let sb = b.train_epoch(&data, epoch)?;
        worst_loss = worst_loss.max((sa.mean_loss - sb.mean_loss).abs());
        for (ta, tb) in a.params.tensors().iter().zip(b.params.tensors()) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                worst = worst.max(f64::from((x - y).abs()));
            }
        }
    }
    Ok(Check {
        name: "k=0 reduction (trajectory)".into(),
        pass: worst <= 1e-6 && worst_loss <= 1e-6,
        detail: format!("{epochs} epochs at 32-bit, max |param diff| {worst:.3e}, max |loss diff| {worst_loss:.3e} (limit 1e-6)"),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreFunctionReport {
    pub draws: usize,
    pub coordinates: usize,
    pub failures: usize,
    pub worst_z: f64,
}

/// Score-function (REINFORCE with a leave-one-out baseline) gradient of a
/// minimal decoder-only model, averaged over `draws` independent batches
/// of `n_samples` warmups, against the exact gradient of the enumerated
/// expected NLL. Two symbols with K = 2 and beam 4 keep sampling exact.
pub fn check_score_function(draws: usize, n_samples: usize, seed: u64) -> Result<(Check, ScoreFunctionReport)> {
    check_gradient_estimator(draws, n_samples, GradMode::ScoreFunction, seed)
}

/// The same comparison for any gradient mode; the pathwise gradient drops
/// the score term and is expected to fail it.
pub fn check_gradient_estimator(
    draws: usize,
    n_samples: usize,
    grad_mode: GradMode,
    seed: u64,
) -> Result<(Check, ScoreFunctionReport)> {
    let mut rng = oracle_rng(seed, 6, 0);
    let cfg = ModelConfig {
        arch: Arch::DecoderOnly,
        vocab_size: 6,
        d_model: 2,
        n_heads: 1,
        n_layers_encoder: 0,
        n_layers_decoder: 1,
        d_ff: 2,
        max_seq_len: 6,
        dropout_rate: 0.0,
    };
    let k = 2;
    let p: Parameters<f64> = init_model(&cfg, rng.random())?;
    let x = tokens(&mut rng, 2, 2);
    let y = vec![FIRST_SYMBOL + 1, EOS];
    let (_, exact) = expected_nll_gradient(&p, &x, &y, k, false)?;
    // Welford running mean and sum of squared deviations per coordinate;
    // the one-pass E[g²] − E[g]² form cancels to zero on low-variance
    // coordinates and reports a spurious zero standard error.
    let mut mean: Vec<Vec<f64>> = exact.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut m2 = mean.clone();
    for d in 0..draws {
        let sampler = SamplerConfig {
            n_samples,
            beam_size: 4,
            max_warmup_len: k,
            temperature: 1.0,
            seed: derive_seed(seed, &[LABEL_ORACLE, 6, d as u64]),
        };
        let out = warmup_example_loss(&p, &x, &y, &sampler, grad_mode, None, true)?;
        let count = (d + 1) as f64;
        for ((mu, s2), g) in mean.iter_mut().zip(m2.iter_mut()).zip(&out.grads) {
            for ((a, b), &v) in mu.iter_mut().zip(s2.iter_mut()).zip(g.data()) {
                let delta = v - *a;
                *a += delta / count;
                *b += delta * (v - *a);
            }
        }
    }
    let n = draws as f64;
    let (mut failures, mut coordinates, mut worst_z) = (0usize, 0usize, 0.0f64);
    for ((mu, s2), e) in mean.iter().zip(&m2).zip(&exact) {
        for ((&m, &b), &truth) in mu.iter().zip(s2).zip(e.data()) {
            let se = (b / (n - 1.0) / n).sqrt();
            let diff = (m - truth).abs();
            coordinates += 1;
            if diff == 0.0 {
                continue;
            }
            let z = diff / se.max(f64::MIN_POSITIVE);
            worst_z = worst_z.max(z);
            failures += usize::from(z > 3.0);
        }
    }
    let report = ScoreFunctionReport { draws, coordinates, failures, worst_z };
    Ok((
        Check {
            name: format!("{} gradient", grad_mode.as_str()),
            pass: failures == 0,
            detail: format!(
                "{draws} draws of {n_samples} warmups, {failures}/{coordinates} coordinates outside 3 SE, worst z {worst_z:.2}"
            ),
        },
        report,
    ))
}

/// Everything `oracle-check` runs, with the given draw counts.
pub fn oracle_suite(seed: u64, mc_draws: usize, sf_draws: usize) -> Result<Vec<Check>> {
    Ok(vec![
        check_mass(20, seed)?,
        check_jensen(100, seed)?,
        check_monte_carlo(10, mc_draws, seed)?,
        check_k0_examples(1000, seed)?,
        check_k0_trajectory(3, seed)?,
        check_score_function(sf_draws, 4, seed)?.0,
    ])
}

fn csv_metric(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_sweep_manifest(out: &Path, cfg: &ExperimentConfig, started: f64, artifacts: BTreeMap<String, String>) -> Result<()> {
    RunManifest {
        config: cfg.to_text(),
        data_hash: String::new(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        artifacts,
    }
    .write_new(&out.join("manifest.json"))
}

/// Runs `f` on every item, with up to `jobs` running at once.
fn run_jobs<I: Sync, O: Send>(jobs: usize, items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    crate::run::par_map(jobs, items, |_, it| f(it)).into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub n_samples: usize,
    pub final_valid_metric: f64,
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub test_exact_match: f64,
}

/// One warmup-mode run per value of `n_samples`, each in `out/n_<n>`, plus
/// `ablation.csv` (one row per n) and `loss_curves.csv` (per epoch).
pub fn ablate_n(base: &ExperimentConfig, ns: &[usize], out: &Path, jobs: usize) -> Result<Vec<AblationRow>> {
    if ns.is_empty() {
        return Err(Error::Config("ablate-n needs at least one value of n".into()));
    }
    let started = unix_now();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let runs: Vec<RunOutcome> = run_jobs(jobs, ns, |&n| {
        let cfg = ExperimentConfig { mode: Mode::Warmup, n_samples: n, ..base.clone() };
        train_run(&cfg, &out.join(format!("n_{n}")))
    })?;
    let mut table = String::from("n_samples,final_valid_metric,final_train_loss,best_epoch,test_exact_match\n");
    let mut curves = String::from("n_samples,epoch,train_loss,valid_metric\n");
    let mut rows = Vec::new();
    for (&n, run) in ns.iter().zip(&runs) {
        let last = run.records.last().ok_or_else(|| Error::Check("run without epochs".into()))?;
        let row = AblationRow {
            n_samples: n,
            final_valid_metric: last.valid_metric,
            final_train_loss: last.train_loss,
            best_epoch: run.results.best_epoch,
            test_exact_match: run.results.test.exact_match,
        };
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            row.n_samples, row.final_valid_metric, row.final_train_loss, row.best_epoch, row.test_exact_match
        );
        for r in &run.records {
            let _ = writeln!(curves, "{n},{},{},{}", r.epoch, r.train_loss, r.valid_metric);
        }
        rows.push(row);
    }
    write_text(&out.join("ablation.csv"), &table)?;
    write_text(&out.join("loss_curves.csv"), &curves)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("ablation".into(), "ablation.csv".into());
    artifacts.insert("loss_curves".into(), "loss_curves.csv".into());
    for n in ns {
        artifacts.insert(format!("run_n_{n}"), format!("n_{n}/manifest.json"));
    }
    write_sweep_manifest(out, base, started, artifacts)?;
    Ok(rows)
}

/// Baseline and warmup runs of the same configuration in `out/<mode>`,
/// summarised in `comparison.csv`.
pub fn compare_modes(base: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<RunOutcome>> {
    let started = unix_now();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let modes = [Mode::BaselineSft, Mode::Warmup];
    let runs = run_jobs(jobs, &modes, |&mode| {
        let cfg = ExperimentConfig { mode, ..base.clone() };
        train_run(&cfg, &out.join(mode.as_str()))
    })?;
    let mut table = String::from(
        "mode,task,best_epoch,final_train_loss,exact_match,token_accuracy,bleu,chrf,macro_f1,accuracy\n",
    );
    for run in &runs {
        let t = &run.results.test;
        let last = run.records.last().map_or(f64::NAN, |r| r.train_loss);
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{}",
            run.results.mode,
            run.results.task,
            run.results.best_epoch,
            last,
            t.exact_match,
            t.token_accuracy,
            t.bleu,
            t.chrf,
            csv_metric(t.macro_f1),
            csv_metric(t.accuracy)
        );
    }
    write_text(&out.join("comparison.csv"), &table)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("comparison".into(), "comparison.csv".into());
    for m in modes {
        artifacts.insert(format!("run_{}", m.as_str()), format!("{}/manifest.json", m.as_str()));
    }
    write_sweep_manifest(out, base, started, artifacts)?;
    Ok(runs)
}

/// `epochs.jsonl` to CSV.
pub fn export_epochs(input: &Path) -> Result<String> {
    Ok(epochs_csv(&crate::records::read_epoch_records(input)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pathwise_gradient_is_caught_as_biased() {
        let (c, r) = check_gradient_estimator(5_000, 4, GradMode::Pathwise, 3).unwrap();
        assert!(!c.pass && r.failures > 0, "{}", c.line());
        let (c, _) = check_gradient_estimator(5_000, 4, GradMode::ScoreFunction, 3).unwrap();
        assert!(c.pass, "{}", c.line());
    }

    #[test]
    fn small_suites_pass() {
        assert!(check_mass(3, 1).unwrap().pass);
        assert!(check_jensen(6, 1).unwrap().pass);
        assert!(check_monte_carlo(2, 2_000, 1).unwrap().pass);
        assert!(check_k0_examples(20, 1).unwrap().pass);
        let r = gradcheck_suite(2, 1).unwrap();
        assert_eq!(r.entries.len(), 6);
        assert!(r.max_rel_error <= 1e-6);
    }
}
