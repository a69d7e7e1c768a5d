use std::path::Path;
use std::process::Command;

use warmgen::checkpoint::load_checkpoint;
use warmgen::records::{read_epoch_records, RunManifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_warmgen"))
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    let text = format!(
        "# small copy run\ntask = copy\nvocab_size = 8\nmin_len = 1\nmax_len = 3\nn_train = 40\nn_valid = 10\nn_test = 10\n\
         d_model = 8\nn_heads = 2\nn_layers_encoder = 1\nn_layers_decoder = 1\nd_ff = 16\nmax_seq_len = 12\n\
         max_warmup_len = 2\nn_samples = 2\nbeam_size = 2\nepochs = 2\nbatch_size = 8\nlearning_rate = 3e-3\n\
         record_timing = false\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = bin().args(["gradcheck", "--configs", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
    assert_eq!(warmgen::cli::run_cli(["warmgen", "no-such-command"]), 2);
}

#[test]
fn unknown_config_key_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "learning_rat = 1\n");
    let out = bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("d")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn train_eval_infer_export_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run = dir.path().join("run");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let records = read_epoch_records(&run.join("epochs.jsonl")).unwrap();
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert!(records.iter().all(|r| r.seconds.is_none()));
    let manifest = RunManifest::read(&run.join("manifest.json")).unwrap();
    for rel in manifest.artifacts.values() {
        assert!(run.join(rel).exists(), "{rel}");
    }
    assert_eq!(manifest.data_hash.len(), 64);
    assert!(manifest.config.contains("task = copy"));

    // a finished run directory is never overwritten
    let again = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert_eq!(again.status.code(), Some(1));

    let ckpt = run.join("checkpoints/epoch_002.ckpt");
    assert_eq!(load_checkpoint(&ckpt).unwrap().config().d_model, 8);
    let out = bin().arg("eval").arg("--checkpoint").arg(&ckpt).arg("--data").arg(run.join("data/test.tsv")).output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["exact_match", "token_accuracy", "bleu", "chrf"] {
        assert!(report[k].is_number(), "{k}");
    }
    assert!(report["macro_f1"].is_null());

    let out = bin().arg("infer").arg("--checkpoint").arg(&ckpt).args(["--source", "a b 5"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let full = text.lines().find(|l| l.starts_with("full:")).unwrap();
    assert_eq!(full.matches("||").count(), 1);

    let csv_path = dir.path().join("e.csv");
    let out = bin().arg("export").arg("--input").arg(run.join("epochs.jsonl")).arg("--output").arg(&csv_path).output().unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_loss,valid_metric,seconds"));

    let out = bin().arg("analyze-overlap").arg("--outputs").arg(run.join("test_outputs.jsonl")).output().unwrap();
    // a barely trained model may decode empty warmups everywhere, which is a reported failure
    let stdout = String::from_utf8_lossy(&out.stdout);
    match out.status.code() {
        Some(0) => assert!(stdout.starts_with("overlap rate: ")),
        Some(1) => assert!(String::from_utf8_lossy(&out.stderr).contains("non-empty warmup")),
        c => panic!("unexpected exit {c:?}"),
    }
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "seed = 1\n");
    let gen = |seed: &str, out: &str| {
        let o = bin().env("WGEN_SEED", seed).args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join(out)).output().unwrap();
        assert!(o.status.success());
        std::fs::read_to_string(dir.path().join(out).join("train.tsv")).unwrap()
    };
    assert_eq!(gen("5", "a"), gen("5", "b"));
    assert_ne!(gen("5", "a"), gen("6", "c"));
}

#[test]
fn gradcheck_command_prints_max_error() {
    let out = bin().args(["gradcheck", "--configs", "2", "--seed", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let v: f64 = last.strip_prefix("max relative error: ").unwrap().parse().unwrap();
    assert!(v <= 1e-6);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let base = warmgen::config::ExperimentConfig::load(&tiny_config(dir.path(), "")).unwrap();
    let run = |threads: usize| {
        let cfg = warmgen::config::ExperimentConfig { threads, ..base.clone() };
        let out = dir.path().join(format!("t{threads}"));
        warmgen::run::train_run(&cfg, &out).unwrap();
        (
            std::fs::read(out.join("epochs.jsonl")).unwrap(),
            std::fs::read(out.join("checkpoints/epoch_002.ckpt")).unwrap(),
            std::fs::read(out.join("test_outputs.jsonl")).unwrap(),
        )
    };
    assert_eq!(run(1), run(3));
}
