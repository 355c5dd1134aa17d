//! Command-line driver: dataset generation, the two training phases, the
//! clean-CE baseline, robustness evaluation, and the verification suites.
//!
//! Configuration flows from built-in defaults, through the `ANCHOR_PRECISION`
//! environment variable and an optional JSON config file of flat dotted keys,
//! to command-line flags that mirror the keys one to one
//! (`--attack.train.eps 0.031`). Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};

use anchor_core::config::{RunConfig, KEYS};
use anchor_core::data::{generate_split, load_dataset, save_dataset, Dataset, Split};
use anchor_core::error::AnchorError;
use anchor_core::models::load_checkpoint;
use anchor_core::pipeline::{
    adversarial_partial_train, baseline_ce_train, evaluate, prepare_run_dir, pretrain,
    write_checkpoint, MetricsWriter, RunPaths,
};
use anchor_core::verify::{gradcheck_suite, oracle_suite};

pub const USAGE: &str = "\
usage: anchor <command> [options] [--<config.key> <value>]...

commands:
  gen-data      generate train and test dataset containers into --out
  pretrain      phase 1: contrastive + adversarial pretraining
  apt           phase 2: adversarial partial training from --ckpt
  baseline      clean cross-entropy comparison arm
  eval          clean/robust accuracy of --ckpt on the test set
  gradcheck     finite-difference gradient suite (exit 0 iff max < 1e-4)
  oracle-check  loss-vs-oracle equivalence suite (exit 0 iff max <= 1e-9)

options:
  --config <file>      JSON config with flat dotted keys
  --out <dir>          run/output directory (default runs/<run-id>, data/ for gen-data)
  --ckpt <file>        checkpoint to load (apt, eval)
  --data <file>        dataset container to evaluate on (eval)
  --seed <n>           alias for the seed key
  --eps <x>            alias for attack.eval.eps
  --eval-workers <n>   alias for eval.workers
  --<config.key> <v>   any configuration key, e.g. --loss.tau 0.1

environment:
  ANCHOR_PRECISION     f32 | f64 (between defaults and the config file)
";

enum CliError {
    Usage(String),
    Runtime(AnchorError),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

struct ParsedArgs {
    command: String,
    config_path: Option<PathBuf>,
    out: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    overrides: Vec<(String, serde_json::Value)>,
}

fn parse_value(raw: &str) -> serde_json::Value {
    // Numbers, booleans and arrays parse as JSON; everything else is a string.
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn parse_args(args: &[String]) -> CliResult<ParsedArgs> {
    let command = args
        .first()
        .ok_or_else(|| usage("missing command"))?
        .clone();
    let mut parsed = ParsedArgs {
        command,
        config_path: None,
        out: None,
        ckpt: None,
        data: None,
        overrides: Vec::new(),
    };

    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("expected a flag, got {flag:?}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| usage(format!("flag --{key} is missing a value")))?;
        match key {
            "config" => parsed.config_path = Some(PathBuf::from(value)),
            "out" => parsed.out = Some(PathBuf::from(value)),
            "ckpt" => parsed.ckpt = Some(PathBuf::from(value)),
            "data" => parsed.data = Some(PathBuf::from(value)),
            "seed" => parsed.overrides.push(("seed".into(), parse_value(value))),
            "eps" => parsed
                .overrides
                .push(("attack.eval.eps".into(), parse_value(value))),
            "eval-workers" => parsed
                .overrides
                .push(("eval.workers".into(), parse_value(value))),
            other if KEYS.contains(&other) => {
                parsed.overrides.push((other.to_string(), parse_value(value)));
            }
            other => return Err(usage(format!("unknown flag --{other}"))),
        }
        i += 2;
    }
    Ok(parsed)
}

/// Defaults < ANCHOR_PRECISION < config file < flags.
fn resolve_config(parsed: &ParsedArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(p) = std::env::var("ANCHOR_PRECISION") {
        cfg.precision = p.parse().map_err(|e: AnchorError| usage(e.to_string()))?;
    }
    if let Some(path) = &parsed.config_path {
        cfg.apply_file(path).map_err(|e| usage(e.to_string()))?;
    }
    for (key, value) in &parsed.overrides {
        cfg.set(key, value).map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_or_generate(cfg: &RunConfig, split: Split) -> Result<Dataset, AnchorError> {
    let (path, n) = match split {
        Split::Train => (&cfg.data_train_path, cfg.data_n_train),
        Split::Test => (&cfg.data_test_path, cfg.data_n_test),
    };
    if !path.is_empty() {
        return load_dataset(Path::new(path));
    }
    generate_split(cfg.data_kind, cfg.data_classes, n, cfg.data_noise, cfg.seed, split)
}

fn print_eval_line(label: &str, clean: f64, robust: f64) {
    println!(
        "{}",
        serde_json::json!({ "subject": label, "clean_acc": clean, "robust_acc": robust })
    );
}

fn run_training_phase(parsed: &ParsedArgs, phase: &str) -> CliResult<i32> {
    let cfg = resolve_config(parsed)?;
    let run_id = cfg.run_id();
    let out = parsed
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&run_id));

    let result = (|| -> Result<i32, AnchorError> {
        let train = load_or_generate(&cfg, Split::Train)?;
        let test = load_or_generate(&cfg, Split::Test)?;
        let tc = cfg.train_config();
        let paths = prepare_run_dir(&out, &run_id, &cfg.canonical_json(), phase)?;
        let mut metrics = MetricsWriter::to_file(&paths.metrics())?;

        let bundle = match phase {
            "pretrain" => pretrain(&tc, &train, Some(&test), &mut metrics)?,
            "baseline" => baseline_ce_train(&tc, &train, Some(&test), &mut metrics)?,
            "apt" => {
                let ckpt = parsed
                    .ckpt
                    .as_ref()
                    .ok_or_else(|| AnchorError::Config("apt requires --ckpt".into()))?;
                let pretrained = load_checkpoint(ckpt)?;
                adversarial_partial_train(&tc, &train, Some(&test), pretrained, &mut metrics)?
            }
            other => unreachable!("phase {other}"),
        };
        let ckpt_path = write_checkpoint(&bundle, &paths, phase)?;

        let last = metrics.records.last().expect("at least one epoch");
        println!(
            "{}",
            serde_json::json!({
                "run_id": run_id,
                "phase": phase,
                "out": out.display().to_string(),
                "checkpoint": ckpt_path.display().to_string(),
                "final_loss": last.loss_total,
                "clean_acc": last.clean_acc,
                "robust_acc": last.robust_acc,
            })
        );
        Ok(0)
    })();
    result.map_err(|e| {
        if matches!(e, AnchorError::Config(_)) {
            usage(e.to_string())
        } else {
            CliError::Runtime(e)
        }
    })
}

fn run(args: &[String]) -> CliResult<i32> {
    let parsed = parse_args(args)?;
    match parsed.command.as_str() {
        "gen-data" => {
            let cfg = resolve_config(&parsed)?;
            let out = parsed.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            (|| -> Result<i32, AnchorError> {
                std::fs::create_dir_all(&out)?;
                let train = generate_split(
                    cfg.data_kind,
                    cfg.data_classes,
                    cfg.data_n_train,
                    cfg.data_noise,
                    cfg.seed,
                    Split::Train,
                )?;
                let test = generate_split(
                    cfg.data_kind,
                    cfg.data_classes,
                    cfg.data_n_test,
                    cfg.data_noise,
                    cfg.seed,
                    Split::Test,
                )?;
                let train_path = out.join("train.ds");
                let test_path = out.join("test.ds");
                save_dataset(&train, &train_path)?;
                save_dataset(&test, &test_path)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "train": train_path.display().to_string(),
                        "test": test_path.display().to_string(),
                        "n_train": train.len(),
                        "n_test": test.len(),
                        "class_count": train.class_count,
                    })
                );
                Ok(0)
            })()
            .map_err(CliError::Runtime)
        }
        "pretrain" | "apt" | "baseline" => run_training_phase(&parsed, &parsed.command.clone()),
        "eval" => {
            let cfg = resolve_config(&parsed)?;
            let ckpt = parsed
                .ckpt
                .as_ref()
                .ok_or_else(|| usage("eval requires --ckpt"))?;
            (|| -> Result<i32, AnchorError> {
                let bundle = load_checkpoint(ckpt)?;
                let dataset = match &parsed.data {
                    Some(path) => load_dataset(path)?,
                    None => load_or_generate(&cfg, Split::Test)?,
                };
                let tc = cfg.train_config();
                let ev = evaluate(&bundle, &dataset, &tc.attack_eval, &tc)?;
                print_eval_line("eval", ev.clean_acc, ev.robust_acc);
                Ok(0)
            })()
            .map_err(CliError::Runtime)
        }
        "gradcheck" => {
            let cfg = resolve_config(&parsed)?;
            (|| -> Result<i32, AnchorError> {
                let mut max = 0.0f64;
                for offset in 0..3u64 {
                    let seed = cfg.seed.wrapping_add(offset);
                    let report = gradcheck_suite(seed)?;
                    let worst = report.worst().expect("suite is non-empty");
                    println!(
                        "seed {seed}: {} checks, max relative error {:.3e} ({})",
                        report.checks.len(),
                        report.max_error(),
                        worst.name
                    );
                    max = max.max(report.max_error());
                }
                println!("max relative error {max:.3e}");
                Ok(if max < 1e-4 { 0 } else { 2 })
            })()
            .map_err(CliError::Runtime)
        }
        "oracle-check" => {
            let cfg = resolve_config(&parsed)?;
            (|| -> Result<i32, AnchorError> {
                let report = oracle_suite(cfg.seed, 100)?;
                println!(
                    "{} batches, max |impl - oracle| = {:.3e}",
                    report.cases, report.max_abs_diff
                );
                Ok(if report.passed(1e-9) { 0 } else { 2 })
            })()
            .map_err(CliError::Runtime)
        }
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

/// Entry point shared by the binary and the tests. Returns the process exit
/// code; diagnostics go to standard error.
pub fn cli_dispatch(args: &[String]) -> i32 {
    match run(args) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Helper for tests and the binary: run the relevant phase, capturing paths.
pub fn run_dir_paths(out: &Path) -> RunPaths {
    RunPaths::new(out)
}
