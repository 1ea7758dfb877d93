//! Command-line interface.
//!
//! `--config` names the run file; any `--<section.key> <value>` flag with a
//! known config key overrides it. Exit codes: 0 success, 1 usage or
//! validation error, 2 runtime failure.

use std::path::PathBuf;

use crate::detect::calibrate_gamma;
use crate::harness::artifacts::{read_jsonl, render_table, ReportRow, ScoreDumpRecord};
use crate::harness::config::{ConfigMap, RunConfig};
use crate::harness::run::{
    evaluate_mixed_dump, run_experiment, stage_eval, stage_mine, stage_score, stage_train,
};
use crate::harness::toyset::generate_toy_dataset;
use crate::{Error, Result};

const USAGE: &str = "\
usage: idlike <subcommand> [flags]

subcommands:
  mine       mine id-like outlier crops from the few-shot set
  train      tune ID and OOD prompts on the mined sets
  score      score the test manifests against the trained prompts
  eval       recompute metrics from score dumps
  run        mine + train + score + eval
  calibrate  compute the acceptance threshold from a score dump
  report     print the report table for a finished run
  gen-toy    generate a small synthetic pattern dataset plus a ready config

common flags:
  --config <path>          run configuration file
  --<section.key> <value>  override one config key (e.g. --miner.M 64)

eval:        --scores <dump.jsonl> (repeatable; labeled records are ID,
             unlabeled are OOD) or --config for a full report
calibrate:   --scores <dump.jsonl> [--tpr 0.95] [--field score_idlike]
gen-toy:     --out <dir> [--seed 7] [--id-classes 8] [--ood-classes 4]
             [--train-per-class 8] [--test-per-class 8]
";

fn is_validation(err: &Error) -> bool {
    matches!(
        err,
        Error::InvalidConfig(_)
            | Error::MissingFile(_)
            | Error::UnknownLabel { .. }
            | Error::EmptyManifest(_)
            | Error::InsufficientSamples { .. }
            | Error::InvalidTargetTpr(_)
            | Error::InvalidTemplate(_)
    )
}

#[derive(Debug, Default)]
struct ParsedArgs {
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    scores: Vec<PathBuf>,
    tpr: f64,
    field: String,
    out: Option<PathBuf>,
    seed: u64,
    id_classes: usize,
    ood_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
}

fn parse_args(sub: &str, args: &[String]) -> Result<ParsedArgs> {
    let mut parsed = ParsedArgs {
        tpr: 0.95,
        field: "score_idlike".to_string(),
        seed: 7,
        id_classes: 8,
        ood_classes: 4,
        train_per_class: 8,
        test_per_class: 8,
        ..ParsedArgs::default()
    };
    let mut i = 0;
    let next_value = |i: &mut usize, flag: &str| -> Result<String> {
        *i += 1;
        args.get(*i)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("flag {flag} expects a value")))
    };
    let parse_num = |flag: &str, raw: &str| -> Result<usize> {
        raw.parse()
            .map_err(|_| Error::InvalidConfig(format!("flag {flag} expects an integer, got {raw:?}")))
    };
    while i < args.len() {
        let arg = args[i].as_str();
        match arg {
            "--config" => parsed.config = Some(PathBuf::from(next_value(&mut i, arg)?)),
            "--scores" if matches!(sub, "eval" | "calibrate") => {
                parsed.scores.push(PathBuf::from(next_value(&mut i, arg)?));
            }
            "--tpr" if sub == "calibrate" => {
                let raw = next_value(&mut i, arg)?;
                parsed.tpr = raw.parse().map_err(|_| {
                    Error::InvalidConfig(format!("flag --tpr expects a number, got {raw:?}"))
                })?;
            }
            "--field" if sub == "calibrate" => parsed.field = next_value(&mut i, arg)?,
            "--out" if sub == "gen-toy" => {
                parsed.out = Some(PathBuf::from(next_value(&mut i, arg)?));
            }
            "--seed" if sub == "gen-toy" => {
                parsed.seed = parse_num(arg, &next_value(&mut i, arg)?)? as u64;
            }
            "--id-classes" if sub == "gen-toy" => {
                parsed.id_classes = parse_num(arg, &next_value(&mut i, arg)?)?;
            }
            "--ood-classes" if sub == "gen-toy" => {
                parsed.ood_classes = parse_num(arg, &next_value(&mut i, arg)?)?;
            }
            "--train-per-class" if sub == "gen-toy" => {
                parsed.train_per_class = parse_num(arg, &next_value(&mut i, arg)?)?;
            }
            "--test-per-class" if sub == "gen-toy" => {
                parsed.test_per_class = parse_num(arg, &next_value(&mut i, arg)?)?;
            }
            key if key.starts_with("--") && key.contains('.') => {
                let value = next_value(&mut i, arg)?;
                parsed.overrides.push((key[2..].to_string(), value));
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown flag: {other}")));
            }
        }
        i += 1;
    }
    Ok(parsed)
}

fn load_config(parsed: &ParsedArgs) -> Result<RunConfig> {
    let mut map = match &parsed.config {
        Some(path) => ConfigMap::from_file(path)?,
        None => {
            return Err(Error::InvalidConfig(
                "this subcommand requires --config <path>".into(),
            ))
        }
    };
    for (key, value) in &parsed.overrides {
        map.apply_override(key, value)?;
    }
    RunConfig::from_map(&map)
}

fn read_dumps(paths: &[PathBuf]) -> Result<Vec<ScoreDumpRecord>> {
    let mut all = Vec::new();
    for path in paths {
        all.extend(read_jsonl::<ScoreDumpRecord>(path)?);
    }
    Ok(all)
}

fn dispatch(sub: &str, parsed: &ParsedArgs) -> Result<()> {
    match sub {
        "mine" => {
            stage_mine(&load_config(parsed)?)?;
            println!("mined sets written");
            Ok(())
        }
        "train" => {
            stage_train(&load_config(parsed)?)?;
            println!("checkpoint written");
            Ok(())
        }
        "score" => {
            stage_score(&load_config(parsed)?)?;
            println!("score dumps written");
            Ok(())
        }
        "run" => {
            let rows = run_experiment(&load_config(parsed)?)?;
            print!("{}", render_table(&rows));
            Ok(())
        }
        "eval" => {
            if parsed.scores.is_empty() {
                let rows = stage_eval(&load_config(parsed)?)?;
                print!("{}", render_table(&rows));
            } else {
                let tau = match &parsed.config {
                    Some(_) => load_config(parsed)?.tau,
                    None => 0.01,
                };
                let result = evaluate_mixed_dump(&read_dumps(&parsed.scores)?, tau)?;
                println!("{}", serde_json::to_string(&result)?);
            }
            Ok(())
        }
        "calibrate" => {
            if parsed.scores.is_empty() {
                return Err(Error::InvalidConfig(
                    "calibrate requires --scores <dump.jsonl>".into(),
                ));
            }
            let dump = read_dumps(&parsed.scores)?;
            let labeled: Vec<&ScoreDumpRecord> =
                dump.iter().filter(|r| r.label.is_some()).collect();
            let pool: Vec<&ScoreDumpRecord> = if labeled.is_empty() {
                dump.iter().collect()
            } else {
                labeled
            };
            let scores: Vec<f64> = pool
                .iter()
                .map(|r| match parsed.field.as_str() {
                    "score_idlike" => Ok(r.score_idlike),
                    "score_mcm" => Ok(r.score_mcm),
                    "score_msp" => Ok(r.score_msp),
                    other => Err(Error::InvalidConfig(format!(
                        "unknown score field {other:?}"
                    ))),
                })
                .collect::<Result<_>>()?;
            let gamma = calibrate_gamma(&scores, parsed.tpr)?;
            println!(
                "gamma = {gamma} (field = {}, target_tpr = {}, n = {})",
                parsed.field,
                parsed.tpr,
                scores.len()
            );
            Ok(())
        }
        "report" => {
            let cfg = load_config(parsed)?;
            let path = cfg.output_dir.join("report.jsonl");
            let rows: Vec<ReportRow> = read_jsonl(&path)?;
            print!("{}", render_table(&rows));
            Ok(())
        }
        "gen-toy" => {
            let out = parsed.out.clone().ok_or_else(|| {
                Error::InvalidConfig("gen-toy requires --out <dir>".into())
            })?;
            let ds = generate_toy_dataset(
                &out,
                parsed.seed,
                parsed.id_classes,
                parsed.ood_classes,
                parsed.train_per_class,
                parsed.test_per_class,
            )?;
            let config = format!(
                "data.id_train = id_train.tsv\n\
                 data.id_test = id_test.tsv\n\
                 data.ood_test = ood_test.tsv\n\
                 encoder.kind = toy\n\
                 encoder.seed = {seed}\n\
                 encoder.dim = 64\n\
                 miner.M = 64\n\
                 miner.Q = 8\n\
                 miner.seed = {seed}\n\
                 miner.scale_lo = 0.9\n\
                 prompts.C = 16\n\
                 prompts.L = 8\n\
                 loss.tau = 0.2\n\
                 loss.lambda_out = 0.1\n\
                 train.lr = 0.02\n\
                 train.epochs = 3\n\
                 train.seed = {seed}\n\
                 run.shots = 4\n\
                 run.seed = {seed}\n\
                 run.output_dir = out\n",
                seed = parsed.seed
            );
            let cfg_path = ds.root.join("toy.cfg");
            std::fs::write(&cfg_path, config)?;
            println!("toy dataset under {}", ds.root.display());
            println!("run it with: idlike run --config {}", cfg_path.display());
            Ok(())
        }
        other => Err(Error::InvalidConfig(format!("unknown subcommand: {other}"))),
    }
}

/// Entry point shared by `main` and the tests; returns the process exit code.
pub fn cli<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let args: Vec<String> = argv.into_iter().collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "help" {
        eprint!("{USAGE}");
        return 1;
    }
    let sub = args[0].as_str();
    let parsed = match parse_args(sub, &args[1..]) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match dispatch(sub, &parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if is_validation(&e) {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(cli(["run".into(), "--bogus".into()]), 1);
    }

    #[test]
    fn unknown_subcommand_exits_one() {
        assert_eq!(cli(["frobnicate".into()]), 1);
    }

    #[test]
    fn missing_config_exits_one() {
        assert_eq!(cli(["run".into()]), 1);
    }

    #[test]
    fn unknown_override_key_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "miner.M = 64\nminer.Q = 8\n").unwrap();
        assert_eq!(
            cli([
                "mine".into(),
                "--config".into(),
                cfg.display().to_string(),
                "--bogus.key".into(),
                "3".into()
            ]),
            1
        );
    }
}
