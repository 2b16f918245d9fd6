//! Command-line front end: dataset generation, training, inference,
//! evaluation, gradient verification, and the ablation grid.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
//! failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use coactseg::config::{RunConfig, KEYS};
use coactseg::inference::sliding_window_predict;
use coactseg::losses::LossWeights;
use coactseg::metrics::{evaluate_dataset, EvalOptions, MetricsReport};
use coactseg::network::load_checkpoint;
use coactseg::phantom::{gen_dataset, Manifest, Split};
use coactseg::trainer::{network_grad_check, train, train_staged, TrainConfig};
use coactseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "coactseg",
    about = "Joint all-lesion / new-lesion segmentation on synthetic MS phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after the config file (overrides win).
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    Phantom(Common),
    /// Train the multi-head network on the generated dataset.
    Train(Common),
    /// Sliding-window inference over a dataset split.
    Infer(Common),
    /// Evaluate a checkpoint and write CSV + markdown reports.
    Eval(Common),
    /// Finite-difference check of the full network gradients.
    Gradcheck(Common),
    /// Run the 7-row data/regularizer ablation grid.
    Ablate(Common),
    /// Re-render the markdown report from a saved evaluation CSV.
    Report(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    Manifest::load(&cfg.data_dir.join("manifest.txt"))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run_dir.join("checkpoint_final.ckpt"))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        min_lesion_size: cfg.min_lesion_size,
        use_mm: cfg.distance_mm,
    }
}

fn cmd_phantom(cfg: &RunConfig) -> Result<u8> {
    fs::create_dir_all(&cfg.data_dir).map_err(|e| Error::io(&cfg.data_dir, e))?;
    let manifest = gen_dataset(&cfg.phantom_config(), cfg.dataset_counts(), &cfg.data_dir)?;
    cfg.save(&cfg.data_dir.join("run_config.txt"))?;
    println!(
        "wrote {} samples to {}",
        manifest.records.len(),
        cfg.data_dir.display()
    );
    Ok(0)
}

fn cmd_train(cfg: &RunConfig) -> Result<u8> {
    let manifest = load_manifest(cfg)?;
    let tcfg = cfg.train_config();
    let outcome = if cfg.staged {
        train_staged(&manifest, &tcfg, &cfg.run_dir)?
    } else {
        train(&manifest, &tcfg, &cfg.run_dir)?
    };
    cfg.save(&cfg.run_dir.join("run_config.txt"))?;
    let last = outcome.log.records.last().expect("non-empty log");
    println!(
        "trained {} iterations, final loss {:.6}, checkpoint {}",
        cfg.iterations,
        last.total,
        outcome.final_checkpoint.display()
    );
    Ok(0)
}

fn cmd_infer(cfg: &RunConfig) -> Result<u8> {
    let manifest = load_manifest(cfg)?;
    let net = load_checkpoint(&checkpoint_path(cfg))?;
    let icfg = cfg.inference_config();
    let split = Split::parse(&cfg.split)?;
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let mut n = 0;
    for r in manifest.records.iter().filter(|r| r.split == split) {
        let sample = manifest.load_sample(r)?;
        let result = sliding_window_predict(&net, &sample, icfg)?;
        result.save(&cfg.run_dir, &r.stem)?;
        n += 1;
    }
    println!("predicted {n} {} cases into {}", cfg.split, cfg.run_dir.display());
    Ok(0)
}

fn cmd_eval(cfg: &RunConfig) -> Result<u8> {
    let manifest = load_manifest(cfg)?;
    let net = load_checkpoint(&checkpoint_path(cfg))?;
    let split = Split::parse(&cfg.split)?;
    let report = evaluate_dataset(
        &manifest,
        &net,
        cfg.inference_config(),
        split,
        eval_options(cfg),
    )?;
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    report.save(&cfg.run_dir, &cfg.report_stem)?;
    print!("{}", report.to_markdown());
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<u8> {
    let err = network_grad_check(
        cfg.net_config(),
        cfg.gradcheck_patch,
        cfg.gradcheck_coords,
        cfg.gradcheck_eps,
        cfg.seed,
    )?;
    println!(
        "gradcheck max relative error {err:.3e} (tolerance {:.1e})",
        cfg.gradcheck_tol
    );
    if err.is_finite() && err < cfg.gradcheck_tol {
        Ok(0)
    } else {
        Ok(3)
    }
}

fn cmd_report(cfg: &RunConfig) -> Result<u8> {
    let path = cfg.run_dir.join(format!("{}.csv", cfg.report_stem));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report = MetricsReport::from_csv(&text)?;
    print!("{}", report.to_markdown());
    Ok(0)
}

struct AblationRow {
    label: &'static str,
    n_single: usize,
    n_two: usize,
    lambda2: f64,
    staged: bool,
}

fn cmd_ablate(cfg: &RunConfig) -> Result<u8> {
    let manifest = load_manifest(cfg)?;
    let total = cfg.batch_single + cfg.batch_two;
    // Table-3-shaped grid: {single-only, two-only, mixed} x {-, +} L_rr,
    // plus the staged mixed run.
    let rows = [
        AblationRow { label: "single-only", n_single: total, n_two: 0, lambda2: 0.0, staged: false },
        AblationRow { label: "single-only", n_single: total, n_two: 0, lambda2: cfg.lambda2, staged: false },
        AblationRow { label: "two-only", n_single: 0, n_two: total, lambda2: 0.0, staged: false },
        AblationRow { label: "two-only", n_single: 0, n_two: total, lambda2: cfg.lambda2, staged: false },
        AblationRow { label: "mixed", n_single: cfg.batch_single, n_two: cfg.batch_two, lambda2: 0.0, staged: false },
        AblationRow { label: "mixed", n_single: cfg.batch_single, n_two: cfg.batch_two, lambda2: cfg.lambda2, staged: false },
        AblationRow { label: "mixed", n_single: cfg.batch_single, n_two: cfg.batch_two, lambda2: cfg.lambda2, staged: true },
    ];

    let mut md = String::from(
        "| Data | L_rr | Staged | New-lesion Dice (mean) |\n|---|---|---|---|\n",
    );
    for (i, row) in rows.iter().enumerate() {
        let mut dices = Vec::new();
        for k in 0..cfg.ablate_seeds {
            let seed = cfg.seed.wrapping_add(k as u64);
            let tcfg = TrainConfig {
                n_single: row.n_single,
                n_two: row.n_two,
                seed,
                weights: LossWeights {
                    lambda1: cfg.lambda1,
                    lambda2: row.lambda2,
                    switch_iteration: if row.lambda2 == 0.0 {
                        cfg.iterations
                    } else {
                        cfg.switch_iteration
                    },
                },
                ..cfg.train_config()
            };
            let out_dir = cfg.run_dir.join(format!("ablate/row{i}_seed{k}"));
            let outcome = if row.staged {
                train_staged(&manifest, &tcfg, &out_dir)?
            } else {
                train(&manifest, &tcfg, &out_dir)?
            };
            let report = evaluate_dataset(
                &manifest,
                &outcome.net,
                cfg.inference_config(),
                Split::Val,
                eval_options(cfg),
            )?;
            let nl: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.head == "nl")
                .map(|r| r.dice)
                .collect();
            if !nl.is_empty() {
                dices.push(nl.iter().sum::<f64>() / nl.len() as f64);
            }
        }
        let mean = if dices.is_empty() {
            f64::NAN
        } else {
            dices.iter().sum::<f64>() / dices.len() as f64
        };
        md.push_str(&format!(
            "| {} | {} | {} | {:.4} |\n",
            row.label,
            if row.lambda2 > 0.0 { "yes" } else { "no" },
            if row.staged { "yes" } else { "no" },
            mean
        ));
    }
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let path = cfg.run_dir.join("ablation.md");
    fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    print!("{md}");
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    if let Ok(threads) = std::env::var("COACTSEG_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| Error::Config(format!("bad COACTSEG_THREADS `{threads}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("rayon pool: {e}")))?;
    }
    let (cmd, common): (fn(&RunConfig) -> Result<u8>, &Common) = match &cli.command {
        Command::Phantom(c) => (cmd_phantom, c),
        Command::Train(c) => (cmd_train, c),
        Command::Infer(c) => (cmd_infer, c),
        Command::Eval(c) => (cmd_eval, c),
        Command::Gradcheck(c) => (cmd_gradcheck, c),
        Command::Ablate(c) => (cmd_ablate, c),
        Command::Report(c) => (cmd_report, c),
    };
    let cfg = load_config(common)?;
    cmd(&cfg)
}

fn main() -> ExitCode {
    // Handle clap manually so --help/--version exit 0 and usage errors
    // exit 1 (clap's own default would be 2, which is reserved here for
    // runtime failures).
    let keys_help = format!("Config keys (key=value): {}", KEYS.join(", "));
    let matches = match Cli::command().after_help(keys_help).try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
