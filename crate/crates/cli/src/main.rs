use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use grid_vlp::harness::{bench, train, Mode, RunConfig};
use grid_vlp::Error;

/// Grid-feature vision-language pre-training at desk scale.
///
/// Every subcommand accepts `--config FILE` plus any number of `--key value`
/// overrides of run-configuration keys.
#[derive(Parser)]
#[command(name = "gridvlp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train and eval splits.
    GenData(Overrides),
    /// Train the grid encoder as a per-cell classifier.
    PretrainCnn(Overrides),
    /// Multi-task pre-training of the fusion model.
    Pretrain(Overrides),
    /// QA fine-tuning on full grids.
    Finetune(Overrides),
    /// Evaluate a checkpoint on a split.
    Eval(Overrides),
    /// Time grid and region feature paths and the full forward pass.
    Bench(Overrides),
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

fn verbose() -> bool {
    std::env::var("GRIDVLP_LOG").is_ok_and(|v| matches!(v.as_str(), "debug" | "info" | "1"))
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    let (mode, args) = match command {
        Command::GenData(o) => (Mode::GenData, o.args),
        Command::PretrainCnn(o) => (Mode::PretrainCnn, o.args),
        Command::Pretrain(o) => (Mode::Pretrain, o.args),
        Command::Finetune(o) => (Mode::Finetune, o.args),
        Command::Eval(o) => (Mode::Eval, o.args),
        Command::Bench(o) => (Mode::Bench, o.args),
    };
    let mut args = args;
    args.push("--mode".into());
    args.push(mode.as_str().into());
    let cfg = RunConfig::from_args(&args)?;
    if verbose() {
        for (k, v) in cfg.to_pairs() {
            eprintln!("{k} = {v}");
        }
    }
    match mode {
        Mode::GenData => {
            let s = train::gen_data(&cfg)?;
            println!("wrote {} train and {} eval samples under {}", s.train, s.eval, s.root.display());
        }
        Mode::PretrainCnn => {
            let s = train::pretrain_cnn(&cfg)?;
            println!(
                "cell accuracy on held-out images: {:.4} (balanced {:.4}); checkpoint {}",
                s.heldout.overall,
                s.heldout.balanced,
                s.checkpoint.display()
            );
        }
        Mode::Pretrain => {
            let s = train::pretrain(&cfg)?;
            if let Some(last) = &s.last {
                println!(
                    "{} steps; final loss {:.4} (mlm {:.4}, itm {:.4}, qa {:.4})",
                    s.steps, last.loss_total, last.loss_mlm, last.loss_itm, last.loss_qa
                );
            }
            println!("checkpoint {}; log {}", s.checkpoint.display(), s.log.display());
        }
        Mode::Finetune => {
            let s = train::finetune(&cfg)?;
            match s.steps_to_target {
                Some(n) => println!("QA accuracy reached {} after {n} steps", cfg.qa_target),
                None => println!("QA accuracy stayed below {} for {} steps", cfg.qa_target, s.steps_run),
            }
            if verbose() {
                print_json(&s.curve)?;
            }
        }
        Mode::Eval => print_json(&train::run_eval(&cfg)?)?,
        Mode::Bench => {
            let report = bench::run_bench(&cfg)?;
            let (md, csv) = bench::write_report(&cfg, &report)?;
            print!("{}", report.to_markdown());
            println!("\nwrote {} and {}", md.display(), csv.display());
        }
    }
    Ok(())
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "io" => 3,
        "format" | "checkpoint" => 4,
        "input" => 5,
        "diverged" => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command).context("gridvlp failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .map_or("internal", Error::category);
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
