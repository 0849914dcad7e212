//! `onionlab`: generate data, train GRUs, run interventions and probes,
//! export gate traces and tabulate results.

mod artifacts;
mod commands;
mod config;
mod failure;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use onion_core::probes::ProbeKind;

use crate::commands::InterventionKind;
use crate::config::{ConfigArgs, Target};
use crate::failure::{Failure, EXIT_CODES_HELP, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "onionlab", version = artifacts::VERSION, after_help = EXIT_CODES_HELP, args_override_self = true)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    /// Log training progress.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and store the train/test corpora.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base GRU.
    Train {
        /// Directory written by `gen-data`; generated on the fly if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match accuracy of a checkpoint on the full test set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate an intervention on a frozen model.
    Intervene {
        #[arg(value_enum)]
        kind: InterventionKind,
        #[arg(long)]
        model: PathBuf,
        /// Onion control: hold γ and β at 1.
        #[arg(long)]
        control: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a probe on frozen final states.
    Probe {
        /// linear | mlp | gru-ar | gru-noinput | onion
        #[arg(value_parser = parse_probe)]
        kind: ProbeKind,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Update-gate traces: CSV + PPM heatmap and the monotonicity statistic.
    Gates {
        #[arg(long)]
        model: PathBuf,
        /// Space-separated tokens; defaults to the first 100 test sequences.
        #[arg(long)]
        input: Option<String>,
        /// Pixel size of one heatmap cell.
        #[arg(long, default_value_t = 8)]
        cell: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the hand-designed scale-recurrence memory.
    Toy {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate every `result.json` below a directory.
    Report {
        #[arg(long)]
        root: PathBuf,
        /// Defaults to `<root>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_probe(s: &str) -> Result<ProbeKind, String> {
    s.parse().map_err(|e: onion_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.config;
    match cli.command {
        Command::GenData { out } => commands::gen_data(c, &out),
        Command::Train { data, out } => commands::train(c, data.as_deref(), &out),
        Command::Eval { model, data, out } => commands::eval(c, &model, data.as_deref(), &out),
        Command::Intervene {
            kind,
            model,
            control,
            data,
            out,
        } => commands::intervene(c, kind, control, &model, data.as_deref(), &out),
        Command::Probe {
            kind,
            model,
            data,
            out,
        } => commands::probe(c, kind, &model, data.as_deref(), &out),
        Command::Gates {
            model,
            input,
            cell,
            data,
            out,
        } => commands::gates(c, &model, input.as_deref(), cell, data.as_deref(), &out),
        Command::Toy { data, out } => commands::toy(c, data.as_deref(), &out),
        Command::Report { root, out } => {
            let out = out.unwrap_or_else(|| root.join("report"));
            write_report(c, &root, &out)
        }
    }
}

fn write_report(c: &ConfigArgs, root: &std::path::Path, out: &std::path::Path) -> Result<(), Failure> {
    let cfg = c.resolve(Target::Base)?;
    let found = commands::collect_results(root)?;
    let mut run = artifacts::RunDir::create(out, "report")?;
    for (p, _) in &found {
        let label = p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
        run.add_input(&label, p)?;
    }
    let rows: Vec<(&std::path::Path, &commands::RunResult)> =
        found.iter().map(|(p, r)| (p.as_path(), r)).collect();
    let (tables, summary) = report::build(&rows);
    for t in &tables {
        run.write(t.name, t.tsv.as_bytes())?;
    }
    run.write("summary.txt", summary.as_bytes())?;
    run.write_provenance(&cfg, cfg.train.seed)?;
    print!("{summary}");
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::new().parse_filters(level).init();
    let code = match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.record());
            f.exit_code
        }
    };
    std::process::exit(code);
}
