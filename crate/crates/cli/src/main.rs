use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use osd_cli::commands::{
    cmd_analyze, cmd_eval, cmd_gen, cmd_index, cmd_pipeline, cmd_train_docs, cmd_train_task,
};
use osd_cli::{EvalSummary, Overrides, RunConfig, OUT_DIR_ENV};
use osd_core::benchmark::WeightMode;
use osd_core::Variant;

/// Orthogonal task/knowledge adapter experiments on a synthetic world.
#[derive(Debug, Parser)]
#[command(name = "osd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Restrict training and analysis to one knowledge-adapter variant.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Comma-separated retrieval depths, e.g. `1,3,5`.
    #[arg(long = "k", global = true, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    /// How retrieved adapters are weighted when merged.
    #[arg(long, global = true, value_parser = parse_weight_mode)]
    weight_mode: Option<WeightMode>,
    /// Output root (overrides the environment variable and the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic worlds, corpus and task instances.
    Gen,
    /// Build the BM25 index and write its flat dump.
    Index,
    /// Train the shared task adapters.
    TrainTask,
    /// Train per-document knowledge adapters.
    TrainDocs,
    /// Run the retrieval-depth sweep.
    Eval,
    /// Compare adapter similarity for relevant and irrelevant document pairs.
    Analyze,
    /// Run every stage in order.
    Pipeline,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: osd_core::OsdError| e.to_string())
}

fn parse_weight_mode(s: &str) -> Result<WeightMode, String> {
    s.parse().map_err(|e: osd_core::OsdError| e.to_string())
}

fn resolve(args: &GlobalArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: args.seed,
        jobs: args.jobs,
        variant: args.variant,
        k_list: args.k_list.clone(),
        weight_mode: args.weight_mode,
        out_dir: args.out.clone(),
    };
    let env_out = std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from);
    file.resolve(&overrides, env_out)
        .context("resolving configuration")
}

fn print_eval(report: &osd_core::benchmark::DepthSweepReport) {
    for s in &report.summary {
        let curve: Vec<String> = s
            .mean_by_k
            .iter()
            .map(|(k, v)| match v {
                Some(v) => format!("K={k}:{v:.3}"),
                None => format!("K={k}:failed"),
            })
            .collect();
        let degradation = s
            .degradation
            .map_or_else(|| "n/a".to_string(), |d| format!("{d:.3}"));
        println!(
            "{:<20} {:<12} {}  degradation {degradation}",
            s.method,
            s.metric,
            curve.join(" ")
        );
    }
    println!("{}", EvalSummary::from(report));
}

fn print_analysis(report: &osd_core::analysis::SimilarityReport) {
    for s in &report.sections {
        let fmt = |m: Option<f64>| m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<10} {:<7} relevant mean {} ({} pairs), irrelevant mean {} ({} pairs)",
            s.variant.as_str(),
            s.kind.as_str(),
            fmt(s.relevant.mean),
            s.relevant.cosines.len(),
            fmt(s.irrelevant.mean),
            s.irrelevant.cosines.len()
        );
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve(&cli.global)?;
    match cli.command {
        Command::Gen => println!("{}", cmd_gen(&config)?),
        Command::Index => println!("indexed {} terms", cmd_index(&config)?),
        Command::TrainTask => println!("{}", cmd_train_task(&config)?),
        Command::TrainDocs => println!("{}", cmd_train_docs(&config)?),
        Command::Eval => print_eval(&cmd_eval(&config)?),
        Command::Analyze => print_analysis(&cmd_analyze(&config)?),
        Command::Pipeline => {
            let (sweep, analysis) = cmd_pipeline(&config)?;
            print_eval(&sweep);
            print_analysis(&analysis);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
