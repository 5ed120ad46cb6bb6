//! Command-line front end: corpus generation, pipeline runs, report
//! comparison, stable-layer analysis, and cache inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samkv::corpus::generate_corpus;
use samkv::error::{Error, Result};
use samkv::kv::load_cache;
use samkv::pipeline::{
    analyze_layers, compare_runs, run_pipeline, PipelineConfig, RunMode, RunReport,
};
use samkv::recompute::UpdatePolicy;

#[derive(Parser)]
#[command(name = "samkv", about = "Sparse multi-context KV cache pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct ConfigArgs {
    /// TOML config file; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// samkv | full_recompute | reuse_only | initial_local_only
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute budget in (0, 1].
    #[arg(long)]
    budget: Option<f32>,
    /// overwrite | fusion
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Report output path (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and print it as JSON.
    GenCorpus {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the corpus here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline and write a run report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare two run reports over the same corpus.
    Compare { report_a: PathBuf, report_b: PathBuf },
    /// Detect the stable layer set and print it.
    AnalyzeLayers {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print a summary of a saved document cache.
    DumpCache { cache: PathBuf },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut config: PipelineConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(mode) = &args.mode {
        config.mode = match mode.as_str() {
            "samkv" => RunMode::Samkv,
            "full_recompute" => RunMode::FullRecompute,
            "reuse_only" => RunMode::ReuseOnly,
            "initial_local_only" => RunMode::InitialLocalOnly,
            other => return Err(Error::Config(format!("unknown mode {other}"))),
        };
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(budget) = args.budget {
        config.recompute_budget = budget;
    }
    if let Some(policy) = &args.policy {
        config.policy = match policy.as_str() {
            "overwrite" => UpdatePolicy::Overwrite,
            "fusion" => UpdatePolicy::Fusion,
            other => return Err(Error::Config(format!("unknown policy {other}"))),
        };
    }
    if let Some(bs) = args.block_size {
        config.block_size = bs;
    }
    if let Some(report) = &args.report {
        config.report_path = Some(report.clone());
    }
    Ok(config)
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("cannot parse report {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { config, out } => {
            let config = load_config(&config)?;
            let corpus = generate_corpus(&config.corpus_spec())?;
            let json = serde_json::to_string_pretty(&corpus).expect("corpus serializes");
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
        Command::Run { config } => {
            let config = load_config(&config)?;
            let report = run_pipeline(&config)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match &config.report_path {
                Some(path) => {
                    std::fs::write(path, &json)?;
                    println!(
                        "mode={:?} seq_ratio={:.4} recompute_ratio={:.4} agree={} cos={:.6} -> {}",
                        report.mode,
                        report.sequence_ratio,
                        report.recomputation_ratio,
                        report.next_token_agreement,
                        report.baseline_hidden_cosine,
                        path.display()
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Compare { report_a, report_b } => {
            let a = read_report(&report_a)?;
            let b = read_report(&report_b)?;
            let summary = compare_runs(&a, &b)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::AnalyzeLayers { config } => {
            let config = load_config(&config)?;
            let report = analyze_layers(&config)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::DumpCache { cache } => {
            let doc = load_cache(&cache)?;
            let blocks: Vec<serde_json::Value> = doc
                .blocks
                .iter()
                .map(|b| {
                    serde_json::json!({
                        "index": b.index,
                        "span": [b.span.0, b.span.1],
                        "role": b.role,
                        "has_q": b.q.is_some(),
                        "mean_key_deviation": b.mean_key_deviation(),
                    })
                })
                .collect();
            let summary = serde_json::json!({
                "doc_id": doc.doc_id,
                "tokens": doc.token_ids.len(),
                "layers": doc.num_layers(),
                "generation": doc.generation,
                "blocks": blocks,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
