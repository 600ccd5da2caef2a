use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cast_core::config::RunConfig;
use cast_core::pipeline::Run;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cast", version, about = "Complementary-aware sequential recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Feed projected text embeddings only, without code tables.
    #[arg(long, global = true)]
    no_sem_codes: bool,
    /// Replace the alignment MLP with mean-pooled code embeddings.
    #[arg(long, global = true)]
    no_alignment: bool,
    /// Disable the transition bias and the transition loss.
    #[arg(long, global = true)]
    no_trans_guide: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-bundle synthetic corpus.
    Synth,
    /// Filter, index and split the raw interactions.
    PrepareData,
    /// Embed item text and learn the semantic codes.
    BuildCodes,
    /// Mine weighted complementary relations.
    MineRelations,
    /// Train the recommender.
    Train,
    /// Full-ranking evaluation on the validation and test splits.
    Evaluate,
    /// Compare transition scores of complementary and random pairs.
    AnalyzeTransitions,
    /// Run every stage after `synth`.
    RunAll,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve_config(common: &Common) -> cast_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.ablation.no_sem_codes |= common.no_sem_codes;
    cfg.ablation.no_alignment |= common.no_alignment;
    cfg.ablation.no_trans_guide |= common.no_trans_guide;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: &Command, cfg: &RunConfig, out: &Path) -> cast_core::Result<()> {
    let run = Run::new(cfg, out)?;
    match cmd {
        Command::Synth => run.synth().map(drop),
        Command::PrepareData => run.prepare_data().map(drop),
        Command::BuildCodes => run.build_codes().map(drop),
        Command::MineRelations => run.mine_relations().map(drop),
        Command::Train => run.train().map(drop),
        Command::Evaluate => run.evaluate().map(drop),
        Command::AnalyzeTransitions => run.analyze_transitions().map(drop),
        Command::RunAll => run.run_all().map(drop),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration:\n{e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, &cfg, &cli.common.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
