use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semrec_core::config::PipelineConfig;
use semrec_core::pipeline::{self, Workspace};
use semrec_core::Error;

#[derive(Parser)]
#[command(name = "semrec", version, about = "Semantic-ID generative recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding all artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// K-core filter a supplied interaction log and check its features.
    Prepare(Common),
    /// Generate the planted synthetic corpus and features.
    Synth(Common),
    /// Train the quantizer and write raw semantic IDs.
    TrainTokenizer(Common),
    /// Resolve SID collisions.
    Dedup(Common),
    /// Train the sequence-to-sequence recommender.
    TrainRecommender(Common),
    /// Score test users and export rankings.
    Evaluate(Common),
    /// Write SID diagnostics, metrics and a group chart.
    Report(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<String, Error> {
    let (common, stage): (Common, &str) = match &cmd {
        Command::Prepare(c) => (c.clone(), "prepare"),
        Command::Synth(c) => (c.clone(), "synth"),
        Command::TrainTokenizer(c) => (c.clone(), "train-tokenizer"),
        Command::Dedup(c) => (c.clone(), "dedup"),
        Command::TrainRecommender(c) => (c.clone(), "train-recommender"),
        Command::Evaluate(c) => (c.clone(), "evaluate"),
        Command::Report(c) => (c.clone(), "report"),
    };
    let cfg = load_config(&common)?;
    let ws = Workspace::new(&common.out_dir);
    let summary = match cmd {
        Command::Prepare(_) => {
            let m = pipeline::run_prepare(&cfg, &ws)?;
            format!("{} users, {} items, {} interactions", m.stats.users, m.stats.items, m.stats.interactions)
        }
        Command::Synth(_) => {
            let m = pipeline::run_synth(&cfg, &ws)?;
            format!("{} users, {} items, {} interactions", m.stats.users, m.stats.items, m.stats.interactions)
        }
        Command::TrainTokenizer(_) => {
            let m = pipeline::run_train_tokenizer(&cfg, &ws)?;
            format!(
                "final collision rate {:.4}, perplexity {:.2}",
                m.sids.final_collision_rate, m.sids.perplexity_geo_mean
            )
        }
        Command::Dedup(_) => {
            let m = pipeline::run_dedup(&cfg, &ws)?;
            format!("{} items moved", m.summary.moved)
        }
        Command::TrainRecommender(_) => {
            let m = pipeline::run_train_recommender(&cfg, &ws)?;
            format!("best epoch {}", m.best_epoch)
        }
        Command::Evaluate(_) => {
            let m = pipeline::run_evaluate(&cfg, &ws)?;
            serde_json::to_string(&m.model.overall).unwrap_or_default()
        }
        Command::Report(_) => {
            pipeline::run_report(&cfg, &ws)?;
            format!("wrote {}", ws.report().display())
        }
    };
    Ok(format!("{stage}: {summary}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
