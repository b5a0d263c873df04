use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use floodlens::dataset::SplitMode;
use floodlens::ingest::StudyWindow;
use floodlens::synth::{self, SynthConfig};
use floodlens::textcorpus::mock::{MockPages, MockWikiServer};
use floodlens::textembed::Architecture;
use floodlens_cli::{exit_code, Overrides, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "floodlens",
    version,
    about = "Next-N-year flood prediction from disaster records and place descriptions"
)]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Geocoded disaster CSV.
    #[arg(long, global = true)]
    disasters: Option<PathBuf>,
    /// Damage-cost CSV joined by record id.
    #[arg(long, global = true)]
    damage: Option<PathBuf>,
    /// Text corpus cache shared between runs [env: FLOODLENS_CACHE_DIR].
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Pretrained encoder directory (config.json, vocab.txt, model.safetensors).
    #[arg(long, global = true)]
    encoder: Option<PathBuf>,
    /// Comma-separated horizons in years, e.g. 1,2,5.
    #[arg(long, global = true, value_delimiter = ',')]
    horizons: Option<Vec<u32>>,
    /// Comma-separated: pretrained_avg, finetuned_avg, transfer_head.
    #[arg(long, global = true, value_delimiter = ',')]
    architectures: Option<Vec<Architecture>>,
    /// Sets both the split and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Wiki API endpoint [env: FLOODLENS_WIKI_BASE].
    #[arg(long, global = true)]
    wiki_base: Option<String>,
    /// Serve page text from a local JSON file instead of the network.
    #[arg(long, global = true)]
    mock_pages: Option<PathBuf>,
    /// random, grouped_by_grid or temporal.
    #[arg(long, global = true, value_parser = parse_split)]
    split_mode: Option<SplitMode>,
    /// First year of the study window.
    #[arg(long, global = true)]
    window_start: Option<i32>,
    /// Last year of the study window.
    #[arg(long, global = true)]
    window_end: Option<i32>,
    /// Repeat for more detail.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse disaster and damage files into events and grid-year features.
    Ingest,
    /// Look up place descriptions for every grid.
    FetchText,
    /// Train the text models and embed every grid.
    Embed,
    /// Assemble labelled datasets per horizon and feature set.
    BuildDataset,
    /// Fit boosted-tree classifiers with a cross-validated search.
    Train,
    /// Score held-out examples.
    Evaluate,
    /// Write the metric table and ROC figures.
    Report,
    /// Run every stage in order.
    All,
    /// Generate a synthetic world for demos and tests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        grids: usize,
        #[arg(long, default_value_t = 1999)]
        start: i32,
        #[arg(long, default_value_t = 2018)]
        end: i32,
        #[arg(long = "world-seed", default_value_t = 7)]
        world_seed: u64,
    },
    /// Serve a pages file over the wiki API until interrupted.
    ServeMockWiki {
        #[arg(long)]
        pages: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<SplitMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split mode {s:?}; use random, grouped_by_grid or temporal"))
}

fn overrides(cli: &Cli) -> Overrides {
    Overrides {
        disasters: cli.disasters.clone(),
        damage: cli.damage.clone(),
        output: cli.output.clone(),
        cache: cli.cache_dir.clone(),
        encoder: cli.encoder.clone(),
        horizons: cli.horizons.clone(),
        architectures: cli.architectures.clone(),
        seed: cli.seed,
        wiki_base: cli.wiki_base.clone(),
        mock_pages: cli.mock_pages.clone(),
        split: cli.split_mode,
        window_start: cli.window_start,
        window_end: cli.window_end,
    }
}

fn run(cli: Cli) -> Result<()> {
    let stage = match &cli.command {
        Command::Ingest => Some(Stage::Ingest),
        Command::FetchText => Some(Stage::FetchText),
        Command::Embed => Some(Stage::Embed),
        Command::BuildDataset => Some(Stage::BuildDataset),
        Command::Train => Some(Stage::Train),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Report => Some(Stage::Report),
        Command::All => None,
        Command::Synth {
            out,
            grids,
            start,
            end,
            world_seed,
        } => {
            let cfg = SynthConfig {
                n_grids: *grids,
                window: StudyWindow::new(*start, *end)?,
                seed: *world_seed,
                ..SynthConfig::default()
            };
            let paths = synth::generate(&cfg)?.write(out)?;
            println!(
                "wrote {}, {}, {}",
                paths.disasters.display(),
                paths.damage.display(),
                paths.pages.display()
            );
            return Ok(());
        }
        Command::ServeMockWiki { pages } => {
            let server = MockWikiServer::start(MockPages::load(pages)?)?;
            println!("{}", server.base_url());
            loop {
                std::thread::park();
            }
        }
    };
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply(&overrides(&cli));
    let mut pipeline = Pipeline::open(config)?;
    match stage {
        Some(s) => pipeline.run(s)?,
        None => pipeline.run_all()?,
    }
    if matches!(cli.command, Command::All | Command::Report) {
        let table = std::fs::read_to_string(pipeline.output().join("report.txt"))
            .context("reading report")?;
        print!("{table}");
    }
    Ok(())
}

/// The error chain on one line, skipping causes a message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
