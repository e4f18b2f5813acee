//! `elp`: ECG language processing pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use elp_cli::stages::StageOutcome;
use elp_cli::{Overrides, Pipeline, PipelineConfig, Task};
use elp_core::metrics::{ConfusionMatrix, EvalReport, FoldReport, FoldStatus};
use elp_neural::Head;

#[derive(Parser)]
#[command(
    name = "elp",
    version,
    about = "ECG language processing: waves as words, recordings as sentences"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML or JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for stage artifacts and the manifest.
    #[arg(long, env = "ELP_OUT", global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, global = true)]
    task: Option<Task>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, value_enum, global = true)]
    model: Option<ModelArg>,
    /// Vocabulary size (number of wave clusters).
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    /// Dataset directory (WFDB records or CSV files plus REFERENCE.csv).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cnn,
    Rnn,
    RnnAttn,
}

impl From<ModelArg> for Head {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Cnn => Head::Cnn,
            ModelArg::Rnn => Head::Rnn,
            ModelArg::RnnAttn => Head::RnnAttention,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset for the task.
    Ingest,
    /// Generate the synthetic two-class corpus.
    Synth,
    /// Detect R-peaks in every record.
    Detect,
    /// Extract canonical P/QRS/T waves and labelled examples.
    Segment,
    /// Cluster waves into a vocabulary over all examples.
    BuildVocab,
    /// Encode every example with the vocabulary.
    Tokenize,
    /// Train one classifier on all tokenized examples.
    Train,
    /// Run the cross-validated experiment and write the report.
    Evaluate,
    /// Print metrics for a confusion matrix or report given as JSON.
    Report {
        /// `{"class_names": [...], "counts": [[...]]}` or a saved report.
        input: PathBuf,
    },
    /// Render sample waves per cluster as SVG.
    Gallery {
        #[arg(long, default_value_t = 10)]
        per_cluster: usize,
    },
}

fn overrides(g: &Global) -> Overrides {
    Overrides {
        task: g.task,
        out_dir: g.out.clone(),
        seed: g.seed,
        folds: g.folds,
        head: g.model.map(Head::from),
        k: g.k,
        embed_dim: g.embed_dim,
        max_len: g.max_len,
        data_dir: g.data_dir.clone(),
    }
}

fn announce(o: &StageOutcome) {
    let state = if o.reused { "up to date" } else { "done" };
    println!("{} {state}: {}", o.stage, o.artifact.display());
}

fn report(input: &PathBuf) -> Result<EvalReport> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    if let Ok(r) = EvalReport::from_json(&text) {
        return Ok(r);
    }
    let m: ConfusionMatrix = serde_json::from_str(&text)
        .with_context(|| format!("{} is neither a report nor a confusion matrix", input.display()))?;
    let m = ConfusionMatrix::from_counts(m.class_names, m.counts)?;
    let fold = FoldReport {
        fold: 0,
        status: FoldStatus::Ok,
        n_train: 0,
        n_test: m.total() as usize,
        confusion: Some(m.clone()),
    };
    Ok(EvalReport::assemble("report", "-", m.class_names, vec![fold])?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Report { input } = &cli.command {
        let r = report(input)?;
        print!("{}", r.render_table());
        return Ok(if r.partial {
            ExitCode::from(2)
        } else {
            ExitCode::SUCCESS
        });
    }
    let cfg = PipelineConfig::load(cli.global.config.as_deref(), &overrides(&cli.global))?;
    let pipeline = Pipeline::new(cfg);
    let outcome = match cli.command {
        Command::Ingest => pipeline.ingest()?,
        Command::Synth => pipeline.synth()?,
        Command::Detect => pipeline.detect()?,
        Command::Segment => pipeline.segment()?,
        Command::BuildVocab => pipeline.build_vocab()?,
        Command::Tokenize => pipeline.tokenize()?,
        Command::Train => pipeline.train()?,
        Command::Gallery { per_cluster } => pipeline.gallery(per_cluster)?,
        Command::Evaluate => {
            let (o, r) = pipeline.evaluate()?;
            announce(&o);
            print!("{}", r.render_table());
            if r.partial {
                eprintln!("error: at least one fold failed");
                return Ok(ExitCode::from(2));
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Report { .. } => bail!("handled above"),
    };
    announce(&outcome);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
