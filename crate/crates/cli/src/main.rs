use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Multimodal emotion recognition with low/high-pass Fourier graph operators.
#[derive(Parser, Debug)]
#[command(name = "spectral-erc", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Run-configuration flags shared by the model commands. Flags override the
/// values from `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct RunFlags {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record the run as deterministic (training is always single-threaded).
    #[arg(long)]
    pub deterministic: bool,
    /// Ablations to apply; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', value_parser = ["se", "cl", "fgn", "high"])]
    pub ablate: Vec<String>,
    /// Modalities fed to the classifier.
    #[arg(long, value_parser = ["t", "a", "v", "ta", "tv", "va", "tav"])]
    pub modalities: Option<String>,
    #[arg(long, value_parser = ["circulant", "free"])]
    pub mode: Option<String>,
    /// Number of Fourier layers per band.
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// JSON generator settings; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus and write a checkpoint plus a JSON-lines log.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Log path; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the dense spatial product against the frequency path.
    Bench {
        /// Node counts, comma-separated.
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096, 8192, 16384])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter eigenvalues and per-band spectrum magnitudes of one conversation.
    Spectrum {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Use trained parameters instead of a fresh initialization.
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        /// Conversation id or position in the corpus.
        #[arg(long, default_value = "0")]
        conversation: String,
        /// CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for adjacency and filter matrices as CSV.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Count trainable parameters for a configuration.
    ParamsCount {
        /// Corpus providing feature sizes, speakers and classes; the default
        /// synthetic shape is used otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Train at several depths and report node-embedding similarity.
    Probe {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8])]
        depths: Vec<usize>,
        /// CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Synth { spec, seed, out } => commands::synth(spec.as_deref(), seed, &out),
        Command::Train { corpus, run, out, log } => commands::train(&corpus, &run, &out, log.as_deref()),
        Command::Eval {
            corpus,
            checkpoint,
            split,
            out,
        } => commands::eval(&corpus, &checkpoint, &split, out.as_deref()),
        Command::Bench {
            sizes,
            d,
            repeats,
            seed,
            out,
        } => commands::bench(&sizes, d, repeats, seed, out.as_deref()),
        Command::Spectrum {
            corpus,
            run,
            checkpoint,
            conversation,
            out,
            dump_dir,
        } => commands::spectrum(
            &corpus,
            &run,
            checkpoint.as_deref(),
            &conversation,
            out.as_deref(),
            dump_dir.as_deref(),
        ),
        Command::ParamsCount { corpus, run } => commands::params_count(corpus.as_deref(), &run),
        Command::Probe {
            corpus,
            run,
            depths,
            out,
        } => commands::probe(&corpus, &run, &depths, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
