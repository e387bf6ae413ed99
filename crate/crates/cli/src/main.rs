use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndftm::corpus::InputFormat;
use ndftm::evaluation::Metric;
use ndftm::Error;

mod commands;
mod config;
mod truth;

use config::RunConfig;

/// Neural dynamic focused topic model.
#[derive(Parser, Debug)]
#[command(name = "ndftm", version, about, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; artifacts go to `<out>/<run-id>/`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a split corpus bundle from time-stamped records.
    Ingest(IngestArgs),
    /// Assign a new train/validation/test split to a corpus bundle.
    Split(SplitArgs),
    /// Fit a model and write checkpoints and the metrics log.
    Train(TrainArgs),
    /// Compute evaluation metrics of a trained run.
    Eval(EvalArgs),
    /// Score and forecast slices past the end of the training prefix.
    Predict(PredictArgs),
    /// Entropy and activity diagnostics, optionally against ground truth.
    Diagnose(DiagnoseArgs),
    /// Sample a synthetic corpus and its ground-truth latents.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Records: `timestamp<TAB>text` or `{"t": .., "tokens": [..]}` per line.
    records: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    slice_width: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    origin: Option<i64>,
    /// Comma-separated slice boundaries; overrides the width.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    boundaries: Option<Vec<i64>>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    max_doc_fraction: Option<f64>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[command(flatten)]
    split: FractionArgs,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormatArg {
    Tsv,
    Jsonl,
    Auto,
}

impl From<FormatArg> for InputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => InputFormat::Tsv,
            FormatArg::Jsonl => InputFormat::Jsonl,
            FormatArg::Auto => InputFormat::Auto,
        }
    }
}

#[derive(Args, Debug)]
struct FractionArgs {
    /// Train, validation and test shares, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    fractions: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    split: FractionArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Number of topics.
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    /// Identity prior transitions.
    #[arg(long)]
    linear_transition: bool,
    /// Keep every topic active in every document.
    #[arg(long)]
    coupled: bool,
    #[arg(long)]
    bidirectional_encoder: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Hard masks in the forward pass with relaxed gradients.
    #[arg(long)]
    straight_through: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Directory of a training run.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Checkpoint name: `best`, `last` or `epoch-NNNN`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Posterior draws or particles.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    from: CheckpointArgs,
    /// Comma-separated subset of ppl_dc, p_nll, tc, td, entropy, activity, top_words.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<Metric>>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    from: CheckpointArgs,
    /// Slices between the end of the observed prefix and the target slice.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    from: CheckpointArgs,
    /// Ground-truth file written by `synth`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[allow(non_snake_case)]
struct SynthArgs {
    /// Number of topics.
    #[arg(long = "K")]
    K: Option<usize>,
    /// Vocabulary size.
    #[arg(long = "V")]
    V: Option<usize>,
    /// Number of time slices.
    #[arg(long = "T")]
    T: Option<usize>,
    /// Documents per slice.
    #[arg(long)]
    docs: Option<usize>,
    /// Tokens per document.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    /// Spread of the topic activity biases.
    #[arg(long, allow_hyphen_values = true)]
    skew: Option<f64>,
    #[arg(long)]
    sharpness: Option<f64>,
    #[arg(long)]
    coupled: bool,
    #[arg(long)]
    linear_transition: bool,
    #[command(flatten)]
    split: FractionArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Input(_) | Error::Io { .. } | Error::Format { .. } => 2,
        Error::Divergence(_) => 3,
        Error::Compatibility(_)
        | Error::UnknownParameter(_)
        | Error::DuplicateParameter(_)
        | Error::Shape { .. }
        | Error::NonScalarOutput(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .parse_default_env()
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> ndftm::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
    if g.run_id.is_some() {
        cfg.output.run_id = g.run_id.clone();
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.threads.is_some() {
        cfg.threads = g.threads;
    }
    cfg.resolve_seed();
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        ndftm::evaluation::set_threads(n);
    }

    match cli.command {
        Command::Ingest(a) => {
            let i = &mut cfg.input;
            set(&mut i.records, a.records.map(Some));
            set(&mut i.format, a.format.map(Into::into));
            set(&mut i.stopwords, a.stopwords.map(Some));
            let n = &mut cfg.ingest;
            set(&mut n.slice_width, a.slice_width);
            set(&mut n.origin, a.origin.map(Some));
            set(&mut n.boundaries, a.boundaries.map(Some));
            set(&mut n.min_count, a.min_count);
            set(&mut n.max_doc_fraction, a.max_doc_fraction);
            apply_fractions(&mut cfg, a.split)?;
            commands::ingest(cfg)
        }
        Command::Split(a) => {
            set(&mut cfg.input.corpus, a.corpus.map(Some));
            apply_fractions(&mut cfg, a.split)?;
            commands::split(cfg)
        }
        Command::Train(a) => {
            set(&mut cfg.input.corpus, a.corpus.map(Some));
            apply_model(&mut cfg, a.model);
            let t = &mut cfg.train;
            set(&mut t.epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.learning_rate, a.learning_rate);
            set(&mut t.checkpoint_every, a.checkpoint_every);
            t.straight_through |= a.straight_through;
            commands::train(cfg)
        }
        Command::Eval(a) => {
            apply_checkpoint(&mut cfg, a.from);
            set(&mut cfg.eval.metrics, a.metrics);
            set(&mut cfg.eval.horizon, a.horizon);
            commands::eval(cfg)
        }
        Command::Predict(a) => {
            apply_checkpoint(&mut cfg, a.from);
            set(&mut cfg.eval.horizon, a.horizon);
            commands::predict(cfg)
        }
        Command::Diagnose(a) => {
            apply_checkpoint(&mut cfg, a.from);
            set(&mut cfg.input.truth, a.truth.map(Some));
            commands::diagnose(cfg)
        }
        Command::Synth(a) => {
            let m = &mut cfg.model;
            set(&mut m.num_topics, a.K);
            set(&mut m.vocab_size, a.V);
            set(&mut m.alpha0, a.alpha0);
            m.coupled |= a.coupled;
            m.linear_transition |= a.linear_transition;
            let s = &mut cfg.synth;
            set(&mut s.num_slices, a.T);
            set(&mut s.docs_per_slice, a.docs);
            set(&mut s.tokens_per_doc, a.tokens);
            set(&mut s.skew, a.skew);
            set(&mut s.topic_sharpness, a.sharpness);
            apply_fractions(&mut cfg, a.split)?;
            commands::synth(cfg)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_fractions(cfg: &mut RunConfig, a: FractionArgs) -> ndftm::Result<()> {
    if let Some(f) = a.fractions {
        cfg.split.fractions = f
            .try_into()
            .map_err(|_| Error::Config("--fractions takes exactly three values".into()))?;
    }
    Ok(())
}

fn apply_model(cfg: &mut RunConfig, a: ModelArgs) {
    let m = &mut cfg.model;
    set(&mut m.num_topics, a.topics);
    set(&mut m.embedding_dim, a.embedding_dim);
    set(&mut m.alpha0, a.alpha0);
    m.linear_transition |= a.linear_transition;
    m.coupled |= a.coupled;
    m.bidirectional_encoder |= a.bidirectional_encoder;
}

fn apply_checkpoint(cfg: &mut RunConfig, a: CheckpointArgs) {
    set(&mut cfg.input.corpus, a.corpus.map(Some));
    set(&mut cfg.input.run, a.run.map(Some));
    set(&mut cfg.input.checkpoint, a.checkpoint);
    set(&mut cfg.eval.samples, a.samples);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn every_error_kind_has_a_nonzero_code() {
        assert_eq!(exit_code(&Error::Config(String::new())), 1);
        assert_eq!(exit_code(&Error::Input(String::new())), 2);
        assert_eq!(exit_code(&Error::format("x", "y")), 2);
        assert_eq!(exit_code(&Error::Divergence(String::new())), 3);
        assert_eq!(exit_code(&Error::Compatibility(String::new())), 4);
    }

    #[test]
    fn metric_lists_parse() {
        let cli = Cli::try_parse_from(["ndftm", "eval", "--metrics", "tc,td", "--run", "r"]).unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.metrics.unwrap(), vec![Metric::Tc, Metric::Td]),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["ndftm", "eval", "--metrics", "bogus"]).is_err());
    }
}
