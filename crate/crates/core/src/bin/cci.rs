use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cci::cs_dataset::DatasetParams;
use cci::imagination::ElementMode;
use cci::metrics::{self, Metric};
use cci::multiwriter::{SimilarityTarget, UpdateGranularity};
use cci::pipeline::{
    self, EvalCorpus, EvalRequest, PipelineConfig, PipelineError, RunOptions, RunOutcome, RunProviders, ScorerKind, Stage,
};

#[derive(Parser)]
#[command(name = "cci", version, about = "Persona-driven long story generation")]
struct Cli {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the offline mock providers.
    #[arg(long, global = true)]
    mock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Imagine elements, plan, and draft a story.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Continue an existing run instead of starting a new one.
        #[arg(long, value_name = "RUN_ID")]
        resume: Option<String>,
    },
    /// Like generate, with the three story elements taken from your own images.
    Interactive {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        character_image: PathBuf,
        #[arg(long)]
        background_image: PathBuf,
        #[arg(long)]
        mainplot_image: PathBuf,
    },
    /// Build the continuation-score dataset from a directory of stories.
    Csdata {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "csdata")]
        out: PathBuf,
        #[arg(long)]
        target_words: Option<usize>,
        #[arg(long)]
        negatives_per_golden: Option<usize>,
        #[arg(long)]
        hard_fraction: Option<f64>,
    },
    /// Compute diversity and relevance metrics over a corpus directory.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Metrics to compute; repeat or comma-separate.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MetricArg::Ws, MetricArg::Ss])]
        metric: Vec<MetricArg>,
        /// N-gram orders for ws, e.g. `2,3`.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        ws_ngrams: Vec<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write a one-row CSV for this corpus.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Row label in the CSV; defaults to the corpus directory name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Continue a stopped or failed run.
    Resume {
        run_id: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, hide = true, value_enum)]
        stop_after: Option<StageArg>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Directory that holds run folders.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_enum)]
    element_mode: Option<ElementModeArg>,
    /// Text-only element imagination.
    #[arg(long)]
    no_ig: bool,
    /// Skip persona injection.
    #[arg(long)]
    no_mw: bool,
    /// Candidates per writer.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cs_threshold: Option<f64>,
    #[arg(long)]
    repetition_threshold: Option<f64>,
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    #[arg(long)]
    scorer_url: Option<String>,
    /// Update the persona after every leaf instead of every top-level node.
    #[arg(long)]
    per_leaf_updates: bool,
    /// Compare candidates with the writer's own trait instead of the whole persona.
    #[arg(long)]
    writer_trait_similarity: bool,
    #[arg(long, hide = true, value_enum)]
    stop_after: Option<StageArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ElementModeArg {
    Ig,
    TextOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Remote,
    Baseline,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum MetricArg {
    Ws,
    Ss,
    Sim,
    Embrv,
    Llmrv,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Ws => Metric::Ws,
            MetricArg::Ss => Metric::Ss,
            MetricArg::Sim => Metric::Sim,
            MetricArg::Embrv => Metric::Embrv,
            MetricArg::Llmrv => Metric::Llmrv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Elements,
    Persona,
    Plot,
    Outline,
    Draft,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Elements => Stage::Elements,
            StageArg::Persona => Stage::Persona,
            StageArg::Plot => Stage::Plot,
            StageArg::Outline => Stage::Outline,
            StageArg::Draft => Stage::Draft,
        }
    }
}

fn base_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.mock |= cli.mock;
    Ok(c)
}

fn apply_run_args(c: &mut PipelineConfig, a: &RunArgs) {
    if let Some(o) = &a.output {
        c.output_dir = o.clone();
    }
    match a.element_mode {
        Some(ElementModeArg::Ig) => c.element_mode = ElementMode::ImageGuided,
        Some(ElementModeArg::TextOnly) => c.element_mode = ElementMode::TextOnly,
        None => {}
    }
    c.no_ig |= a.no_ig;
    c.no_mw |= a.no_mw;
    if let Some(k) = a.k {
        c.mw.k = k;
    }
    if let Some(t) = a.cs_threshold {
        c.mw.cs_threshold = t;
    }
    if let Some(t) = a.repetition_threshold {
        c.mw.repetition_threshold = t;
    }
    match a.scorer {
        Some(ScorerArg::Remote) => c.scorer.kind = ScorerKind::Remote,
        Some(ScorerArg::Baseline) => c.scorer.kind = ScorerKind::Baseline,
        None => {}
    }
    if let Some(u) = &a.scorer_url {
        c.scorer.url = u.clone();
    }
    if a.per_leaf_updates {
        c.mw.update_granularity = UpdateGranularity::Leaf;
    }
    if a.writer_trait_similarity {
        c.mw.similarity_target = SimilarityTarget::WriterTrait;
    }
}

fn report_outcome(run_dir: &Path, outcome: RunOutcome) {
    match outcome {
        RunOutcome::Completed { bundle_path, bundle } => {
            eprintln!(
                "{} paragraphs, {} persona versions",
                bundle.paragraphs.len(),
                bundle.persona_versions.len()
            );
            println!("{}", bundle_path.display());
        }
        RunOutcome::Stopped { after } => {
            eprintln!("stopped after {after}");
            println!("{}", run_dir.display());
        }
    }
}

fn opts(stop_after: Option<StageArg>) -> RunOptions {
    RunOptions { stop_after: stop_after.map(Stage::from) }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = base_config(&cli)?;
    match &cli.command {
        Command::Generate { run, resume } => {
            apply_run_args(&mut config, run);
            if let Some(id) = resume {
                let dir = config.output_dir.join(id);
                let outcome = pipeline::cmd_resume(&dir, None, opts(run.stop_after))?;
                report_outcome(&dir, outcome);
            } else {
                let (dir, outcome) = pipeline::cmd_generate(config, run.run_id.clone(), None, opts(run.stop_after))?;
                report_outcome(&dir, outcome);
            }
        }
        Command::Interactive { run, character_image, background_image, mainplot_image } => {
            apply_run_args(&mut config, run);
            let images = [character_image.clone(), background_image.clone(), mainplot_image.clone()];
            let (dir, outcome) =
                pipeline::cmd_interactive(config, images, run.run_id.clone(), None, opts(run.stop_after))?;
            report_outcome(&dir, outcome);
        }
        Command::Resume { run_id, output, stop_after } => {
            let root = output.clone().unwrap_or(config.output_dir.clone());
            let dir = root.join(run_id);
            let outcome = pipeline::cmd_resume(&dir, None, opts(*stop_after))?;
            report_outcome(&dir, outcome);
        }
        Command::Csdata { corpus, out, target_words, negatives_per_golden, hard_fraction } => {
            let mut params = DatasetParams::default();
            if let Some(t) = target_words {
                params.target_words = *t;
            }
            if let Some(n) = negatives_per_golden {
                params.negatives_per_golden = *n;
            }
            if let Some(h) = hard_fraction {
                params.hard_fraction = *h;
            }
            let o = pipeline::cmd_csdata(corpus, out, &params, config.seed)?;
            let p = &o.summary.pairs;
            eprintln!(
                "{} goldens, {} negatives, {} hard negatives; {} stories skipped",
                p.goldens,
                p.negatives,
                p.hard_negatives,
                o.summary.skipped_files.len() + o.summary.skipped_too_short.len()
            );
            println!("{}", o.dataset.display());
        }
        Command::Eval { corpus, metric, ws_ngrams, report, csv, label } => {
            let providers = RunProviders::from_config(&config)?;
            let data = EvalCorpus::load(corpus)?;
            let req = EvalRequest { metrics: metric.iter().map(|m| Metric::from(*m)).collect(), ngrams: ws_ngrams.clone() };
            let r = pipeline::evaluate(&data, &req, providers.base.embed.as_ref(), providers.chat.as_ref())?;
            let json = serde_json::to_string_pretty(&r).expect("report serializes");
            match report {
                Some(p) => std::fs::write(p, format!("{json}\n")).map_err(|e| PipelineError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?,
                None => println!("{json}"),
            }
            if let Some(p) = csv {
                let label = label.clone().unwrap_or_else(|| {
                    corpus.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
                });
                let io = |e: String| PipelineError::Io { path: p.display().to_string(), message: e };
                let f = std::fs::File::create(p).map_err(|e| io(e.to_string()))?;
                metrics::write_csv(f, &[(label, r)]).map_err(|e| io(e.to_string()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
