//! `gadt3` command-line driver.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gadt3::eval::{evaluate, export_embeddings, homophily_report, ScoringMode};
use gadt3::experiments::{
    model_gradient_suite, run_homophily_sweep, run_homophily_sweep_with, run_margin_experiment, HomophilySweep,
    MarginExperiment, PairSpec,
};
use gadt3::gnn::{AggregationMode, Domain};
use gadt3::graphstore::{compute_stats, generate_synthetic, load_graph, save_graph, SyntheticSpec, LABELS_FILE};
use gadt3::pipeline::{adapt_target, load_checkpoint, save_checkpoint, train_source, Checkpoint, RunConfig};
use gadt3::{Error, Result};
use serde::Serialize;

use config::{exit_code, CliConfig};

#[derive(Debug, Parser)]
#[command(name = "gadt3", version, about = "Cross-domain graph anomaly detection with test-time training")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled graph directory.
    Gen(GenArgs),
    /// Train on a labeled source graph.
    Train(TrainArgs),
    /// Fit the target encoder to an unlabeled target graph.
    Adapt(AdaptArgs),
    /// Score a labeled graph and report AUROC/AUPRC.
    Eval(EvalArgs),
    /// Margin monotonicity experiment on synthetic pairs.
    ExpMargin(ExpMarginArgs),
    /// AUROC under decreasing target homophily.
    ExpHomophily(ExpHomophilyArgs),
    /// Finite-difference check of the full model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    /// Anomaly rate.
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    /// Fraction of same-label edges.
    #[arg(long, default_value_t = 0.9)]
    homophily: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 10.0)]
    mean_degree: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Source graph directory (overrides `source_graph`).
    #[arg(long, value_name = "DIR")]
    graph: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Target graph directory (overrides `target_graph`).
    #[arg(long, value_name = "DIR")]
    target: Option<PathBuf>,
    #[arg(long)]
    ttt_max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Track margin and metrics per epoch from the target's labels; they are
    /// never used for adaptation.
    #[arg(long)]
    eval_labels: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Affinity,
    Predictor,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AggregationArg {
    Nsaw,
    Plain,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Labeled graph directory (defaults to `target_graph`).
    #[arg(long, value_name = "DIR")]
    graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Encoder to use; defaults to target when the checkpoint has one.
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    /// Refuse checkpoints trained with a different aggregation.
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Also write ranking.tsv.
    #[arg(long)]
    dump_ranking: bool,
    /// Also write homophily.json with per-class affinity histograms.
    #[arg(long)]
    homophily_report: bool,
    /// Also write final embeddings into <out>/embeddings.
    #[arg(long)]
    export_embeddings: bool,
}

#[derive(Debug, Args)]
struct ExpMarginArgs {
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Test-time learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    homophily: f64,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    #[arg(long, default_value_t = 30)]
    steps: usize,
}

#[derive(Debug, Args)]
struct ExpHomophilyArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.7, 0.5, 0.3, 0.1])]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    /// Trained source checkpoint; without it each seed trains on a fresh
    /// synthetic source graph.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Labeled target graph to rewire (with --checkpoint).
    #[arg(long, value_name = "DIR")]
    target: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    points: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Config file, then global flag overrides.
struct Context {
    file: CliConfig,
    file_loaded: bool,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => CliConfig::load(path)?,
            None => CliConfig::default(),
        };
        Ok(Context {
            out: cli.out.clone().or_else(|| file.output_dir.clone()),
            seed: cli.seed,
            file_loaded: cli.config.is_some(),
            file,
        })
    }

    fn run_config(&self) -> RunConfig {
        let mut run = self.file.run.clone();
        if let Some(seed) = self.seed {
            run.seed = seed;
        }
        run
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn require_out(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| Error::Config("--out (or output_dir) is required".into()))
    }
}

fn pick_path(flag: &Option<PathBuf>, file: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_labeled(dir: &Path) -> Result<gadt3::graphstore::AttributedGraph> {
    let graph = load_graph(dir)?;
    if !graph.has_labels() {
        return Err(Error::MissingFile(dir.join(LABELS_FILE)));
    }
    Ok(graph)
}

fn cmd_gen(ctx: &Context, args: &GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(args.nodes, args.rate, args.homophily, ctx.seed.unwrap_or(0));
    spec.feature_dim = args.feature_dim;
    spec.mean_degree = args.mean_degree;
    spec.set_split_centers(1.0);
    spec.validate()?;
    let out = ctx.require_out()?;
    let graph = generate_synthetic(&spec)?;
    save_graph(&graph, &out)?;
    emit!("{}", serde_json::to_string_pretty(&compute_stats(&graph))?);
    Ok(())
}

fn cmd_train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let mut config = ctx.run_config();
    if let Some(e) = args.epochs {
        config.source_epochs = e;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    config.validate()?;
    let graph_dir = pick_path(&args.graph, &ctx.file.source_graph, "source graph (--graph or source_graph)")?;
    let out = ctx.out_dir();
    let graph = load_labeled(&graph_dir)?;
    let mut rng = gadt3::rng_from_seed(config.seed);
    let (bundle, centroids, log) = train_source(&graph, &config, &mut rng)?;
    create_dir(&out)?;
    save_checkpoint(
        &Checkpoint {
            config,
            bundle,
            centroids: Some(centroids),
        },
        out.join("source.ckpt"),
    )?;
    write_json(&out.join("train_log.json"), &log)?;
    log::info!(
        "trained {} epochs, final source auroc {:.4}",
        log.epochs.len(),
        log.final_auroc().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_adapt(ctx: &Context, args: &AdaptArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    // without a config file the training run's settings carry over
    let mut config = if ctx.file_loaded {
        ctx.run_config()
    } else {
        let mut c = checkpoint.config.clone();
        if let Some(seed) = ctx.seed {
            c.seed = seed;
        }
        c
    };
    if let Some(e) = args.ttt_max_epochs {
        config.ttt_max_epochs = e;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    config.validate()?;
    let centroids = checkpoint.require_centroids()?;
    let target_dir = pick_path(&args.target, &ctx.file.target_graph, "target graph (--target or target_graph)")?;
    let out = ctx.out_dir();
    let graph = if args.eval_labels {
        load_labeled(&target_dir)?
    } else {
        load_graph(&target_dir)?
    };
    let labels = if args.eval_labels {
        graph.labels().map(<[u8]>::to_vec)
    } else {
        None
    };
    let mut rng = gadt3::rng_from_seed(config.seed);
    let (bundle, trace) = adapt_target(
        &checkpoint.bundle,
        centroids,
        &graph.without_labels(),
        &config,
        &mut rng,
        labels.as_deref(),
    )?;
    create_dir(&out)?;
    save_checkpoint(
        &Checkpoint {
            config,
            bundle,
            centroids: checkpoint.centroids.clone(),
        },
        out.join("adapted.ckpt"),
    )?;
    write_json(&out.join("trace.json"), &trace)?;
    log::info!(
        "adapted {} epochs, chosen epoch {} ({:?})",
        trace.epochs.len(),
        trace.chosen_epoch,
        trace.stop_reason
    );
    Ok(())
}

fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    if let Some(a) = args.aggregation {
        checkpoint.ensure_mode(match a {
            AggregationArg::Nsaw => AggregationMode::Nsaw,
            AggregationArg::Plain => AggregationMode::Plain,
        })?;
    }
    let mode = match args.mode {
        Some(ModeArg::Affinity) => ScoringMode::Affinity,
        Some(ModeArg::Predictor) => ScoringMode::Predictor,
        None => checkpoint.config.scoring_mode,
    };
    let domain = match args.domain {
        Some(DomainArg::Source) => Domain::Source,
        Some(DomainArg::Target) => Domain::Target,
        None if checkpoint.bundle.target_encoder.is_some() => Domain::Target,
        None => Domain::Source,
    };
    let graph_dir = pick_path(&args.graph, &ctx.file.target_graph, "graph (--graph or target_graph)")?;
    let out = ctx.out_dir();
    let graph = load_graph(&graph_dir)?;
    let (metrics, ranking) = evaluate(&checkpoint.bundle, &graph, domain, mode)?;
    let report = if args.homophily_report {
        Some(homophily_report(&checkpoint.bundle, &graph, domain)?)
    } else {
        None
    };
    create_dir(&out)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    if args.dump_ranking {
        write_file(&out.join("ranking.tsv"), ranking.to_tsv().as_bytes())?;
    }
    if let Some(report) = report {
        write_json(&out.join("homophily.json"), &report)?;
    }
    if args.export_embeddings {
        export_embeddings(&checkpoint.bundle, &graph, domain, out.join("embeddings"))?;
    }
    emit!(
        "{} auroc {:.6} auprc {:.6}",
        mode.as_str(),
        metrics.auroc,
        metrics.auprc
    );
    Ok(())
}

fn cmd_exp_margin(ctx: &Context, args: &ExpMarginArgs) -> Result<()> {
    let base = ctx.run_config();
    base.validate()?;
    let exp = MarginExperiment {
        seeds: args.seeds,
        base_seed: base.seed,
        pair: PairSpec {
            nodes: args.nodes,
            anomaly_rate: args.rate,
            source_homophily: args.homophily,
            target_homophily: args.homophily,
            ..PairSpec::default()
        },
        lr: args.lr,
        steps: args.steps,
    };
    exp.pair.validate()?;
    if exp.seeds == 0 || exp.steps == 0 {
        return Err(Error::Config("--seeds and --steps must be at least 1".into()));
    }
    let out = ctx.out_dir();
    let report = run_margin_experiment(&exp, &base)?;
    create_dir(&out)?;
    write_json(&out.join("margin_report.json"), &report)?;
    emit!(
        "median fraction increasing {:.4} over {} seeds",
        report.median_fraction_increasing, args.seeds
    );
    if !report.claim_applicable {
        emit!("preconditions not met (homogeneous dims, small lr, init from source): no monotonicity claim");
    }
    Ok(())
}

fn cmd_exp_homophily(ctx: &Context, args: &ExpHomophilyArgs) -> Result<()> {
    let config = ctx.run_config();
    config.validate()?;
    let sweep = HomophilySweep {
        levels: args.levels.clone(),
        seeds: args.seeds,
        base_seed: config.seed,
        pair: PairSpec {
            nodes: args.nodes,
            anomaly_rate: args.rate,
            ..HomophilySweep::default().pair
        },
        ..HomophilySweep::default()
    };
    if sweep.seeds == 0 || sweep.levels.is_empty() {
        return Err(Error::Config("--seeds and --levels must be non-empty".into()));
    }
    if let Some(&bad) = sweep.levels.iter().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::Config(format!("homophily level {bad} outside [0, 1]")));
    }
    let out = ctx.out_dir();
    let table = match &args.checkpoint {
        Some(path) => {
            let target_dir = pick_path(&args.target, &ctx.file.target_graph, "target graph (--target or target_graph)")?;
            let checkpoint = load_checkpoint(path)?;
            let target = load_labeled(&target_dir)?;
            run_homophily_sweep_with(
                &checkpoint.bundle,
                checkpoint.require_centroids()?,
                &target,
                &sweep,
                &config,
            )?
        }
        None => {
            if args.target.is_some() {
                return Err(Error::Config("--target needs --checkpoint".into()));
            }
            sweep.pair.validate()?;
            run_homophily_sweep(&sweep, &config)?
        }
    };
    create_dir(&out)?;
    write_json(&out.join("homophily_table.json"), &table)?;
    for row in &table.rows {
        emit!("h={:.2} auroc {:.4} auprc {:.4}", row.homophily, row.auroc, row.auprc);
    }
    Ok(())
}

/// Returns whether every case was within tolerance.
fn cmd_gradcheck(ctx: &Context, args: &GradcheckArgs) -> Result<bool> {
    if args.points == 0 || args.tol.is_nan() || args.tol <= 0.0 {
        return Err(Error::Config("--points must be ≥ 1 and --tol > 0".into()));
    }
    let report = model_gradient_suite(ctx.seed.unwrap_or(0), args.points, args.tol)?;
    emit!("max relative error {:.3e}", report.max_rel_error);
    if let Some(worst) = report
        .cases
        .iter()
        .filter(|c| c.max_rel_error >= args.tol)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    {
        eprintln!(
            "error: gradient mismatch above {} in {} / {} (analytic {}, numeric {})",
            args.tol, worst.objective, worst.tensor, worst.analytic, worst.numeric
        );
    }
    Ok(report.passed)
}

const EXIT_NUMERICAL: u8 = 3;

fn run(cli: &Cli) -> Result<ExitCode> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a)?,
        Command::Train(a) => cmd_train(&ctx, a)?,
        Command::Adapt(a) => cmd_adapt(&ctx, a)?,
        Command::Eval(a) => cmd_eval(&ctx, a)?,
        Command::ExpMargin(a) => cmd_exp_margin(&ctx, a)?,
        Command::ExpHomophily(a) => cmd_exp_homophily(&ctx, a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(&ctx, a)? {
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .parse_default_env()
        .init();
    run(&cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(exit_code(&e))
    })
}
