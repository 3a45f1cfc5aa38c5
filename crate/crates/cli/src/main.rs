use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alc_core::datamodel::{load_examples, load_records, save_examples, save_records, CodeVocabulary, LabeledExample};
use alc_core::eval::{repeated_benchmark, BenchmarkConfig};
use alc_core::linkage::{classifiable_newborns, link_accuracy, match_newborns, DEFAULT_MAX_PER_MOTHER};
use alc_core::net::{init_params, Dims};
use alc_core::noise::{estimate_corruption_matrix, CorruptionMatrix};
use alc_core::pipeline::{format_table, metric_svgs, read_raw_csv, run_pipeline, summarize_raw, write_benchmark, RunConfig, CONFIG_VERSION};
use alc_core::synth::{build_datasets, generate_cohort, Datasets, GroundTruth, SynthConfig};
use alc_core::train::{train, Method, TrainConfig};
use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alc", version, about = "Preterm-birth prediction with noisy linked labels")]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of mothers, newborns and ground-truth links.
    Synth(SynthArgs),
    /// Link newborns to mothers and assemble the clean, noisy and overlap sets.
    Link(LinkArgs),
    /// Estimate the corruption matrix from the overlap set.
    EstimateC(EstimateArgs),
    /// Train one model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Run the repeated-split benchmark over prepared datasets.
    Benchmark(BenchmarkArgs),
    /// Run every stage from a seed to report files.
    Pipeline(PipelineArgs),
    /// Summarize a per-repeat raw CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with cohort settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_mothers: Option<usize>,
    #[arg(long)]
    preterm_prevalence: Option<f64>,
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mothers: PathBuf,
    #[arg(long)]
    newborns: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Ground-truth file; when given, link accuracy is reported.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_PER_MOTHER)]
    max_per_mother: usize,
    #[arg(long, default_value_t = 24.0)]
    max_l1_hours: f64,
    #[arg(long, default_value_t = 90)]
    prediction_period_days: i64,
    #[arg(long, default_value_t = 2)]
    min_visits: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Overlap set: examples carrying both labels.
    #[arg(long)]
    d_prime: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    d_star: PathBuf,
    #[arg(long)]
    d_tilde: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Corruption matrix CSV; required by the corrected methods.
    #[arg(long)]
    c_matrix: Option<PathBuf>,
    /// JSON file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// JSON file with benchmark settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the mean ROC/PR curve SVGs.
    #[arg(long)]
    no_curves: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_mothers: Option<usize>,
    /// Use the configured noise model as is.
    #[arg(long)]
    no_calibrate: bool,
}

#[derive(Args)]
struct ReportArgs {
    raw: PathBuf,
    /// Directory for per-metric SVGs; defaults to the raw file's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        alc_core::Error::Config {
            field: "config",
            reason: format!("{}: {e}", path.display()),
        }
        .into()
    })
}

fn out_dir(path: &Path) -> Result<&Path> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_mothers {
        cfg.n_mothers = n;
    }
    if let Some(p) = a.preterm_prevalence {
        cfg.preterm_prevalence = p;
    }
    cfg.validate()?;
    let dir = out_dir(&a.out)?;
    let cohort = generate_cohort(&cfg)?;
    save_records(&cohort.mothers, &cohort.vocab, dir.join("mothers.jsonl"))?;
    save_records(&cohort.newborns, &cohort.vocab, dir.join("newborns.jsonl"))?;
    cohort.truth.save(dir.join("truth.tsv"))?;
    cohort.vocab.save(dir.join("vocab.txt"))?;
    let s = cohort.summary();
    println!(
        "mothers {} (preterm {}, full-term {}), newborns {}, true links {}",
        s.mothers,
        s.preterm_mothers,
        s.mothers - s.preterm_mothers,
        s.newborns,
        s.linked_newborns
    );
    Ok(())
}

fn cmd_link(a: LinkArgs) -> Result<()> {
    if a.max_l1_hours.is_nan() || a.max_l1_hours < 0.0 {
        return Err(alc_core::Error::Config {
            field: "max_l1_hours",
            reason: "must be non-negative".into(),
        }
        .into());
    }
    let vocab = CodeVocabulary::load(&a.vocab)?;
    let mothers = load_records(&a.mothers, &vocab)?;
    let newborns = load_records(&a.newborns, &vocab)?;
    let eligible = classifiable_newborns(&newborns, &vocab)?;
    let max_l1 = (a.max_l1_hours * 60.0).round() as i64;
    let links = match_newborns(&mothers, &eligible, a.max_per_mother, max_l1);
    let dir = out_dir(&a.out)?;
    links.save(dir.join("links.tsv"))?;
    let cfg = SynthConfig {
        prediction_period_days: a.prediction_period_days,
        min_visits: a.min_visits,
        ..SynthConfig::default()
    };
    let d = build_datasets(&mothers, &newborns, &links, &vocab, &cfg)?;
    save_examples(&d.d_star, &vocab, dir.join("d_star.jsonl"))?;
    save_examples(&d.d_tilde, &vocab, dir.join("d_tilde.jsonl"))?;
    save_examples(&d.d_prime, &vocab, dir.join("d_prime.jsonl"))?;
    println!(
        "links {}, clean {}, noisy {}, overlap {}",
        links.len(),
        d.d_star.len(),
        d.d_tilde.len(),
        d.d_prime.len()
    );
    if let Some(t) = &a.truth {
        let acc = link_accuracy(&links, &newborns, &vocab, &GroundTruth::load(t)?)?;
        println!(
            "pair accuracy {:.4}, label accuracy {:.4} over {} mothers",
            acc.pair_accuracy, acc.label_accuracy, acc.n_mothers
        );
    }
    Ok(())
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let vocab = CodeVocabulary::load(&a.vocab)?;
    let d_prime = load_examples(&a.d_prime, &vocab)?;
    let c = estimate_corruption_matrix(&d_prime)?;
    let dir = out_dir(&a.out)?;
    c.save(dir.join("c_hat.csv"))?;
    print!("{}", c.to_csv());
    Ok(())
}

fn load_data(a: &DataArgs) -> Result<(CodeVocabulary, Vec<LabeledExample>, Vec<LabeledExample>)> {
    let vocab = CodeVocabulary::load(&a.vocab)?;
    let d_star = load_examples(&a.d_star, &vocab)?;
    let d_tilde = load_examples(&a.d_tilde, &vocab)?;
    Ok((vocab, d_star, d_tilde))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(n) = a.epochs {
        cfg.n_epochs = n;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let c = a.c_matrix.as_ref().map(CorruptionMatrix::load).transpose()?;
    let (vocab, d_star, d_tilde) = load_data(&a.data)?;
    let params = init_params(Dims::new(vocab.size(), cfg.d_emb, cfg.d_hidden)?, cfg.seed);
    let outcome = train(params, &d_star, &d_tilde, c.as_ref(), &cfg)?;
    let dir = out_dir(&a.out)?;
    outcome.params.save(dir.join("model.ckpt"))?;
    write(dir.join("train_log.csv"), &outcome.log_csv())?;
    if let Some(last) = outcome.log.last() {
        println!("{} epochs, final mean loss {:.6}", outcome.log.len(), last.mean_loss);
    }
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(m) = a.methods {
        cfg.methods = m;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(n) = a.epochs {
        cfg.train.n_epochs = n;
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    cfg.validate()?;
    let (vocab, d_star, d_tilde) = load_data(&a.data)?;
    let d_prime = d_star.iter().filter(|e| e.is_overlap()).cloned().collect();
    let datasets = Datasets {
        d_star,
        d_tilde,
        d_prime,
    };
    let bench = repeated_benchmark(&datasets, vocab.size(), &cfg)?;
    let dir = out_dir(&a.out)?;
    write_benchmark(&bench, dir, !a.no_curves)?;
    print!("{}", format_table(&bench.report.rows));
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    if let Some(m) = a.methods {
        cfg.benchmark.methods = m;
    }
    if let Some(r) = a.repeats {
        cfg.benchmark.repeats = r;
    }
    if let Some(n) = a.epochs {
        cfg.benchmark.train.n_epochs = n;
    }
    if let Some(n) = a.n_mothers {
        cfg.synth.n_mothers = n;
    }
    if a.no_calibrate {
        cfg.calibrate_target = None;
    }
    cfg.validate()?;
    let outcome = run_pipeline(&cfg, out_dir(&a.out)?)?;
    print!("{}", outcome.summary_text());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let raw = read_raw_csv(&a.raw)?;
    let rows = summarize_raw(&raw);
    let repeats = raw.iter().map(|r| r.repeat).max().map_or(0, |m| m + 1);
    println!("{repeats} repeats");
    print!("{}", format_table(&rows));
    let dir = match a.out {
        Some(d) => d,
        None => a.raw.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dir = out_dir(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })?;
    for (stem, svg) in metric_svgs(&rows) {
        write(dir.join(format!("{stem}.svg")), &svg)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(alc_core::Error::Config {
                field: "threads",
                reason: "must be at least 1".into(),
            }
            .into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Link(a) => cmd_link(a),
        Command::EstimateC(a) => cmd_estimate(a),
        Command::Train(a) => cmd_train(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let long_version = format!(
        "{} (config schema {CONFIG_VERSION}; build: {}, {})",
        env!("CARGO_PKG_VERSION"),
        if alc_core::par::is_parallel() { "parallel" } else { "sequential" },
        if cfg!(debug_assertions) { "debug" } else { "release" },
    );
    let matches = Cli::command().long_version(long_version.clone()).version(long_version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<alc_core::Error>().is_some_and(alc_core::Error::is_usage);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
