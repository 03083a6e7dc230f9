use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};

use spherehead::data::{format_row, read_matrix, CifarKind, DelimitedOptions, LabelColumn};
use spherehead::heads::{Family, MarginConfig};
use spherehead::stereo::project;
use spherehead::train::{
    emit_table, load_dir, run_experiment, run_seed, DataConfig, DataSource, ExperimentSpec, ModelConfig,
    OptimConfig, Outcome, ResultsStore, RunRecord, DEFAULT_BATCH_SIZE, DEFAULT_CCE_LR, DEFAULT_EPOCHS,
    DEFAULT_FEATURE_DIM, DEFAULT_MARGIN_LR, DEFAULT_MOMENTUM, DEFAULT_RESULTS_DIR, DEFAULT_SEEDS,
};

const RESULTS_ENV: &str = "SPHEREHEAD_RESULTS";

#[derive(Debug, Parser)]
#[command(name = "spherehead", version, about = "Stereographic projection and angular-margin heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration over several seeds and store the runs.
    Train(TrainArgs),
    /// Re-train the runs of a stored experiment and report their accuracy.
    Eval(EvalArgs),
    /// Project every row of a numeric file onto the unit sphere.
    Project(ProjectArgs),
    /// Write the features a stored run feeds its head, one row per example.
    ExportEmbeddings(ExportArgs),
    /// Tabulate stored experiments with projection on against off.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct CsvArgs {
    /// Skip the first line of delimited input.
    #[arg(long)]
    header: bool,
    /// Field separator of delimited input.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// spirals, blobs, csv:<path>, cifar10:<dir> or cifar100:<dir>.
    #[arg(long)]
    dataset: String,
    /// cce, sphereface, cosface, arcface or broadface.
    #[arg(long)]
    loss: String,
    #[arg(long, value_enum, default_value = "on")]
    project: OnOff,
    /// Margin; defaults depend on the loss.
    #[arg(long)]
    m: Option<f64>,
    /// Fixed logit scale.
    #[arg(long)]
    s: Option<f64>,
    /// Scale logits by the feature norm instead of a fixed s.
    #[arg(long, conflicts_with = "s")]
    scale_by_norm: bool,
    /// BroadFace queue capacity.
    #[arg(long)]
    queue: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MOMENTUM)]
    momentum: f64,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch: usize,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Results directory; defaults to $SPHEREHEAD_RESULTS or ./results.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment name; defaults to <dataset>-<loss>-<on|off>.
    #[arg(long)]
    name: Option<String>,
    /// Hidden widths of the encoder, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [512usize, 256])]
    encoder: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    feature_dim: usize,
    /// Train without the loss-plateau early stop.
    #[arg(long)]
    no_early_stop: bool,
    /// Seed for generating, subsampling and splitting the data.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Fraction of rows used for training when the data has no fixed split.
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    /// CIFAR: records kept per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// CIFAR: mean-pool images to this side length.
    #[arg(long)]
    downsample: Option<usize>,
    /// Delimited input: label column index, or "first" / "last".
    #[arg(long, default_value = "first")]
    label_column: String,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Experiment directory inside a results store.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Experiment directory inside a results store.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Which stored seed to rebuild; the smallest by default.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Results directory; defaults to $SPHEREHEAD_RESULTS or ./results.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

fn results_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(RESULTS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RESULTS_DIR))
}

fn delimiter_byte(c: char) -> u8 {
    if !c.is_ascii() {
        usage_error(format!("delimiter '{c}' must be a single ASCII character"));
    }
    c as u8
}

fn parse_source(args: &TrainArgs) -> DataSource {
    let (kind, rest) = match args.dataset.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (args.dataset.as_str(), None),
    };
    let need_path = |what: &str| -> PathBuf {
        match rest {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => usage_error(format!("--dataset {what} needs a path, as in {what}:<path>")),
        }
    };
    if !kind.starts_with("cifar") && (args.per_class.is_some() || args.downsample.is_some()) {
        usage_error("--per-class and --downsample apply only to CIFAR data");
    }
    match kind {
        "spirals" | "blobs" if rest.is_some() => usage_error(format!("--dataset {kind} takes no path")),
        "spirals" => DataSource::spirals(),
        "blobs" => DataSource::blobs(),
        "csv" => {
            let label_column = match args.label_column.as_str() {
                "first" => LabelColumn::First,
                "last" => LabelColumn::Last,
                n => LabelColumn::Index(
                    n.parse()
                        .unwrap_or_else(|_| usage_error(format!("bad --label-column '{n}'"))),
                ),
            };
            DataSource::Delimited {
                path: need_path("csv"),
                options: DelimitedOptions {
                    delimiter: delimiter_byte(args.csv.delimiter),
                    label_column,
                    header: args.csv.header,
                },
            }
        }
        "cifar10" | "cifar100" => DataSource::Cifar {
            kind: if kind == "cifar10" {
                CifarKind::Cifar10
            } else {
                CifarKind::Cifar100
            },
            dir: need_path(kind),
            per_class: args.per_class,
            downsample: args.downsample,
        },
        other => usage_error(format!(
            "unknown dataset '{other}'; expected spirals, blobs, csv:<path>, cifar10:<dir> or cifar100:<dir>"
        )),
    }
}

fn build_spec(args: &TrainArgs) -> ExperimentSpec {
    let family: Family = args
        .loss
        .parse()
        .unwrap_or_else(|e: spherehead::Error| usage_error(e));
    if args.queue.is_some() && family != Family::BroadFace {
        usage_error(format!("--queue applies only to broadface, not {}", family.as_str()));
    }
    if let (Family::SphereFace, Some(m)) = (family, args.m) {
        if m.fract() != 0.0 || !(1.0..=4.0).contains(&m) {
            usage_error(format!("sphereface needs an integer --m in 1..=4, got {m}"));
        }
    }
    if family == Family::Cce && (args.m.is_some() || args.s.is_some() || args.scale_by_norm) {
        usage_error("cce takes no --m, --s or --scale-by-norm");
    }
    let mut margin = MarginConfig::new(family);
    if let Some(m) = args.m {
        margin = margin.with_margin(m);
    }
    if let Some(s) = args.s {
        margin = margin.with_scale(s);
    }
    if args.scale_by_norm {
        margin = margin.with_norm_scale();
    }
    if let Some(q) = args.queue {
        margin = margin.with_queue(q);
    }
    if let Err(e) = margin.validate() {
        usage_error(e);
    }
    let projection = args.project == OnOff::On;
    let source = parse_source(args);
    let name = args.name.clone().unwrap_or_else(|| {
        format!(
            "{}-{}-{}",
            source.label(),
            family.as_str(),
            if projection { "on" } else { "off" }
        )
    });
    let lr = args.lr.unwrap_or(if family == Family::Cce {
        DEFAULT_CCE_LR
    } else {
        DEFAULT_MARGIN_LR
    });
    ExperimentSpec {
        name,
        model: ModelConfig::new(margin)
            .with_encoder(&args.encoder)
            .with_feature_dim(args.feature_dim)
            .with_projection(projection),
        optim: OptimConfig {
            lr,
            momentum: args.momentum,
            batch_size: args.batch,
            epochs: args.epochs,
            seed: 0,
            early_stop: !args.no_early_stop,
        },
        data: DataConfig {
            source,
            seed: args.data_seed,
            train_fraction: args.train_fraction,
        },
        seeds: args.seeds.clone(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<bool> {
    let spec = build_spec(&args);
    let store = ResultsStore::new(results_root(args.out.clone()));
    let dir = store.experiment_dir(&spec.name);
    if dir.exists() && fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false) {
        bail!(
            "{} already holds results; choose another --name or --out",
            dir.display()
        );
    }
    let report = run_experiment(&spec)?;
    store.save(&report)?;
    let mut out = io::stdout().lock();
    for run in &report.runs {
        writeln!(
            out,
            "seed {}: accuracy {:.2}% after {} epochs ({:.1}s)",
            run.seed,
            run.accuracy,
            run.history.epochs.len(),
            run.wall_time_s
        )?;
    }
    writeln!(
        out,
        "{}: {} over {} seeds -> {}",
        spec.name,
        report.summary(),
        report.runs.len(),
        dir.display()
    )?;
    for (seed, why) in &report.failed {
        eprintln!("seed {seed} failed: {why}");
    }
    Ok(report.is_complete())
}

fn records_of(run: &Path) -> Result<Vec<RunRecord>> {
    let records = load_dir(run)?;
    if records.is_empty() {
        bail!("{} holds no run records", run.display());
    }
    Ok(records)
}

fn pick(split: Split, train: spherehead::data::Dataset, test: spherehead::data::Dataset) -> spherehead::data::Dataset {
    match split {
        Split::Train => train,
        Split::Test => test,
    }
}

fn cmd_eval(args: EvalArgs) -> Result<bool> {
    let records = records_of(&args.run)?;
    let mut out = io::stdout().lock();
    let mut ok = true;
    for rec in records {
        let (train, test) = rec.spec.data.load()?;
        let (model, run) = run_seed(&rec.spec, &train, &test, rec.seed)?;
        let ds = pick(args.split, train, test);
        let acc = 100.0 * spherehead::train::evaluate(&model, &ds)?;
        let which = if args.split == Split::Train { "train" } else { "test" };
        writeln!(out, "seed {}: {which} accuracy {:.2}%", rec.seed, acc)?;
        if let Outcome::Completed(stored) = &rec.outcome {
            if stored.accuracy.to_bits() != run.accuracy.to_bits() {
                eprintln!(
                    "seed {}: re-trained test accuracy {} differs from stored {}",
                    rec.seed, run.accuracy, stored.accuracy
                );
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn cmd_project(args: ProjectArgs) -> Result<bool> {
    let delim = delimiter_byte(args.csv.delimiter);
    let x = read_matrix(&args.input, delim, args.csv.header)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = BufWriter::new(sink);
    for i in 0..x.rows() {
        let p = project(x.row(i)).with_context(|| format!("row {}", i + 1))?;
        let cells: Vec<String> = p.coords().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(&args.csv.delimiter.to_string()))?;
    }
    w.flush()?;
    Ok(true)
}

fn cmd_export(args: ExportArgs) -> Result<bool> {
    let records = records_of(&args.run)?;
    let rec = match args.seed {
        None => &records[0],
        Some(s) => records
            .iter()
            .find(|r| r.seed == s)
            .with_context(|| format!("no record for seed {s} in {}", args.run.display()))?,
    };
    let (train, test) = rec.spec.data.load()?;
    let (model, _) = run_seed(&rec.spec, &train, &test, rec.seed)?;
    let ds = pick(args.split, train, test);
    let emb = model.embed(ds.features())?;
    let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    for i in 0..ds.len() {
        writeln!(w, "{}", format_row(ds.labels()[i], emb.row(i), ','))?;
    }
    w.flush()?;
    Ok(true)
}

fn cmd_report(args: ReportArgs) -> Result<bool> {
    let root = results_root(args.results);
    let reports = ResultsStore::new(&root).load_reports()?;
    let table = emit_table(&reports)?;
    print!("{table}");
    if let Some(p) = args.out {
        fs::write(&p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    let incomplete: Vec<&str> = reports
        .iter()
        .filter(|r| !r.is_complete())
        .map(|r| r.spec.name.as_str())
        .collect();
    if !incomplete.is_empty() {
        eprintln!("experiments with failed seeds: {}", incomplete.join(", "));
    }
    Ok(incomplete.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
