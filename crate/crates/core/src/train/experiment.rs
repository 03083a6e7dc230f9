use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use super::fit::{evaluate, fit, History};
use super::model::{build_model, Model, ModelConfig};
use super::optim::OptimConfig;
use crate::data::{
    gen_gaussian_blobs, gen_two_spirals, load_cifar_binary, load_delimited, split, CifarKind, CifarOptions,
    CifarPart, Dataset, DelimitedOptions, SplitSpec,
};
use crate::error::{Error, Result};
use crate::heads::Family;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Where an experiment's examples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Spirals {
        n_per_class: usize,
        noise: f64,
    },
    Blobs {
        classes: usize,
        n_per_class: usize,
        spread: f64,
        radius: f64,
    },
    Delimited {
        path: PathBuf,
        options: DelimitedOptions,
    },
    Cifar {
        kind: CifarKind,
        dir: PathBuf,
        /// Records kept per class in each of the train and test parts.
        per_class: Option<usize>,
        downsample: Option<usize>,
    },
}

impl DataSource {
    pub fn spirals() -> Self {
        DataSource::Spirals {
            n_per_class: 500,
            noise: 0.1,
        }
    }

    pub fn blobs() -> Self {
        DataSource::Blobs {
            classes: 4,
            n_per_class: 200,
            spread: 0.5,
            radius: 1.0,
        }
    }

    /// Short name used to pair reports in a table.
    pub fn label(&self) -> String {
        match self {
            DataSource::Spirals { .. } => "spirals".into(),
            DataSource::Blobs { .. } => "blobs".into(),
            DataSource::Delimited { path, .. } => path
                .file_stem()
                .map_or_else(|| "delimited".into(), |s| s.to_string_lossy().into_owned()),
            DataSource::Cifar { kind: CifarKind::Cifar10, .. } => "cifar10".into(),
            DataSource::Cifar { kind: CifarKind::Cifar100, .. } => "cifar100".into(),
        }
    }
}

/// Data source plus the fixed seed and split used for every run of an
/// experiment. CIFAR ships its own split and ignores `train_fraction`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub seed: u64,
    pub train_fraction: f64,
}

impl DataConfig {
    pub fn new(source: DataSource) -> Self {
        DataConfig {
            source,
            seed: 0,
            train_fraction: SplitSpec::default().train_fraction,
        }
    }

    /// Train and test sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let spec = SplitSpec {
            train_fraction: self.train_fraction,
            shuffle_seed: self.seed,
        };
        let whole = match &self.source {
            DataSource::Spirals { n_per_class, noise } => gen_two_spirals(*n_per_class, *noise, self.seed)?,
            DataSource::Blobs {
                classes,
                n_per_class,
                spread,
                radius,
            } => gen_gaussian_blobs(*classes, *n_per_class, *spread, *radius, self.seed)?,
            DataSource::Delimited { path, options } => load_delimited(path, *options)?,
            DataSource::Cifar {
                kind,
                dir,
                per_class,
                downsample,
            } => {
                let opts = CifarOptions {
                    subset_per_class: *per_class,
                    downsample_to: *downsample,
                    seed: self.seed,
                };
                let train = load_cifar_binary(dir, *kind, CifarPart::Train, opts)?;
                let test = load_cifar_binary(dir, *kind, CifarPart::Test, opts)?;
                return Ok((train, test));
            }
        };
        split(&whole, spec)
    }
}

/// Everything that determines a batch of runs. `optim.seed` is replaced
/// by each entry of `seeds`, which also seeds the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn family(&self) -> Family {
        self.model.margin.family
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("'{}' is not a usable experiment name", self.name)));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.model.validate()?;
        self.optim.validate()
    }
}

/// One completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// Test accuracy in percent.
    pub accuracy: f64,
    pub wall_time_s: f64,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub spec: ExperimentSpec,
    /// Successful runs in seed order.
    pub runs: Vec<SeedRun>,
    /// Seeds that aborted, with the reason.
    pub failed: Vec<(u64, String)>,
    pub mean: f64,
    /// Population standard deviation over `runs`.
    pub std: f64,
}

impl RunReport {
    pub fn from_runs(spec: ExperimentSpec, runs: Vec<SeedRun>, failed: Vec<(u64, String)>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&acc);
        RunReport {
            spec,
            runs,
            failed,
            mean,
            std,
        }
    }

    pub fn per_seed_accuracy(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn dataset(&self) -> String {
        self.spec.data.source.label()
    }

    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }

    /// `mean±std` to two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains and evaluates one seed on prepared data, returning the model.
pub fn run_seed(spec: &ExperimentSpec, train: &Dataset, test: &Dataset, seed: u64) -> Result<(Model, SeedRun)> {
    let start = Instant::now();
    let mut model = build_model(&spec.model, train.dim(), train.class_count(), seed)?;
    let opt = OptimConfig {
        seed,
        ..spec.optim.clone()
    };
    let history = fit(&mut model, train, &opt)?;
    let accuracy = 100.0 * evaluate(&model, test)?;
    let run = SeedRun {
        seed,
        accuracy,
        wall_time_s: start.elapsed().as_secs_f64(),
        history,
    };
    Ok((model, run))
}

/// Runs every seed (in parallel) and summarises them. Failing seeds are
/// listed in the report rather than failing the whole experiment; data
/// and configuration errors still fail fast.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    let (train, test) = spec.data.load()?;
    if train.class_count() != test.class_count() || train.dim() != test.dim() {
        return Err(Error::Shape("train and test sets disagree on shape".into()));
    }
    let outcomes: Vec<(u64, Result<SeedRun>)> = spec
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(spec, &train, &test, seed).map(|(_, run)| run)))
        .collect();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(run) => runs.push(run),
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    Ok(RunReport::from_runs(spec.clone(), runs, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::MarginConfig;

    fn spec(family: Family, seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            name: "t".into(),
            model: ModelConfig::new(MarginConfig::new(family))
                .with_encoder(&[8])
                .with_feature_dim(3),
            optim: OptimConfig {
                epochs: 3,
                batch_size: 32,
                ..OptimConfig::new(0.05)
            },
            data: DataConfig::new(DataSource::Blobs {
                classes: 3,
                n_per_class: 20,
                spread: 0.2,
                radius: 1.0,
            }),
            seeds,
        }
    }

    #[test]
    fn mean_and_population_std() {
        let (m, s) = mean_std(&[80.0, 82.0, 81.0, 79.0, 83.0]);
        assert!((m - 81.0).abs() < 1e-12);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[42.0]), (42.0, 0.0));
    }

    #[test]
    fn single_seed_has_zero_std() {
        let r = run_experiment(&spec(Family::ArcFace, vec![9])).unwrap();
        assert_eq!(r.runs.len(), 1);
        assert_eq!(r.std, 0.0);
        assert_eq!(r.mean, r.runs[0].accuracy);
    }

    #[test]
    fn report_echoes_config_and_recomputes() {
        let s = spec(Family::CosFace, vec![3, 1, 2]);
        let r = run_experiment(&s).unwrap();
        assert_eq!(r.spec, s);
        assert_eq!(r.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 1, 2]);
        let (m, sd) = mean_std(&r.per_seed_accuracy());
        assert!((m - r.mean).abs() <= 1e-12 && (sd - r.std).abs() <= 1e-12);
    }

    #[test]
    fn parallel_runs_are_deterministic() {
        let s = spec(Family::BroadFace, vec![1, 2, 3, 4]);
        let a = run_experiment(&s).unwrap();
        let b = run_experiment(&s).unwrap();
        let key = |r: &RunReport| {
            r.runs
                .iter()
                .map(|x| (x.accuracy.to_bits(), x.history.losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn failing_seed_is_marked_not_fatal() {
        let mut s = spec(Family::Cce, vec![1, 2]);
        s.model = s.model.with_projection(false);
        s.optim.lr = 1e9;
        s.optim.epochs = 30;
        let r = run_experiment(&s).unwrap();
        assert!(!r.is_complete());
        assert_eq!(r.failed.len() + r.runs.len(), 2);
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(run_experiment(&spec(Family::Cce, vec![])).is_err());
        assert!(run_experiment(&spec(Family::Cce, vec![1, 1])).is_err());
        let mut s = spec(Family::Cce, vec![1]);
        s.name = "../x".into();
        assert!(run_experiment(&s).is_err());
    }
}
