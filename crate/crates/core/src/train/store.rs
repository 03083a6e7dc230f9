use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::experiment::{DataConfig, DataSource, ExperimentSpec, RunReport, SeedRun};
use super::fit::{EpochStats, History};
use super::model::ModelConfig;
use super::optim::OptimConfig;
use crate::data::{CifarKind, DelimitedOptions, LabelColumn};
use crate::error::{Error, Result};
use crate::heads::{Family, MarginConfig};

pub const DEFAULT_RESULTS_DIR: &str = "results";
const HISTORY_MARKER: &str = "[history]";
const HISTORY_HEADER: &str = "epoch,loss,train_accuracy,max_norm_error";

/// How one seed of an experiment ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed(SeedRun),
    Failed(String),
}

/// One file of the results store: the configuration that produced a run
/// and what happened.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// Spec with `seeds` holding just this record's seed.
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub outcome: Outcome,
}

/// Directory tree `<root>/<experiment>/<seed>.txt`. Records are never
/// overwritten.
#[derive(Debug, Clone)]
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResultsStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn experiment_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes one record per seed of `report`, failing if any already
    /// exists. Returns the files written.
    pub fn save(&self, report: &RunReport) -> Result<Vec<PathBuf>> {
        let dir = self.experiment_dir(&report.spec.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records: Vec<RunRecord> = report
            .runs
            .iter()
            .map(|r| RunRecord::new(&report.spec, r.seed, Outcome::Completed(r.clone())))
            .collect();
        records.extend(
            report
                .failed
                .iter()
                .map(|(seed, why)| RunRecord::new(&report.spec, *seed, Outcome::Failed(why.clone()))),
        );
        for r in &records {
            let path = dir.join(format!("{}.txt", r.seed));
            if path.exists() {
                return Err(Error::State(format!("refusing to overwrite existing record {}", path.display())));
            }
        }
        let mut written = Vec::new();
        for r in &records {
            let path = dir.join(format!("{}.txt", r.seed));
            let mut file = fs::File::create_new(&path).map_err(|e| Error::io(&path, e))?;
            file.write_all(r.to_text().as_bytes()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Every record of one experiment, in ascending seed order.
    pub fn load_experiment(&self, name: &str) -> Result<Vec<RunRecord>> {
        load_dir(&self.experiment_dir(name))
    }

    /// One report per experiment directory, in name order.
    pub fn load_reports(&self) -> Result<Vec<RunReport>> {
        let entries = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut dirs = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if entry.path().is_dir() {
                dirs.push(entry.path());
            }
        }
        dirs.sort();
        let mut reports = Vec::new();
        for dir in dirs {
            let records = load_dir(&dir)?;
            if !records.is_empty() {
                reports.push(report_from_records(records)?);
            }
        }
        Ok(reports)
    }
}

/// Records in `dir`, ascending by seed.
pub fn load_dir(dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "txt") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            records.push(RunRecord::parse(&text, &path.display().to_string())?);
        }
    }
    records.sort_by_key(|r| r.seed);
    Ok(records)
}

/// Rebuilds a report from the records of one experiment.
pub fn report_from_records(records: Vec<RunRecord>) -> Result<RunReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::State("no records to build a report from".into()))?;
    let normalised = |s: &ExperimentSpec| ExperimentSpec {
        seeds: Vec::new(),
        optim: OptimConfig {
            seed: 0,
            ..s.optim.clone()
        },
        ..s.clone()
    };
    let reference = normalised(&first.spec);
    let mut spec = first.spec.clone();
    spec.seeds.clear();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for r in records {
        if normalised(&r.spec) != reference {
            return Err(Error::State(format!(
                "records of experiment '{}' disagree on their configuration",
                spec.name
            )));
        }
        spec.seeds.push(r.seed);
        match r.outcome {
            Outcome::Completed(run) => runs.push(run),
            Outcome::Failed(why) => failed.push((r.seed, why)),
        }
    }
    Ok(RunReport::from_runs(spec, runs, failed))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn label_column_text(c: LabelColumn) -> String {
    match c {
        LabelColumn::First => "first".into(),
        LabelColumn::Last => "last".into(),
        LabelColumn::Index(i) => i.to_string(),
    }
}

impl RunRecord {
    pub fn new(spec: &ExperimentSpec, seed: u64, outcome: Outcome) -> Self {
        let mut spec = spec.clone();
        spec.seeds = vec![seed];
        spec.optim.seed = seed;
        RunRecord {
            spec,
            seed,
            outcome,
        }
    }

    /// `key=value` lines, then the per-epoch history as CSV.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let m = &s.model.margin;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("experiment", s.name.clone());
        kv("seed", self.seed.to_string());
        kv("dataset", s.data.source.label());
        kv("family", m.family.as_str().into());
        kv("m", m.m.to_string());
        kv("s", m.s.to_string());
        kv("scale_by_norm", m.scale_by_norm.to_string());
        kv("queue", m.queue_capacity.to_string());
        kv("monotone_psi", m.use_monotone_psi.to_string());
        kv("projection", on_off(s.model.projection).into());
        kv(
            "encoder",
            s.model.encoder_layers.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("feature_dim", s.model.feature_dim.to_string());
        kv("lr", s.optim.lr.to_string());
        kv("momentum", s.optim.momentum.to_string());
        kv("batch", s.optim.batch_size.to_string());
        kv("epochs", s.optim.epochs.to_string());
        kv("early_stop", s.optim.early_stop.to_string());
        kv("data.seed", s.data.seed.to_string());
        kv("data.train_fraction", s.data.train_fraction.to_string());
        match &s.data.source {
            DataSource::Spirals { n_per_class, noise } => {
                kv("data.source", "spirals".into());
                kv("data.n_per_class", n_per_class.to_string());
                kv("data.noise", noise.to_string());
            }
            DataSource::Blobs {
                classes,
                n_per_class,
                spread,
                radius,
            } => {
                kv("data.source", "blobs".into());
                kv("data.classes", classes.to_string());
                kv("data.n_per_class", n_per_class.to_string());
                kv("data.spread", spread.to_string());
                kv("data.radius", radius.to_string());
            }
            DataSource::Delimited { path, options } => {
                kv("data.source", "csv".into());
                kv("data.path", path.display().to_string());
                kv("data.delimiter", (options.delimiter as char).to_string());
                kv("data.label_column", label_column_text(options.label_column));
                kv("data.header", options.header.to_string());
            }
            DataSource::Cifar {
                dir,
                per_class,
                downsample,
                ..
            } => {
                kv("data.source", s.data.source.label());
                kv("data.path", dir.display().to_string());
                kv("data.per_class", per_class.map_or("all".into(), |k| k.to_string()));
                kv("data.downsample", downsample.map_or("none".into(), |k| k.to_string()));
            }
        }
        kv("std_convention", "population".into());
        match &self.outcome {
            Outcome::Completed(run) => {
                kv("status", "ok".into());
                kv("test_accuracy", run.accuracy.to_string());
                kv("wall_time_s", run.wall_time_s.to_string());
                kv("initial_loss", run.history.initial_loss.to_string());
                kv("stopped_early", run.history.stopped_early.to_string());
                out.push_str(HISTORY_MARKER);
                out.push('\n');
                out.push_str(HISTORY_HEADER);
                out.push('\n');
                for (i, e) in run.history.epochs.iter().enumerate() {
                    let norm = e.max_norm_error.map_or("-".into(), |v| v.to_string());
                    let _ = writeln!(out, "{},{},{},{}", i + 1, e.loss, e.accuracy, norm);
                }
            }
            Outcome::Failed(why) => {
                kv("status", "failed".into());
                kv("error", why.replace('\n', " "));
            }
        }
        out
    }

    /// Inverse of [`RunRecord::to_text`]; `origin` labels parse errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut fields = Fields {
            origin,
            map: BTreeMap::new(),
        };
        let mut lines = text.lines().enumerate();
        let mut has_history = false;
        for (i, line) in lines.by_ref() {
            if line == HISTORY_MARKER {
                has_history = true;
                break;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fields.error(i + 1, format!("expected key=value, found '{line}'")))?;
            fields.map.insert(k.to_string(), (i + 1, v.to_string()));
        }
        let f = &fields;

        let family: Family = f.parsed("family")?;
        let margin = MarginConfig {
            family,
            m: f.parsed("m")?,
            s: f.parsed("s")?,
            scale_by_norm: f.parsed("scale_by_norm")?,
            queue_capacity: f.parsed("queue")?,
            use_monotone_psi: f.parsed("monotone_psi")?,
        };
        let projection = match f.get("projection")? {
            (_, "on") => true,
            (_, "off") => false,
            (line, v) => return Err(f.error(line, format!("projection must be on or off, got '{v}'"))),
        };
        let encoder_layers = match f.get("encoder")? {
            (_, "") => Vec::new(),
            (line, v) => v
                .split(',')
                .map(|w| w.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| f.error(line, format!("bad encoder widths '{v}'")))?,
        };
        let model = ModelConfig {
            encoder_layers,
            feature_dim: f.parsed("feature_dim")?,
            projection,
            margin,
        };
        let seed: u64 = f.parsed("seed")?;
        let optim = OptimConfig {
            lr: f.parsed("lr")?,
            momentum: f.parsed("momentum")?,
            batch_size: f.parsed("batch")?,
            epochs: f.parsed("epochs")?,
            seed,
            early_stop: f.parsed("early_stop")?,
        };
        let source = match f.get("data.source")? {
            (_, "spirals") => DataSource::Spirals {
                n_per_class: f.parsed("data.n_per_class")?,
                noise: f.parsed("data.noise")?,
            },
            (_, "blobs") => DataSource::Blobs {
                classes: f.parsed("data.classes")?,
                n_per_class: f.parsed("data.n_per_class")?,
                spread: f.parsed("data.spread")?,
                radius: f.parsed("data.radius")?,
            },
            (_, "csv") => {
                let delimiter = match f.get("data.delimiter")? {
                    (_, d) if d.len() == 1 => d.as_bytes()[0],
                    (line, d) => return Err(f.error(line, format!("delimiter must be one byte, got '{d}'"))),
                };
                let label_column = match f.get("data.label_column")? {
                    (_, "first") => LabelColumn::First,
                    (_, "last") => LabelColumn::Last,
                    _ => LabelColumn::Index(f.parsed("data.label_column")?),
                };
                DataSource::Delimited {
                    path: f.get("data.path")?.1.into(),
                    options: DelimitedOptions {
                        delimiter,
                        label_column,
                        header: f.parsed("data.header")?,
                    },
                }
            }
            (_, kind @ ("cifar10" | "cifar100")) => DataSource::Cifar {
                kind: if kind == "cifar10" {
                    CifarKind::Cifar10
                } else {
                    CifarKind::Cifar100
                },
                dir: f.get("data.path")?.1.into(),
                per_class: f.optional("data.per_class", "all")?,
                downsample: f.optional("data.downsample", "none")?,
            },
            (line, other) => return Err(f.error(line, format!("unknown data source '{other}'"))),
        };
        let data = DataConfig {
            source,
            seed: f.parsed("data.seed")?,
            train_fraction: f.parsed("data.train_fraction")?,
        };
        let spec = ExperimentSpec {
            name: f.get("experiment")?.1.to_string(),
            model,
            optim,
            data,
            seeds: vec![seed],
        };

        let outcome = match f.get("status")? {
            (_, "failed") => Outcome::Failed(f.get("error")?.1.to_string()),
            (_, "ok") => {
                if !has_history {
                    return Err(f.error(0, "completed run without a history section".into()));
                }
                let mut epochs = Vec::new();
                for (i, line) in lines {
                    if line == HISTORY_HEADER || line.trim().is_empty() {
                        continue;
                    }
                    let bad = || f.error(i + 1, format!("bad history row '{line}'"));
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() != 4 {
                        return Err(bad());
                    }
                    let num = |c: &str| c.parse::<f64>().map_err(|_| bad());
                    epochs.push(EpochStats {
                        loss: num(cells[1])?,
                        accuracy: num(cells[2])?,
                        max_norm_error: if cells[3] == "-" { None } else { Some(num(cells[3])?) },
                    });
                }
                Outcome::Completed(SeedRun {
                    seed,
                    accuracy: f.parsed("test_accuracy")?,
                    wall_time_s: f.parsed("wall_time_s")?,
                    history: History {
                        initial_loss: f.parsed("initial_loss")?,
                        epochs,
                        stopped_early: f.parsed("stopped_early")?,
                    },
                })
            }
            (line, other) => return Err(f.error(line, format!("unknown status '{other}'"))),
        };
        Ok(RunRecord { spec, seed, outcome })
    }
}

/// Header fields of a record, keyed by name with their line numbers.
struct Fields<'a> {
    origin: &'a str,
    map: BTreeMap<String, (usize, String)>,
}

impl Fields<'_> {
    fn error(&self, line: usize, detail: String) -> Error {
        let location = if line == 0 {
            self.origin.to_string()
        } else {
            format!("{} line {line}", self.origin)
        };
        Error::Parse { location, detail }
    }

    fn get(&self, key: &str) -> Result<(usize, &str)> {
        self.map
            .get(key)
            .map(|(line, v)| (*line, v.as_str()))
            .ok_or_else(|| self.error(0, format!("missing field '{key}'")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (line, v) = self.get(key)?;
        v.parse()
            .map_err(|_| self.error(line, format!("bad value '{v}' for '{key}'")))
    }

    fn optional(&self, key: &str, none: &str) -> Result<Option<usize>> {
        match self.get(key)? {
            (_, v) if v == none => Ok(None),
            _ => self.parsed(key).map(Some),
        }
    }
}
