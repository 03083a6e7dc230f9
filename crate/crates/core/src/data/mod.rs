//! Datasets: synthetic 2-D benchmarks, delimited text files and CIFAR
//! binary batches. Nothing here augments data.

mod cifar;
mod delimited;
mod synthetic;

pub use cifar::{load_cifar_binary, CifarKind, CifarOptions, CifarPart, CIFAR_IMAGE_BYTES, CIFAR_SIDE};
pub use delimited::{format_row, load_delimited, read_matrix, write_delimited, DelimitedOptions, LabelColumn};
pub use synthetic::{gen_gaussian_blobs, gen_two_spirals};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Shape(format!(
                "dataset features must be N x n, got {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index {
                index: l,
                len: class_count,
            });
        }
        if !features.is_finite() {
            return Err(Error::domain("dataset", "non-finite feature value"));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
        }
    }
}

/// How to partition a dataset into train and test sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            shuffle_seed: 0,
        }
    }
}

/// Seeded shuffle, then the first `round(fraction * N)` rows train.
pub fn split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {f}"
        )));
    }
    let n = ds.len();
    let n_train = (f * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "splitting {n} rows at {f} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.shuffle_seed));
    Ok((ds.subset(&order[..n_train]), ds.subset(&order[n_train..])))
}
