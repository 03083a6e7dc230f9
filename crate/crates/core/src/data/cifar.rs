use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Image side length in pixels.
pub const CIFAR_SIDE: usize = 32;
/// Pixel bytes per record: three planes of 32x32.
pub const CIFAR_IMAGE_BYTES: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    /// Label bytes before the pixels. The 100-class files carry a coarse
    /// and a fine label; the fine one is used.
    fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn files(self, part: CifarPart) -> Vec<&'static str> {
        match (self, part) {
            (CifarKind::Cifar10, CifarPart::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarKind::Cifar10, CifarPart::Test) => vec!["test_batch.bin"],
            (CifarKind::Cifar100, CifarPart::Train) => vec!["train.bin"],
            (CifarKind::Cifar100, CifarPart::Test) => vec!["test.bin"],
        }
    }

    fn name(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "cifar10",
            CifarKind::Cifar100 => "cifar100",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarPart {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CifarOptions {
    /// Keep this many records per class, drawn with `seed`.
    pub subset_per_class: Option<usize>,
    /// Mean-pool each plane to `k x k`; `k` must divide 32.
    pub downsample_to: Option<usize>,
    pub seed: u64,
}

/// Loads one part of a CIFAR binary distribution from `dir`. Pixels are
/// scaled to `[0, 1]` and flattened plane by plane (channel, row, column).
pub fn load_cifar_binary(dir: &Path, kind: CifarKind, part: CifarPart, opts: CifarOptions) -> Result<Dataset> {
    let side = opts.downsample_to.unwrap_or(CIFAR_SIDE);
    if side == 0 || CIFAR_SIDE % side != 0 {
        return Err(Error::Config(format!(
            "downsample size must divide {CIFAR_SIDE}, got {side}"
        )));
    }
    if opts.subset_per_class == Some(0) {
        return Err(Error::Config("subset per class must be positive".into()));
    }

    let record = kind.record_bytes();
    let mut raw: Vec<(usize, Vec<u8>)> = Vec::new();
    for file in kind.files(part) {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Format {
                path: path.clone(),
                detail: format!(
                    "{} bytes is not a whole number of {record}-byte records",
                    bytes.len()
                ),
            });
        }
        for (i, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[kind.label_bytes() - 1] as usize;
            if label >= kind.classes() {
                return Err(Error::Format {
                    path: path.clone(),
                    detail: format!("record {i} has label {label}, expected < {}", kind.classes()),
                });
            }
            raw.push((label, rec[kind.label_bytes()..].to_vec()));
        }
    }

    let chosen: Vec<usize> = match opts.subset_per_class {
        None => (0..raw.len()).collect(),
        Some(k) => stratified(&raw, kind.classes(), k, opts.seed)?,
    };

    let dim = 3 * side * side;
    let mut features = Vec::with_capacity(chosen.len() * dim);
    let mut labels = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let (label, pixels) = &raw[i];
        pool_into(pixels, side, &mut features);
        labels.push(*label);
    }
    let features = Tensor::new(vec![labels.len(), dim], features)?;
    Dataset::new(features, labels, kind.classes(), kind.name())
}

/// `k` seeded picks per class, returned in file order.
fn stratified(raw: &[(usize, Vec<u8>)], classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, (label, _)) in raw.iter().enumerate() {
        by_class[*label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(classes * k);
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < k {
            return Err(Error::Config(format!(
                "class {c} has {} records, fewer than the {k} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..k]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn pool_into(pixels: &[u8], side: usize, out: &mut Vec<f64>) {
    let block = CIFAR_SIDE / side;
    let norm = 255.0 * (block * block) as f64;
    for ch in 0..3 {
        let plane = &pixels[ch * CIFAR_SIDE * CIFAR_SIDE..(ch + 1) * CIFAR_SIDE * CIFAR_SIDE];
        for by in 0..side {
            for bx in 0..side {
                let mut sum = 0u32;
                for y in by * block..(by + 1) * block {
                    for x in bx * block..(bx + 1) * block {
                        sum += plane[y * CIFAR_SIDE + x] as u32;
                    }
                }
                out.push(sum as f64 / norm);
            }
        }
    }
}
