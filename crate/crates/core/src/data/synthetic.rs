use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

const SPIRAL_START: f64 = PI / 2.0;
const SPIRAL_END: f64 = 4.0 * PI;

/// Subtracts the column means in place.
fn center(rows: &mut [[f64; 2]]) {
    let n = rows.len() as f64;
    let mut mean = [0.0; 2];
    for r in rows.iter() {
        mean[0] += r[0];
        mean[1] += r[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    for r in rows.iter_mut() {
        r[0] -= mean[0];
        r[1] -= mean[1];
    }
}

/// Two interleaved Archimedean spirals around the origin.
///
/// Class 0 follows `t (cos t, sin t)` for `t` evenly spaced on
/// `[pi/2, 4 pi]`, class 1 is its point-wise negation. Gaussian noise with
/// standard deviation `noise_sd` is added in those units, after which
/// everything is scaled by `1 / (4 pi)` (outer radius 1) and centred. Rows
/// alternate between the classes.
pub fn gen_two_spirals(n_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("two spirals need at least one point per class".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Config(format!("noise sd must be non-negative, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = || -> f64 {
        if noise_sd == 0.0 {
            0.0
        } else {
            noise_sd * rng.sample::<f64, _>(StandardNormal)
        }
    };
    let scale = 1.0 / SPIRAL_END;
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        let t = if n_per_class == 1 {
            SPIRAL_START
        } else {
            SPIRAL_START + (SPIRAL_END - SPIRAL_START) * i as f64 / (n_per_class - 1) as f64
        };
        let (x, y) = (t * t.cos(), t * t.sin());
        rows.push([(x + noise()) * scale, (y + noise()) * scale]);
        labels.push(0);
        rows.push([(-x + noise()) * scale, (-y + noise()) * scale]);
        labels.push(1);
    }
    center(&mut rows);
    let features = Tensor::from_rows(&rows)?;
    Dataset::new(features, labels, 2, "spirals")
}

/// `classes` isotropic Gaussians whose means sit evenly on a circle of the
/// given radius around the origin. Rows are grouped by class.
pub fn gen_gaussian_blobs(
    classes: usize,
    n_per_class: usize,
    spread: f64,
    radius: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
    }
    if n_per_class == 0 {
        return Err(Error::Config("blobs need at least one point per class".into()));
    }
    if !(spread >= 0.0 && spread.is_finite() && radius.is_finite()) {
        return Err(Error::Config("blob spread and radius must be finite, spread >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        let angle = TAU * c as f64 / classes as f64;
        let mean = [radius * angle.cos(), radius * angle.sin()];
        for _ in 0..n_per_class {
            let mut p = mean;
            if spread > 0.0 {
                p[0] += spread * rng.sample::<f64, _>(StandardNormal);
                p[1] += spread * rng.sample::<f64, _>(StandardNormal);
            }
            rows.push(p);
            labels.push(c);
        }
    }
    center(&mut rows);
    let features = Tensor::from_rows(&rows)?;
    Dataset::new(features, labels, classes, "blobs")
}
