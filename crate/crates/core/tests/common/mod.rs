//! Independent reference implementations shared by the integration tests.
//! Nothing here goes through the tape; every formula is written out on
//! plain `f64` slices.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spherehead::heads::{head_forward, EmbeddingQueue, Family, MarginConfig};
use spherehead::ndcore::{Tape, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Below this loss the gradient is too small for `FD_STEP` to resolve.
pub const SATURATED_LOSS: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|, 1e-8)` over whole vectors.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Row `i` of a row-major `rows x cols` buffer.
pub fn row(buf: &[f64], cols: usize, i: usize) -> &[f64] {
    &buf[i * cols..(i + 1) * cols]
}

/// Column `j` of a row-major `d x c` weight buffer.
pub fn column(w: &[f64], d: usize, c: usize, j: usize) -> Vec<f64> {
    (0..d).map(|k| w[k * c + j]).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// Mean softmax cross-entropy of logit rows.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum();
    total / labels.len() as f64
}

/// SphereFace target transform with the piecewise monotone extension.
pub fn psi(theta: f64, m: f64, monotone: bool) -> f64 {
    let c = (m * theta).cos();
    if !monotone {
        return c;
    }
    let k = (m * theta / std::f64::consts::PI).floor().clamp(0.0, m - 1.0);
    let sign = if k as i64 % 2 == 0 { 1.0 } else { -1.0 };
    sign * c - 2.0 * k
}

/// Reference loss for one head on raw buffers: `x` is `b x d`, `w` is
/// `d x c`, both row-major.
pub fn reference_loss(cfg: &MarginConfig, x: &[f64], w: &[f64], d: usize, c: usize, labels: &[usize]) -> f64 {
    let b = labels.len();
    let cols: Vec<Vec<f64>> = (0..c).map(|j| column(w, d, c, j)).collect();
    let logits: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let xi = row(x, d, i);
            let y = labels[i];
            if cfg.family == Family::Cce {
                return cols.iter().map(|wj| xi.iter().zip(wj).map(|(p, q)| p * q).sum()).collect();
            }
            let scale = if cfg.scale_by_norm { norm(xi) } else { cfg.s };
            (0..c)
                .map(|j| {
                    let cos = cosine(xi, &cols[j]);
                    let v = if j != y {
                        cos
                    } else {
                        let theta = cos.clamp(-1.0 + 1e-12, 1.0 - 1e-12).acos();
                        match cfg.family {
                            Family::SphereFace if cfg.m == 1.0 => cos,
                            Family::SphereFace => psi(theta, cfg.m, cfg.use_monotone_psi),
                            Family::CosFace => cos - cfg.m,
                            Family::ArcFace | Family::BroadFace => (theta + cfg.m).cos(),
                            Family::Cce => unreachable!(),
                        }
                    };
                    scale * v
                })
                .collect()
        })
        .collect();
    cross_entropy(&logits, labels)
}

/// Library loss and its gradients with respect to features and weights.
pub fn library_loss(
    cfg: &MarginConfig,
    x: &[f64],
    w: &[f64],
    d: usize,
    c: usize,
    labels: &[usize],
    queue: Option<&mut EmbeddingQueue>,
) -> (f64, Vec<f64>, Vec<f64>) {
    let b = labels.len();
    let mut tape = Tape::new();
    let xv = tape.param(Tensor::new(vec![b, d], x.to_vec()).unwrap());
    let wv = tape.param(Tensor::new(vec![d, c], w.to_vec()).unwrap());
    let loss = head_forward(&mut tape, xv, wv, cfg, labels, queue).unwrap();
    let value = tape.value(loss).item().unwrap();
    tape.backward(loss).unwrap();
    let gx = tape.grad(xv).map_or(vec![0.0; x.len()], |g| g.to_vec());
    let gw = tape.grad(wv).map_or(vec![0.0; w.len()], |g| g.to_vec());
    (value, gx, gw)
}

/// A random head instance small enough for finite differences.
#[derive(Debug, Clone)]
pub struct Instance {
    pub b: usize,
    pub d: usize,
    pub c: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Instance {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let b = rng.random_range(1..=4);
        let d = rng.random_range(2..=8);
        let c = rng.random_range(2..=5);
        Instance {
            b,
            d,
            c,
            x: gaussian(rng, b * d),
            w: gaussian(rng, d * c),
            labels: (0..b).map(|_| rng.random_range(0..c)).collect(),
        }
    }

    pub fn target_angles(&self) -> Vec<f64> {
        (0..self.b)
            .map(|i| {
                let wy = column(&self.w, self.d, self.c, self.labels[i]);
                cosine(row(&self.x, self.d, i), &wy).acos()
            })
            .collect()
    }

    /// False near points where a loss is not smooth (the `acos` clamp and
    /// the SphereFace psi kinks) and for saturated instances, whose
    /// gradients sit below the round-off floor of central differences.
    pub fn is_smooth_for(&self, cfg: &MarginConfig) -> bool {
        if reference_loss(cfg, &self.x, &self.w, self.d, self.c, &self.labels) < SATURATED_LOSS {
            return false;
        }
        self.target_angles().iter().all(|&t| {
            let clear_of_clamp = t > 1e-3 && t < std::f64::consts::PI - 1e-3;
            let k = cfg.m * t / std::f64::consts::PI;
            let clear_of_kink = cfg.family != Family::SphereFace || (k - k.round()).abs() > 1e-3;
            clear_of_clamp && clear_of_kink
        })
    }
}
