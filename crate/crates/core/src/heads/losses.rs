use std::f64::consts::PI;

use super::config::{Family, MarginConfig};
use super::queue::{compensate, EmbeddingQueue, QueueEntry};
use crate::error::{Error, Result};
use crate::ndcore::{Tape, Tensor, Var};

/// Cosines are pulled this far inside `[-1, 1]` before `acos`.
pub const ACOS_CLAMP: f64 = 1e-12;

fn matrix(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize)> {
    match tape.value(v).shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("{what} must be a matrix, got {other:?}"))),
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&l) => Err(Error::Index {
            index: l,
            len: classes,
        }),
        None => Ok(()),
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    t
}

/// Euclidean norms of the rows of `x`, failing on an all-zero row.
fn row_norms(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let sums = tape.sum(sq, Some(1))?;
    if let Some(i) = tape.value(sums).data().iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("feature row {i} has zero norm")));
    }
    tape.sqrt(sums)
}

/// `cos theta_(j,i)` between feature row `i` and weight column `j`, both
/// L2-normalised inside the op. Features are `B x d`, weights `d x C`.
pub fn cosine_logits(tape: &mut Tape, features: Var, weights: Var) -> Result<Var> {
    let (_, d) = matrix(tape, features, "features")?;
    let (dw, _) = matrix(tape, weights, "weights")?;
    if d != dw {
        return Err(Error::Dimension {
            op: "cosine_logits",
            lhs: tape.value(features).shape().to_vec(),
            rhs: tape.value(weights).shape().to_vec(),
        });
    }
    let one = tape.constant(Tensor::scalar(1.0));

    let fnorm = row_norms(tape, features)?;
    let finv = tape.div(one, fnorm)?;
    let xn = tape.scale_rows(features, finv)?;

    let wsq = tape.mul(weights, weights)?;
    let wsums = tape.sum(wsq, Some(0))?;
    if let Some(j) = tape.value(wsums).data().iter().position(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("weight column {j} has zero norm")));
    }
    let wnorm = tape.sqrt(wsums)?;
    let winv = tape.div(one, wnorm)?;
    let wn = tape.scale_cols(weights, winv)?;

    let cos = tape.matmul(xn, wn)?;
    tape.clamp(cos, -1.0, 1.0)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = matrix(tape, logits, "logits")?;
    check_labels(labels, b, c)?;
    let mask = tape.constant(one_hot(labels, c));
    let picked = tape.mul(logits, mask)?;
    let target = tape.sum(picked, Some(1))?;
    let lse = tape.logsumexp(logits, Some(1))?;
    let per_sample = tape.sub(lse, target)?;
    tape.mean(per_sample, None)
}

/// Cosine matrix with the target entries replaced by `target` (length B).
fn replace_targets(tape: &mut Tape, cos: Var, target: Var, labels: &[usize]) -> Result<Var> {
    let c = tape.value(cos).cols();
    let hot = one_hot(labels, c);
    let mut cold = Tensor::full(hot.shape().to_vec(), 1.0);
    for (k, h) in cold.data_mut().iter_mut().zip(hot.data()) {
        *k -= h;
    }
    let hot = tape.constant(hot);
    let cold = tape.constant(cold);
    let others = tape.mul(cos, cold)?;
    let placed = tape.scale_rows(hot, target)?;
    tape.add(others, placed)
}

/// Cosine of each row's target class.
fn target_cosines(tape: &mut Tape, cos: Var, labels: &[usize]) -> Result<Var> {
    let c = tape.value(cos).cols();
    let mask = tape.constant(one_hot(labels, c));
    let picked = tape.mul(cos, mask)?;
    tape.sum(picked, Some(1))
}

/// Angles of the target cosines, computed after clamping away from +-1.
fn target_angles(tape: &mut Tape, target_cos: Var) -> Result<Var> {
    let clamped = tape.clamp(target_cos, -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)?;
    tape.acos(clamped)
}

/// Multiplies the logit rows by `s` or by the raw feature norms.
fn apply_scale(tape: &mut Tape, logits: Var, features: Var, cfg: &MarginConfig) -> Result<Var> {
    if cfg.scale_by_norm {
        let norms = row_norms(tape, features)?;
        tape.scale_rows(logits, norms)
    } else {
        tape.scale(logits, cfg.s)
    }
}

fn prepare(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    labels: &[usize],
) -> Result<Var> {
    let (b, _) = matrix(tape, features, "features")?;
    let (_, c) = matrix(tape, weights, "weights")?;
    check_labels(labels, b, c)?;
    cosine_logits(tape, features, weights)
}

/// Multiplicative angular margin:
/// target logit `|x| psi(theta)` with `psi(theta) = cos(m theta)` or its
/// monotone extension `(-1)^k cos(m theta) - 2k` on `[k pi/m, (k+1) pi/m]`.
pub fn sphereface_loss(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    cfg: &MarginConfig,
    labels: &[usize],
) -> Result<Var> {
    cfg.expect_family(Family::SphereFace)?;
    let cos = prepare(tape, features, weights, labels)?;
    let target_cos = target_cosines(tape, cos, labels)?;
    let m = cfg.m;
    let psi = if m == 1.0 {
        target_cos
    } else {
        let theta = target_angles(tape, target_cos)?;
        let m_theta = tape.scale(theta, m)?;
        let cos_m = tape.cos(m_theta)?;
        if cfg.use_monotone_psi {
            let (signs, offsets): (Vec<f64>, Vec<f64>) = tape
                .value(theta)
                .data()
                .iter()
                .map(|&t| {
                    let k = ((m * t / PI).floor()).clamp(0.0, m - 1.0);
                    let sign = if k as i64 % 2 == 0 { 1.0 } else { -1.0 };
                    (sign, -2.0 * k)
                })
                .unzip();
            let signs = tape.constant(Tensor::vector(signs));
            let offsets = tape.constant(Tensor::vector(offsets));
            let signed = tape.mul(cos_m, signs)?;
            tape.add(signed, offsets)?
        } else {
            cos_m
        }
    };
    let logits = replace_targets(tape, cos, psi, labels)?;
    let logits = apply_scale(tape, logits, features, cfg)?;
    cce_loss(tape, logits, labels)
}

/// Additive cosine margin: target logit `s (cos theta - m)`.
pub fn cosface_loss(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    cfg: &MarginConfig,
    labels: &[usize],
) -> Result<Var> {
    cfg.expect_family(Family::CosFace)?;
    let cos = prepare(tape, features, weights, labels)?;
    let c = tape.value(cos).cols();
    let mut penalty = one_hot(labels, c);
    for v in penalty.data_mut() {
        *v *= cfg.m;
    }
    let penalty = tape.constant(penalty);
    let margined = tape.sub(cos, penalty)?;
    let logits = apply_scale(tape, margined, features, cfg)?;
    cce_loss(tape, logits, labels)
}

fn additive_angular(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    cfg: &MarginConfig,
    labels: &[usize],
) -> Result<Var> {
    let cos = prepare(tape, features, weights, labels)?;
    let target_cos = target_cosines(tape, cos, labels)?;
    let theta = target_angles(tape, target_cos)?;
    let shifted = tape.shift(theta, cfg.m)?;
    let target = tape.cos(shifted)?;
    let logits = replace_targets(tape, cos, target, labels)?;
    let logits = apply_scale(tape, logits, features, cfg)?;
    cce_loss(tape, logits, labels)
}

/// Additive angular margin: target logit `s cos(theta + m)`.
pub fn arcface_loss(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    cfg: &MarginConfig,
    labels: &[usize],
) -> Result<Var> {
    cfg.expect_family(Family::ArcFace)?;
    additive_angular(tape, features, weights, cfg, labels)
}

/// ArcFace over the current batch plus the compensated queue, averaged
/// over `|X| + |E|`. Queued embeddings are constants, so they only feed
/// gradient into the weights. After the loss is built, the batch
/// embeddings and their current class weight columns are enqueued.
pub fn broadface_step(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    cfg: &MarginConfig,
    labels: &[usize],
    queue: &mut EmbeddingQueue,
) -> Result<Var> {
    cfg.expect_family(Family::BroadFace)?;
    let (b, d) = matrix(tape, features, "features")?;
    let (dw, c) = matrix(tape, weights, "weights")?;
    check_labels(labels, b, c)?;
    if let Some(qd) = queue.dim() {
        if qd != d {
            return Err(Error::State(format!(
                "queue holds {qd}-dim embeddings but features are {d}-dim"
            )));
        }
    }
    if dw != d {
        return Err(Error::Dimension {
            op: "broadface",
            lhs: tape.value(features).shape().to_vec(),
            rhs: tape.value(weights).shape().to_vec(),
        });
    }

    let w = tape.value(weights).clone();
    let column = |j: usize| -> Vec<f64> { (0..d).map(|k| w.at(k, j)).collect() };

    let mut past = Vec::with_capacity(queue.len() * d);
    let mut past_labels = Vec::with_capacity(queue.len());
    for entry in queue.iter() {
        if entry.label >= c {
            return Err(Error::State(format!(
                "queued label {} exceeds {c} classes",
                entry.label
            )));
        }
        past.extend(compensate(entry, &column(entry.label))?);
        past_labels.push(entry.label);
    }

    let loss = if past_labels.is_empty() {
        additive_angular(tape, features, weights, cfg, labels)?
    } else {
        let past = tape.constant(Tensor::new(vec![past_labels.len(), d], past)?);
        let all = tape.concat(features, past, 0)?;
        let all_labels: Vec<usize> = labels.iter().copied().chain(past_labels).collect();
        additive_angular(tape, all, weights, cfg, &all_labels)?
    };

    let current = tape.value(features).clone();
    for (i, &label) in labels.iter().enumerate() {
        queue.push(QueueEntry {
            embedding: current.row(i).to_vec(),
            label,
            snapshot_weight: column(label),
        })?;
    }
    Ok(loss)
}

/// Dispatches to the configured objective. CCE uses raw linear logits
/// `features . W`; every other family works on cosines.
pub fn head_forward(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    cfg: &MarginConfig,
    labels: &[usize],
    queue: Option<&mut EmbeddingQueue>,
) -> Result<Var> {
    cfg.validate()?;
    match cfg.family {
        Family::Cce => {
            let logits = tape.matmul(features, weights)?;
            cce_loss(tape, logits, labels)
        }
        Family::SphereFace => sphereface_loss(tape, features, weights, cfg, labels),
        Family::CosFace => cosface_loss(tape, features, weights, cfg, labels),
        Family::ArcFace => arcface_loss(tape, features, weights, cfg, labels),
        Family::BroadFace => match queue {
            Some(q) => broadface_step(tape, features, weights, cfg, labels, q),
            None => broadface_step(
                tape,
                features,
                weights,
                cfg,
                labels,
                &mut EmbeddingQueue::new(0),
            ),
        },
    }
}

/// Margin-free class scores used for prediction: raw logits for CCE,
/// plain cosines for the angular families.
pub fn inference_scores(tape: &mut Tape, features: Var, weights: Var, family: Family) -> Result<Var> {
    if family.is_angular() {
        cosine_logits(tape, features, weights)
    } else {
        tape.matmul(features, weights)
    }
}
