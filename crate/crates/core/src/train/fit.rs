use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use super::optim::{sgd_step, OptimConfig, SgdState, PLATEAU_TOLERANCE, PLATEAU_WINDOW};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{head_forward, inference_scores, EmbeddingQueue, Family};
use crate::ndcore::{Tape, Tensor};

/// Rows per forward pass when scoring a whole dataset.
const EVAL_CHUNK: usize = 4096;
/// Losses kept in a divergence diagnostic.
const DIAGNOSTIC_TAIL: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Mean per-example training loss over the epoch.
    pub loss: f64,
    /// Fraction of training examples classified correctly before each
    /// batch's update.
    pub accuracy: f64,
    /// Largest `| |f|^2 - 1 |` over every projected feature the head saw;
    /// `None` without projection.
    pub max_norm_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    /// Training-set loss of the freshly initialised model.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn count_correct(scores: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(scores.row(i)) == y)
        .count()
}

fn check_fits(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config(format!("dataset '{}' is empty", ds.name())));
    }
    if ds.dim() != model.input_dim() || ds.class_count() != model.classes() {
        return Err(Error::Shape(format!(
            "model expects {} inputs and {} classes, dataset '{}' has {} and {}",
            model.input_dim(),
            model.classes(),
            ds.name(),
            ds.dim(),
            ds.class_count()
        )));
    }
    Ok(())
}

/// Mean head loss over `ds` without touching the parameters. BroadFace is
/// evaluated with an empty queue.
pub fn dataset_loss(model: &Model, ds: &Dataset) -> Result<f64> {
    check_fits(model, ds)?;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, ds.features().select_rows(chunk), false)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels()[i]).collect();
        let loss = head_forward(&mut tape, fwd.features, fwd.head, &model.config().margin, &labels, None)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Mini-batch SGD for `opt.epochs` epochs, or fewer when the train loss
/// plateaus and `opt.early_stop` is set. Each epoch visits the data in a
/// fresh order drawn from `opt.seed`.
pub fn fit(model: &mut Model, train: &Dataset, opt: &OptimConfig) -> Result<History> {
    opt.validate()?;
    check_fits(model, train)?;
    let margin = model.config().margin.clone();
    let projected = model.config().projection;
    let mut queue = (margin.family == Family::BroadFace).then(|| EmbeddingQueue::new(margin.queue_capacity));
    let mut state = SgdState::new();
    let mut history = History {
        initial_loss: dataset_loss(model, train)?,
        epochs: Vec::with_capacity(opt.epochs),
        stopped_early: false,
    };
    let mut recent = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..opt.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut norm_err: f64 = 0.0;
        for (batch, idx) in order.chunks(opt.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, train.features().select_rows(idx), true)?;
            let loss = head_forward(&mut tape, fwd.features, fwd.head, &margin, &labels, queue.as_mut())?;
            let value = tape.value(loss).item()?;
            recent.push(value);
            if recent.len() > DIAGNOSTIC_TAIL {
                recent.remove(0);
            }
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: batch + 1,
                    loss: value,
                    recent,
                });
            }
            loss_sum += value * idx.len() as f64;

            let scores = inference_scores(&mut tape, fwd.features, fwd.head, margin.family)?;
            correct += count_correct(tape.value(scores), &labels);
            if projected {
                let f = tape.value(fwd.features);
                for i in 0..f.rows() {
                    let s: f64 = f.row(i).iter().map(|v| v * v).sum();
                    norm_err = norm_err.max((s - 1.0).abs());
                }
            }

            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = fwd
                .params
                .iter()
                .map(|&p| match tape.grad(p) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(p).numel()],
                })
                .collect();
            sgd_step(model.params_mut(), &grads, &mut state, opt)?;
        }

        history.epochs.push(EpochStats {
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            max_norm_error: projected.then_some(norm_err),
        });
        if opt.early_stop && plateaued(&history.epochs) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

fn plateaued(epochs: &[EpochStats]) -> bool {
    if epochs.len() <= PLATEAU_WINDOW {
        return false;
    }
    let then = epochs[epochs.len() - 1 - PLATEAU_WINDOW].loss;
    let now = epochs[epochs.len() - 1].loss;
    then - now < PLATEAU_TOLERANCE * then.abs()
}

/// Predicted class per row: argmax over plain cosines for the angular
/// families, over raw logits for CCE. Margins play no part.
pub fn predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    let family = model.config().margin.family;
    let mut out = Vec::with_capacity(x.rows());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, x.select_rows(chunk), false)?;
        let scores = inference_scores(&mut tape, fwd.features, fwd.head, family)?;
        let s = tape.value(scores);
        out.extend((0..s.rows()).map(|i| argmax(s.row(i))));
    }
    Ok(out)
}

/// Fraction of `ds` classified correctly.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    check_fits(model, ds)?;
    let pred = predict(model, ds.features())?;
    let correct = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;
    use crate::heads::MarginConfig;
    use crate::train::model::{build_model, ModelConfig};

    fn blobs() -> Dataset {
        gen_gaussian_blobs(3, 30, 0.1, 2.0, 4).unwrap()
    }

    fn model(family: Family, projection: bool) -> Model {
        let cfg = ModelConfig::new(MarginConfig::new(family))
            .with_encoder(&[16])
            .with_feature_dim(4)
            .with_projection(projection);
        build_model(&cfg, 2, 3, 1).unwrap()
    }

    fn opt(lr: f64, epochs: usize) -> OptimConfig {
        OptimConfig {
            batch_size: 16,
            epochs,
            seed: 3,
            early_stop: false,
            ..OptimConfig::new(lr)
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = model(Family::ArcFace, true);
        let before = m.clone();
        fit(&mut m, &blobs(), &opt(0.0, 3)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn cce_fits_separable_blobs() {
        let ds = blobs();
        let mut m = model(Family::Cce, false);
        let h = fit(&mut m, &ds, &opt(0.05, 60)).unwrap();
        assert_eq!(evaluate(&m, &ds).unwrap(), 1.0);
        assert_eq!(h.epochs.last().unwrap().accuracy, 1.0);
    }

    #[test]
    fn first_epoch_beats_initial_loss_for_every_family() {
        let ds = blobs();
        for family in Family::ALL {
            let mut m = model(family, true);
            let h = fit(&mut m, &ds, &opt(0.05, 1)).unwrap();
            assert!(h.epochs[0].loss < h.initial_loss, "{family}: {} vs {}", h.epochs[0].loss, h.initial_loss);
        }
    }

    #[test]
    fn projection_keeps_unit_norm_while_training() {
        let mut m = model(Family::CosFace, true);
        let h = fit(&mut m, &blobs(), &opt(0.1, 10)).unwrap();
        for e in &h.epochs {
            assert!(e.max_norm_error.unwrap() <= 1e-12);
        }
    }

    #[test]
    fn repeated_fit_is_bitwise_identical() {
        let ds = blobs();
        let run = || {
            let mut m = model(Family::BroadFace, true);
            let h = fit(&mut m, &ds, &opt(0.05, 4)).unwrap();
            (m, h.losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_ignores_margin() {
        let ds = blobs();
        let mut m = model(Family::CosFace, true);
        fit(&mut m, &ds, &opt(0.05, 3)).unwrap();
        let base = predict(&m, ds.features()).unwrap();
        for margin in [0.0, 0.2, 0.9] {
            let mut other = m.clone();
            other_margin(&mut other, margin);
            assert_eq!(predict(&other, ds.features()).unwrap(), base);
        }
    }

    fn other_margin(m: &mut Model, value: f64) {
        let cfg = m.config().clone();
        let mut cfg = cfg;
        cfg.margin.m = value;
        *m = Model::from_parts(cfg, m.params().to_vec()).unwrap();
    }

    #[test]
    fn diverging_run_reports_where() {
        let ds = blobs();
        let mut m = model(Family::Cce, false);
        let err = fit(&mut m, &ds, &opt(1e6, 5)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn wrong_input_width_rejected() {
        let mut m = build_model(
            &ModelConfig::new(MarginConfig::new(Family::Cce)).with_encoder(&[]),
            5,
            3,
            0,
        )
        .unwrap();
        assert!(matches!(fit(&mut m, &blobs(), &opt(0.1, 1)), Err(Error::Shape(_))));
    }
}
