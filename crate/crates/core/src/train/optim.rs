use crate::error::{Error, Result};
use crate::ndcore::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.92;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_EPOCHS: usize = 100;
/// Default learning rates for the angular families and for CCE.
pub const DEFAULT_MARGIN_LR: f64 = 1e-4;
pub const DEFAULT_CCE_LR: f64 = 1e-3;

/// Train-loss plateau rule: stop once the loss improved by less than this
/// relative amount over the last `PLATEAU_WINDOW` epochs.
pub const PLATEAU_TOLERANCE: f64 = 1e-4;
pub const PLATEAU_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub early_stop: bool,
}

impl OptimConfig {
    pub fn new(lr: f64) -> Self {
        OptimConfig {
            lr,
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            early_stop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// Heavy-ball momentum: `v = momentum * v + g`, then `p -= lr * v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut SgdState, opt: &OptimConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::State(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut state.velocity).enumerate() {
        if g.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::State(format!(
                "parameter {i} has {} entries, gradient {}, velocity {}",
                p.numel(),
                g.len(),
                v.len()
            )));
        }
        for ((pk, gk), vk) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vk = opt.momentum * *vk + gk;
            *pk -= opt.lr * *vk;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, momentum: f64) -> OptimConfig {
        OptimConfig {
            momentum,
            ..OptimConfig::new(lr)
        }
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut st = SgdState::new();
        sgd_step(&mut p, &[vec![0.5, -1.0]], &mut st, &opt(0.1, 0.0)).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn two_steps_unroll() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut st = SgdState::new();
        let o = opt(1.0, 0.5);
        for _ in 0..2 {
            sgd_step(&mut p, &[vec![2.0]], &mut st, &o).unwrap();
        }
        // v1 = g, v2 = 1.5 g
        assert_eq!(p[0].data(), &[-(1.0 + 1.5) * 2.0]);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let mut p = vec![Tensor::vector(vec![0.0])];
        let mut st = SgdState::new();
        let o = opt(0.0, 0.9);
        sgd_step(&mut p, &[vec![1.0]], &mut st, &o).unwrap();
        for k in 1..5 {
            sgd_step(&mut p, &[vec![0.0]], &mut st, &o).unwrap();
            assert!((st.velocity()[0][0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_state_error() {
        let mut p = vec![Tensor::vector(vec![0.0, 1.0])];
        let mut st = SgdState::new();
        let r = sgd_step(&mut p, &[vec![1.0]], &mut st, &opt(0.1, 0.0));
        assert!(matches!(r, Err(Error::State(_))));
        assert!(matches!(sgd_step(&mut p, &[], &mut st, &opt(0.1, 0.0)), Err(Error::State(_))));
    }

    #[test]
    fn validation() {
        assert!(opt(0.1, 1.0).validate().is_err());
        assert!(opt(-1.0, 0.5).validate().is_err());
        assert!(OptimConfig { batch_size: 0, ..opt(0.1, 0.0) }.validate().is_err());
        assert!(opt(0.0, 0.92).validate().is_ok());
    }
}
