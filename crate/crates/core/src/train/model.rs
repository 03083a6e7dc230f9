use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::MarginConfig;
use crate::ndcore::{Tape, Tensor, Var};
use crate::stereo::project_batch;

/// Default hidden widths of the dense encoder.
pub const DEFAULT_ENCODER: [usize; 2] = [512, 256];
pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Dense ReLU encoder, optional stereographic projection, then a head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden widths, each followed by a ReLU. May be empty.
    pub encoder_layers: Vec<usize>,
    /// Width of the final linear encoder layer.
    pub feature_dim: usize,
    pub projection: bool,
    pub margin: MarginConfig,
}

impl ModelConfig {
    pub fn new(margin: MarginConfig) -> Self {
        ModelConfig {
            encoder_layers: DEFAULT_ENCODER.to_vec(),
            feature_dim: DEFAULT_FEATURE_DIM,
            projection: true,
            margin,
        }
    }

    pub fn with_encoder(mut self, widths: &[usize]) -> Self {
        self.encoder_layers = widths.to_vec();
        self
    }

    pub fn with_feature_dim(mut self, n: usize) -> Self {
        self.feature_dim = n;
        self
    }

    pub fn with_projection(mut self, on: bool) -> Self {
        self.projection = on;
        self
    }

    /// Dimension of the vectors the head sees.
    pub fn head_dim(&self) -> usize {
        self.feature_dim + usize::from(self.projection)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.encoder_layers.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        self.margin.validate()
    }
}

/// Parameters laid out as `[W_0, b_0, ..., W_L, b_L, W_head]`, weights
/// stored input-major (`fan_in x fan_out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub params: Vec<Var>,
    /// Features entering the head (post-projection when enabled).
    pub features: Var,
    pub head: Var,
}

/// He-uniform weights and zero biases, drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, input_dim: usize, classes: usize, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if input_dim == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "need input dim >= 1 and >= 2 classes, got {input_dim} and {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |fan_in: usize, fan_out: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data)
    };
    let mut params = Vec::new();
    let mut fan_in = input_dim;
    for &width in cfg.encoder_layers.iter().chain(std::iter::once(&cfg.feature_dim)) {
        params.push(uniform(fan_in, width)?);
        params.push(Tensor::zeros(vec![width]));
        fan_in = width;
    }
    params.push(uniform(cfg.head_dim(), classes)?);
    Ok(Model {
        config: cfg.clone(),
        params,
    })
}

impl Model {
    /// Reassembles a model, checking that `params` match the layout
    /// `cfg` implies.
    pub fn from_parts(cfg: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let widths: Vec<usize> = cfg
            .encoder_layers
            .iter()
            .copied()
            .chain(std::iter::once(cfg.feature_dim))
            .collect();
        if params.len() != 2 * widths.len() + 1 {
            return Err(Error::State(format!(
                "{} parameter tensors for {} layers",
                params.len(),
                widths.len()
            )));
        }
        let mut fan_in = params[0].rows();
        for (l, &w) in widths.iter().enumerate() {
            if params[2 * l].shape() != [fan_in, w] || params[2 * l + 1].shape() != [w] {
                return Err(Error::State(format!("layer {l} does not match width {w}")));
            }
            fan_in = w;
        }
        let head = &params[params.len() - 1];
        if head.rank() != 2 || head.rows() != cfg.head_dim() {
            return Err(Error::State(format!(
                "head has shape {:?}, expected {} rows",
                head.shape(),
                cfg.head_dim()
            )));
        }
        Ok(Model { config: cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn head(&self) -> &Tensor {
        self.params.last().expect("model always has a head")
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].rows()
    }

    pub fn classes(&self) -> usize {
        self.head().cols()
    }

    /// Records the encoder and projection on `tape`. Parameters become
    /// trainable leaves when `trainable` is set, constants otherwise.
    pub fn forward(&self, tape: &mut Tape, x: Tensor, trainable: bool) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let mut h = tape.constant(x);
        let layers = (params.len() - 1) / 2;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_row(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        if self.config.projection {
            h = project_batch(tape, h)?;
        }
        let head = *params.last().expect("model always has a head");
        Ok(Forward {
            params,
            features: h,
            head,
        })
    }

    /// Features entering the head for every row of `x`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x.clone(), false)?;
        Ok(tape.value(fwd.features).clone())
    }
}
